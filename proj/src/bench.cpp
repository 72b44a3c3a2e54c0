#include "dash/bench.hpp"

#include <fmt/format.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dash/crash_sweep.hpp"
#include "dash/dash_eh.hpp"
#include "dash/dash_lh.hpp"

namespace dash::bench {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t fmix(std::uint64_t z) {
  z ^= z >> 33;
  z *= 0xff51afd7ed558ccdull;
  z ^= z >> 33;
  z *= 0xc4ceb9fe1a85ec53ull;
  z ^= z >> 33;
  return z;
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// Temporary pool file removed on destruction.
class TempFile {
 public:
  explicit TempFile(const std::string& stem) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            fmt::format("dash_bench_{}_{}_{}.pool", stem, ::getpid(), counter.fetch_add(1));
  }
  ~TempFile() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  TempFile(const TempFile&) = delete;
  TempFile& operator=(const TempFile&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Either table behind one interface.
class AnyTable {
 public:
  static AnyTable create(TableKind kind, PersistentPool& pool, int K, int S, KeyMode mode) {
    AnyTable t;
    if (kind == TableKind::eh) {
      EhConfig c;
      c.buckets_per_segment = K;
      c.stash_buckets = S;
      c.key_mode = mode;
      t.eh_.emplace(DashEH::create(pool, c));
    } else {
      LhConfig c;
      c.buckets_per_segment = K;
      c.stash_buckets = S;
      c.key_mode = mode;
      t.lh_.emplace(DashLH::create(pool, c));
    }
    return t;
  }
  static AnyTable open(TableKind kind, PersistentPool& pool) {
    AnyTable t;
    if (kind == TableKind::eh) {
      t.eh_.emplace(DashEH::open(pool));
    } else {
      t.lh_.emplace(DashLH::open(pool));
    }
    return t;
  }

  InsertStatus insert(KeyView k, std::uint64_t v) { return eh_ ? eh_->insert(k, v) : lh_->insert(k, v); }
  std::optional<std::uint64_t> search(KeyView k) { return eh_ ? eh_->search(k) : lh_->search(k); }
  bool remove(KeyView k) { return eh_ ? eh_->remove(k) : lh_->remove(k); }
  [[nodiscard]] double load_factor() const { return eh_ ? eh_->load_factor() : lh_->load_factor(); }
  [[nodiscard]] std::uint64_t segments() const {
    return eh_ ? eh_->segment_count() : lh_->addressable_segments();
  }
  [[nodiscard]] TableStats stats() const { return eh_ ? eh_->stats() : lh_->stats(); }
  void quiesce() { (eh_ ? eh_->epochs() : lh_->epochs()).drain_all(); }
  void shutdown() { eh_ ? eh_->shutdown() : lh_->shutdown(); }

 private:
  AnyTable() = default;
  std::optional<DashEH> eh_;
  std::optional<DashLH> lh_;
};

std::size_t pool_size_for(const WorkloadSpec& s) {
  std::uint64_t records = s.preload;
  if (s.mix.ratio[static_cast<int>(OpClass::insert)] > 0) records += s.ops;
  std::uint64_t per = 160;
  if (s.key_mode == KeyMode::variable) per += s.key_len + 64;
  return (64u << 20) + records * per;
}

ProbeStats operator-(const ProbeStats& a, const ProbeStats& b) {
  return {a.key_compares - b.key_compares, a.key_loads - b.key_loads, a.bucket_probes - b.bucket_probes,
          a.stash_probes - b.stash_probes,  a.chain_probes - b.chain_probes, a.retries - b.retries};
}

void add(ProbeStats& a, const ProbeStats& b) {
  a.key_compares += b.key_compares;
  a.key_loads += b.key_loads;
  a.bucket_probes += b.bucket_probes;
  a.stash_probes += b.stash_probes;
  a.chain_probes += b.chain_probes;
  a.retries += b.retries;
}

void add(ClassMetrics& a, const ClassMetrics& b) {
  a.ops += b.ops;
  a.hits += b.hits;
  a.persist += b.persist;
  add(a.probes, b.probes);
}

}  // namespace

// ---- names and parsing ---------------------------------------------------------

const char* to_string(TableKind k) { return k == TableKind::eh ? "eh" : "lh"; }

const char* to_string(OpClass c) {
  switch (c) {
    case OpClass::insert: return "insert";
    case OpClass::pos_search: return "pos_search";
    case OpClass::neg_search: return "neg_search";
    case OpClass::remove: return "delete";
  }
  return "?";
}

TableKind parse_table(const std::string& s) {
  if (s == "eh") return TableKind::eh;
  if (s == "lh") return TableKind::lh;
  throw std::invalid_argument("unknown table kind '" + s + "' (expected eh or lh)");
}

namespace {
int class_index(const std::string& name) {
  for (std::size_t i = 0; i < kOpClasses; ++i) {
    if (name == to_string(static_cast<OpClass>(i))) return static_cast<int>(i);
  }
  if (name == "remove") return static_cast<int>(OpClass::remove);
  throw std::invalid_argument("unknown operation class '" + name + "'");
}
}  // namespace

Mix Mix::parse(const std::string& text) {
  Mix m;
  m.ratio.fill(0.0);
  if (text.rfind("mixed", 0) == 0) {
    double r = 0.2;
    if (text.size() > 5) {
      if (text[5] != ':') throw std::invalid_argument("bad mix '" + text + "'");
      r = std::stod(text.substr(6));
    }
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("mixed ratio must be in [0, 1]");
    m.ratio[static_cast<int>(OpClass::insert)] = r;
    m.ratio[static_cast<int>(OpClass::pos_search)] = 1.0 - r;
    return m;
  }
  if (text.find('=') == std::string::npos) {
    m.ratio[class_index(text)] = 1.0;
    return m;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad mix item '" + item + "'");
    const double r = std::stod(item.substr(eq + 1));
    if (!(r >= 0.0)) throw std::invalid_argument("negative ratio in mix '" + text + "'");
    m.ratio[class_index(item.substr(0, eq))] += r;
  }
  double sum = 0;
  for (double r : m.ratio) sum += r;
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument(fmt::format("mix ratios sum to {}, not 1", sum));
  return m;
}

std::string Mix::describe() const {
  std::string out;
  for (std::size_t i = 0; i < kOpClasses; ++i) {
    if (ratio[i] <= 0) continue;
    if (!out.empty()) out += ',';
    out += fmt::format("{}={:g}", to_string(static_cast<OpClass>(i)), ratio[i]);
  }
  return out;
}

void WorkloadSpec::validate() const {
  double sum = 0;
  for (double r : mix.ratio) {
    if (r < 0) throw std::invalid_argument("negative mix ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("mix ratios must sum to 1");
  if (threads < 1 || threads > 64) throw std::invalid_argument("threads must be in [1, 64]");
  if (distribution == Distribution::zipfian) {
    throw std::invalid_argument("zipfian distribution is reserved and not implemented");
  }
  const bool needs_present = mix.ratio[static_cast<int>(OpClass::pos_search)] > 0 ||
                             mix.ratio[static_cast<int>(OpClass::remove)] > 0;
  if (needs_present && preload == 0) {
    throw std::invalid_argument("positive searches and deletes need a preload");
  }
  if (key_mode == KeyMode::variable && (key_len < 16 || key_len > 1024)) {
    throw std::invalid_argument("variable key length must be in [16, 1024]");
  }
}

// ---- key stream -------------------------------------------------------------------

std::uint64_t KeyStream::positive(std::uint64_t i) const { return fmix(2 * i + fmix(seed_)); }
std::uint64_t KeyStream::negative(std::uint64_t i) const { return fmix(2 * i + 1 + fmix(seed_)); }

std::string KeyStream::text(std::uint64_t key, std::size_t len) {
  auto s = fmt::format("{:016x}", key);
  s.resize(len, '.');
  return s;
}

// ---- run --------------------------------------------------------------------------

namespace {

struct OpPlan {
  OpClass cls;
  std::uint64_t index;  // key index within the class's key space
};

class Planner {
 public:
  explicit Planner(const WorkloadSpec& s) : spec_(s) {
    double acc = 0;
    for (std::size_t i = 0; i < kOpClasses; ++i) {
      acc += s.mix.ratio[i];
      cum_[i] = acc;
    }
    cum_[kOpClasses - 1] = 1.0;
  }

  [[nodiscard]] OpPlan plan(std::uint64_t j) const {
    const std::uint64_t r1 = fmix(j * kGolden + fmix(spec_.seed ^ 0xA5A5A5A5ull));
    const double u = static_cast<double>(r1 >> 11) * 0x1.0p-53;
    std::size_t c = 0;
    while (c + 1 < kOpClasses && u >= cum_[c]) ++c;
    const auto cls = static_cast<OpClass>(c);
    const std::uint64_t r2 = fmix(r1);
    switch (cls) {
      case OpClass::insert: return {cls, spec_.preload + j};
      case OpClass::pos_search:
      case OpClass::remove: return {cls, r2 % spec_.preload};
      case OpClass::neg_search: return {cls, r2};
    }
    return {cls, 0};
  }

 private:
  const WorkloadSpec& spec_;
  std::array<double, kOpClasses> cum_{};
};

class Driver {
 public:
  Driver(const WorkloadSpec& s, AnyTable& t) : spec_(s), table_(t), keys_(s.seed) {}

  // Executes one operation and returns whether it "hit".
  bool execute(const OpPlan& op, std::uint64_t value) {
    const std::uint64_t k = op.cls == OpClass::neg_search ? keys_.negative(op.index) : keys_.positive(op.index);
    if (spec_.key_mode == KeyMode::variable) {
      const auto text = KeyStream::text(k, spec_.key_len);
      return apply(op.cls, KeyView(std::string_view(text)), value);
    }
    return apply(op.cls, KeyView(k), value);
  }

 private:
  bool apply(OpClass cls, KeyView key, std::uint64_t value) {
    switch (cls) {
      case OpClass::insert: return table_.insert(key, value) == InsertStatus::inserted;
      case OpClass::pos_search:
      case OpClass::neg_search: return table_.search(key).has_value();
      case OpClass::remove: return table_.remove(key);
    }
    return false;
  }

  const WorkloadSpec& spec_;
  AnyTable& table_;
  KeyStream keys_;
};

// Per-thread metrics for one phase.
struct Local {
  std::array<ClassMetrics, kOpClasses> classes{};
};

// Runs `count` planned operations across the spec's threads. `plan(j)`
// gives the j-th operation; thread t executes j = t, t + T, ...
PhaseMetrics run_phase(const std::string& name, const WorkloadSpec& spec, AnyTable& table,
                       PersistentPool& pool, std::uint64_t count,
                       const std::function<OpPlan(std::uint64_t)>& plan,
                       const std::function<void(std::uint64_t, const OpPlan&, bool)>& after_op) {
  PhaseMetrics ph;
  ph.name = name;
  ph.ops = count;
  const int T = spec.threads;
  std::vector<Local> locals(static_cast<std::size_t>(T));
  auto worker = [&](int t) {
    Driver drv(spec, table);
    auto& loc = locals[static_cast<std::size_t>(t)];
    for (std::uint64_t j = static_cast<std::uint64_t>(t); j < count; j += static_cast<std::uint64_t>(T)) {
      const auto op = plan(j);
      const auto pc0 = pool.thread_counters();
      const auto pr0 = probe_stats();
      const bool hit = drv.execute(op, j);
      auto& cm = loc.classes[static_cast<int>(op.cls)];
      cm.persist += pool.thread_counters() - pc0;
      add(cm.probes, probe_stats() - pr0);
      ++cm.ops;
      cm.hits += hit ? 1 : 0;
      if (after_op) after_op(j, op, hit);
    }
  };
  const auto t0 = Clock::now();
  if (T == 1) {
    worker(0);
  } else {
    std::vector<std::thread> ts;
    for (int t = 0; t < T; ++t) ts.emplace_back(worker, t);
    for (auto& th : ts) th.join();
  }
  ph.seconds = seconds_since(t0);
  for (const auto& loc : locals) {
    for (std::size_t c = 0; c < kOpClasses; ++c) add(ph.classes[c], loc.classes[c]);
  }
  return ph;
}

}  // namespace

MetricsReport run(const WorkloadSpec& spec) {
  spec.validate();
  MetricsReport rep;
  rep.spec = spec;

  std::optional<TempFile> tmp;
  if (spec.pool_path.empty()) tmp.emplace("run");
  const auto path = spec.pool_path.empty() ? tmp->path() : spec.pool_path;
  auto pool = PersistentPool::create(path, spec.pool_bytes ? spec.pool_bytes : pool_size_for(spec));
  auto table = AnyTable::create(spec.table, pool, spec.buckets_per_segment, spec.stash_buckets, spec.key_mode);

  const bool single = spec.threads == 1;
  std::uint64_t ops_done = 0;
  std::uint64_t last_growth_signal = 0;
  std::uint64_t last_segments = table.segments();
  rep.growth.push_back({0, 0.0, last_segments});
  auto sample = [&] {
    const double lf = table.load_factor();
    rep.timeline.push_back({ops_done, lf, table.segments()});
    rep.peak_load_factor = std::max(rep.peak_load_factor, lf);
  };
  auto track_growth = [&](OpClass cls) {
    if (!single || cls != OpClass::insert) return;
    const auto st = table.stats();
    const auto signal = st.splits + st.next_advances;
    if (signal == last_growth_signal) return;
    last_growth_signal = signal;
    const auto segs = table.segments();
    if (segs != last_segments) {
      rep.growth.push_back({ops_done, 0.0, segs});
      last_segments = segs;
    }
  };

  // Preload: fresh keys 0..preload-1, inserted in index order.
  auto preload = run_phase(
      "preload", spec, table, pool, spec.preload,
      [](std::uint64_t j) { return OpPlan{OpClass::insert, j}; },
      [&](std::uint64_t, const OpPlan& op, bool) {
        ++ops_done;
        track_growth(op.cls);
      });
  rep.phases.push_back(preload);
  table.quiesce();
  sample();

  // Main phase. Deleted preload indices are tracked for exact verdicts in
  // single-threaded runs.
  const Planner planner(spec);
  std::vector<std::uint8_t> deleted(single ? spec.preload : 0, 0);
  std::array<std::uint64_t, kOpClasses> expected_hits{};
  const std::uint64_t every = spec.sample_every ? spec.sample_every : std::max<std::uint64_t>(1, spec.ops / 64);
  auto main = run_phase(
      "run", spec, table, pool, spec.ops, [&](std::uint64_t j) { return planner.plan(j); },
      [&](std::uint64_t j, const OpPlan& op, bool) {
        if (!single) return;
        ++ops_done;
        switch (op.cls) {
          case OpClass::insert: ++expected_hits[0]; break;
          case OpClass::pos_search: expected_hits[1] += deleted[op.index] ? 0 : 1; break;
          case OpClass::neg_search: break;
          case OpClass::remove:
            expected_hits[3] += deleted[op.index] ? 0 : 1;
            deleted[op.index] = 1;
            break;
        }
        track_growth(op.cls);
        if ((j + 1) % every == 0) sample();
      });
  rep.phases.push_back(main);
  if (!single) ops_done += spec.ops;
  table.quiesce();
  sample();
  rep.stats = table.stats();

  // Verdicts.
  const auto& pc = preload.classes[0];
  if (pc.hits != pc.ops) {
    rep.failures.push_back(fmt::format("preload: {} of {} inserts reported a duplicate", pc.ops - pc.hits, pc.ops));
  }
  const auto& mc = main.classes;
  const bool deletes = mc[3].ops > 0;
  if (mc[0].hits != mc[0].ops) {
    rep.failures.push_back(fmt::format("run: {} fresh inserts reported a duplicate", mc[0].ops - mc[0].hits));
  }
  if (mc[2].hits != 0) rep.failures.push_back(fmt::format("run: {} negative searches found a key", mc[2].hits));
  if (single || !deletes) {
    const auto want = single ? expected_hits[1] : mc[1].ops;
    if (mc[1].hits != want) {
      rep.failures.push_back(fmt::format("run: positive searches found {} keys, expected {}", mc[1].hits, want));
    }
  }
  if (single && mc[3].hits != expected_hits[3]) {
    rep.failures.push_back(fmt::format("run: deletes removed {} keys, expected {}", mc[3].hits, expected_hits[3]));
  }
  const bool pure_search = mc[0].ops == 0 && mc[3].ops == 0;
  if (pure_search) {
    for (int c : {1, 2}) {
      const auto& p = mc[c].persist;
      if (p.stores != 0 || p.flushes != 0 || p.fences != 0) {
        rep.failures.push_back(fmt::format("run: {} issued {} stores, {} flushes, {} fences",
                                           to_string(static_cast<OpClass>(c)), p.stores, p.flushes, p.fences));
      }
    }
  }
  for (std::size_t i = 1; i < rep.growth.size(); ++i) {
    if (rep.growth[i].segments < rep.growth[i - 1].segments) {
      rep.failures.push_back("capacity shrank during the run");
      break;
    }
  }
  return rep;
}

// ---- load factor ------------------------------------------------------------------

const char* to_string(Features f) {
  switch (f) {
    case Features::bucketized: return "bucketized";
    case Features::probing: return "+probing";
    case Features::balanced: return "+balanced";
    case Features::stash: return "+stash";
  }
  return "?";
}

InsertPolicy policy_for(Features f) {
  switch (f) {
    case Features::bucketized: return InsertPolicy::bucketized();
    case Features::probing: return {true, false, false, false};
    case Features::balanced: return {true, true, true, false};
    case Features::stash: return {true, true, true, true};
  }
  return {};
}

std::vector<SegmentFill> fill_segments(const std::vector<std::size_t>& segment_bytes,
                                       const std::vector<Features>& features, int trials,
                                       std::uint64_t seed, int stash_buckets) {
  if (trials < 1) throw std::invalid_argument("trials must be positive");
  std::size_t total = 0;
  for (auto b : segment_bytes) total += b + 8 * bucket_layout::kBucketSize + segment_layout::kHeaderSize + 64;
  total *= features.size() * static_cast<std::size_t>(trials);
  TempFile tmp("fill");
  auto pool = PersistentPool::create(tmp.path(), (16u << 20) + total);

  std::vector<SegmentFill> out;
  for (auto bytes : segment_bytes) {
    if (bytes % bucket_layout::kBucketSize != 0) throw std::invalid_argument("segment size must be a multiple of 256");
    for (auto f : features) {
      Geometry geo;
      geo.K = static_cast<int>(bytes / bucket_layout::kBucketSize);
      geo.S = f == Features::stash ? stash_buckets : 0;
      geo.policy = policy_for(f);
      geo.validate();
      SegmentFill row{f, bytes, geo.K, geo.S, 0.0, 1.0, 0.0, trials};
      double sum = 0;
      for (int t = 0; t < trials; ++t) {
        const auto off = pool.alloc_detached(geo.segment_bytes(), [](PoolOffset) {});
        const Segment seg(pool, geo, off);
        seg.init({0, segment_layout::kStateNormal, pool.global_version()}, kNullOffset, 0);
        const KeyStream keys(seed + static_cast<std::uint64_t>(t) * 7919);
        std::uint64_t n = 0;
        for (;; ++n) {
          const auto k = keys.positive(n);
          const KeyMatcher km(pool, KeyMode::inline8, k);
          const auto r = seg.insert(hash_word(k), km, [k] { return k; }, n, [] { return true; });
          if (r.code == InsertResult::full) break;
          if (r.code != InsertResult::inserted) throw std::logic_error("unexpected duplicate in fill");
        }
        const double lf = static_cast<double>(n) / static_cast<double>((geo.K + geo.S) * bucket_layout::kSlots);
        sum += lf;
        row.min_peak = std::min(row.min_peak, lf);
        row.max_peak = std::max(row.max_peak, lf);
      }
      row.mean_peak = sum / trials;
      out.push_back(row);
    }
  }
  return out;
}

TableFill fill_table(TableKind kind, int stash_buckets, std::uint64_t n, std::uint64_t seed) {
  TempFile tmp("table");
  auto pool = PersistentPool::create(tmp.path(), (64u << 20) + n * 160);
  auto table = AnyTable::create(kind, pool, 64, stash_buckets, KeyMode::inline8);
  const KeyStream keys(seed);
  // Capacity only changes when the growth counters move; the load factor
  // just before such an insert is (records - 1) / previous capacity.
  auto capacity = [&](std::uint64_t records) {
    const double lf = table.load_factor();
    return lf > 0 ? static_cast<double>(records) / lf : 0.0;
  };
  double cap = 0;
  {
    table.insert(keys.positive(0), 0);
    cap = capacity(1);
  }
  TableFill out{kind, stash_buckets, n, 0.0};
  auto signal = [&] {
    const auto st = table.stats();
    return st.splits + st.chain_allocations + st.next_advances;
  };
  auto last = signal();
  for (std::uint64_t i = 1; i < n; ++i) {
    table.insert(keys.positive(i), i);
    const auto s = signal();
    if (s != last) {
      out.peak = std::max(out.peak, static_cast<double>(i) / cap);
      last = s;
      cap = capacity(i + 1);
    }
  }
  out.peak = std::max(out.peak, static_cast<double>(n) / cap);
  return out;
}

SweepReport load_factor_sweep(const std::vector<std::size_t>& segment_bytes,
                              const std::vector<Features>& features, int trials, std::uint64_t seed,
                              std::uint64_t table_records) {
  SweepReport rep;
  rep.segments = fill_segments(segment_bytes, features, trials, seed);

  // Peaks must rise strictly with each added technique, at every size. A
  // configuration that already fills every slot can only be matched.
  std::map<std::size_t, std::vector<const SegmentFill*>> by_size;
  for (const auto& r : rep.segments) by_size[r.segment_bytes].push_back(&r);
  for (auto& [bytes, rows] : by_size) {
    std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->features < b->features; });
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const bool saturated = rows[i - 1]->min_peak == 1.0 && rows[i]->min_peak == 1.0;
      if (!saturated && !(rows[i]->mean_peak > rows[i - 1]->mean_peak)) {
        rep.failures.push_back(fmt::format("{} B segment: {} peak {:.3f} is not above {} peak {:.3f}", bytes,
                                           to_string(rows[i]->features), rows[i]->mean_peak,
                                           to_string(rows[i - 1]->features), rows[i - 1]->mean_peak));
      }
    }
  }
  for (const auto& r : rep.segments) {
    if (r.features == Features::bucketized && r.segment_bytes >= (64u << 10) && r.mean_peak > 0.55) {
      rep.failures.push_back(fmt::format("bucketized {} B segment peaks at {:.3f} (> 0.55)", r.segment_bytes, r.mean_peak));
    }
    if (r.features == Features::stash && r.segment_bytes <= (16u << 10) && r.mean_peak < 0.9) {
      rep.failures.push_back(fmt::format("+stash {} B segment peaks at {:.3f} (< 0.90)", r.segment_bytes, r.mean_peak));
    }
  }

  if (table_records > 0) {
    for (int S : {2, 4}) {
      rep.tables.push_back(fill_table(TableKind::eh, S, table_records, seed));
      const double floor = (S == 2 ? 0.75 : 0.85) - 0.05;
      if (rep.tables.back().peak < floor) {
        rep.failures.push_back(fmt::format("eh S={} table peak {:.3f} below {:.2f}", S, rep.tables.back().peak, floor));
      }
    }
    rep.tables.push_back(fill_table(TableKind::lh, 2, table_records, seed));
  }
  return rep;
}

// ---- crash sweeps ------------------------------------------------------------------

const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::bucket_insert: return "bucket_insert";
    case Scenario::displacement: return "displacement";
    case Scenario::segment_split: return "segment_split";
    case Scenario::directory_doubling: return "directory_doubling";
    case Scenario::lh_split: return "lh_split";
  }
  return "?";
}

bool CrashReport::ok() const {
  return std::all_of(scenarios.begin(), scenarios.end(), [](const auto& s) { return s.ok(); });
}

namespace {

namespace cc = crash_check;

EhConfig sweep_eh_config() {
  EhConfig c;
  c.buckets_per_segment = 8;
  c.stash_buckets = 2;
  c.initial_depth = 1;
  return c;
}

LhConfig sweep_lh_config() {
  LhConfig c;
  c.buckets_per_segment = 8;
  c.stash_buckets = 2;
  c.base_segments = 2;
  c.stride = 2;
  return c;
}

using StatsPred = std::function<bool(const TableStats&, const TableStats&)>;

// Index n such that inserting keys 0..n-1 and then key n makes the last
// insert satisfy `pred`.
std::uint64_t find_eh_trigger(const KeyStream& keys, const StatsPred& pred) {
  TempFile tmp("trigger");
  auto pool = PersistentPool::create(tmp.path(), 16u << 20);
  auto t = DashEH::create(pool, sweep_eh_config());
  for (std::uint64_t i = 0; i < 100000; ++i) {
    const auto before = t.stats();
    t.insert(keys.positive(i), i);
    if (pred(before, t.stats())) return i;
  }
  throw std::runtime_error("crash scenario trigger not found");
}

ScenarioResult to_result(Scenario s, TableKind kind, const cc::SweepResult& r) {
  return {s, kind, r.total_ops, r.points, r.matched_before, r.matched_after, r.duplicates_before_recovery, r.errors};
}

ScenarioResult eh_insert_scenario(Scenario s, const KeyStream& keys, const StatsPred& pred,
                                  std::optional<std::uint64_t> limit) {
  const auto n = find_eh_trigger(keys, pred);
  TempFile tmp("sweep");
  auto base = PersistentPool::create(tmp.path(), 4u << 20, PoolMode::crash_sim);
  cc::Model before;
  {
    auto t = DashEH::create(base, sweep_eh_config());
    for (std::uint64_t i = 0; i < n; ++i) {
      t.insert(keys.positive(i), i);
      before[keys.positive(i)] = i;
    }
    t.shutdown();
  }
  auto after = before;
  const auto key = keys.positive(n);
  after[key] = n;
  const auto res = cc::sweep_crash_points<DashEH>(
      base, before, after, [&](DashEH& t) { t.insert(key, n); },
      [](DashEH& t) -> std::string { return t.check_directory() ? "" : "directory invariant broken; "; },
      limit);
  return to_result(s, TableKind::eh, res);
}

ScenarioResult lh_split_scenario(const KeyStream& keys, std::optional<std::uint64_t> limit) {
  TempFile tmp("sweep");
  auto base = PersistentPool::create(tmp.path(), 8u << 20, PoolMode::crash_sim);
  cc::Model before;
  std::uint64_t key = 0;
  {
    auto t = DashLH::create(base, sweep_lh_config());
    for (std::uint64_t i = 0; i < 120; ++i) {
      t.insert(keys.positive(i), i);
      before[keys.positive(i)] = i;
    }
    if (t.stats().splits != 0) throw std::runtime_error("lh scenario split during setup");
    t.advance_next();
    for (std::uint64_t i = 1000;; ++i) {
      if (t.segment_of(keys.positive(i)).first == 0) {
        key = keys.positive(i);
        break;
      }
    }
    t.shutdown();
  }
  auto after = before;
  after[key] = 7;
  std::uint64_t split_images = 0;
  const auto res = cc::sweep_crash_points<DashLH>(
      base, before, after, [key](DashLH& t) { t.insert(key, 7); },
      [&](DashLH& t) -> std::string {
        split_images += t.segment_level(0) == 1 ? 1 : 0;
        return {};
      },
      limit);
  auto out = to_result(Scenario::lh_split, TableKind::lh, res);
  if (!limit && split_images == 0) out.errors.push_back("no recovered image shows the split");
  return out;
}

}  // namespace

CrashReport crash_sweep(const std::vector<Scenario>& scenarios, std::optional<std::uint64_t> max_points,
                        std::uint64_t seed) {
  CrashReport rep;
  const KeyStream keys(seed);
  for (auto s : scenarios) {
    ScenarioResult r;
    switch (s) {
      case Scenario::bucket_insert:
        r = eh_insert_scenario(s, keys,
                               [](const TableStats& b, const TableStats& a) {
                                 return a.displacements == b.displacements && a.stash_inserts == b.stash_inserts &&
                                        a.splits == b.splits;
                               },
                               max_points);
        break;
      case Scenario::displacement:
        r = eh_insert_scenario(
            s, keys,
            [](const TableStats& b, const TableStats& a) {
              return a.displacements > b.displacements && a.splits == b.splits;
            },
            max_points);
        if (!max_points && r.duplicates_before_recovery == 0) {
          r.errors.push_back("no crash image held the displaced record twice");
        }
        break;
      case Scenario::segment_split:
        r = eh_insert_scenario(
            s, keys,
            [](const TableStats& b, const TableStats& a) { return a.splits > b.splits && a.doublings == b.doublings; },
            max_points);
        break;
      case Scenario::directory_doubling:
        r = eh_insert_scenario(
            s, keys, [](const TableStats& b, const TableStats& a) { return a.doublings > b.doublings; }, max_points);
        break;
      case Scenario::lh_split: r = lh_split_scenario(keys, max_points); break;
    }
    // A full enumeration must see both the untouched and the completed state.
    if (!max_points && (r.matched_before == 0 || r.matched_after == 0)) {
      r.errors.push_back(fmt::format("full sweep saw {} before-images and {} after-images", r.matched_before,
                                     r.matched_after));
    }
    rep.scenarios.push_back(std::move(r));
  }
  return rep;
}

// ---- restart work -------------------------------------------------------------------

RecoveryReport recovery_probe(const std::vector<TableKind>& tables, const std::vector<std::uint64_t>& sizes,
                              std::uint64_t seed, std::uint64_t warmup_windows, std::uint64_t window_ops) {
  RecoveryReport rep;
  const KeyStream keys(seed);
  for (auto kind : tables) {
    std::optional<PersistCounters> reference;
    std::uint64_t reference_size = 0;
    for (std::size_t si = 0; si < sizes.size(); ++si) {
      const auto n = sizes[si];
      TempFile tmp("recovery");
      auto pool = PersistentPool::create(tmp.path(), (32u << 20) + n * 160, PoolMode::crash_sim);
      auto live = AnyTable::create(kind, pool, 64, 2, KeyMode::inline8);
      for (std::uint64_t i = 0; i < n; ++i) live.insert(keys.positive(i), i);
      auto crashed = pool.crash();
      live.shutdown();
      auto cleaned = pool.crash();

      for (bool clean : {false, true}) {
        auto& img = clean ? cleaned : crashed;
        img.reset_counters();
        const auto t0 = Clock::now();
        auto t = AnyTable::open(kind, img);
        const double ms = seconds_since(t0) * 1e3;
        RecoveryRow row{kind, n, clean, img.counters(), ms};
        rep.rows.push_back(row);
        if (t.search(keys.positive(0)) != std::optional<std::uint64_t>(0)) {
          rep.failures.push_back(fmt::format("{} {} records: first search after restart failed", to_string(kind), n));
        }
        if (clean && (row.pre_serve.bytes_stored != 1 || row.pre_serve.stores != 1)) {
          rep.failures.push_back(fmt::format("{} {} records: clean restart stored {} bytes in {} stores",
                                             to_string(kind), n, row.pre_serve.bytes_stored, row.pre_serve.stores));
        }
        if (!clean) {
          if (!reference) {
            reference = row.pre_serve;
            reference_size = n;
          } else if (!(row.pre_serve == *reference)) {
            rep.failures.push_back(fmt::format("{}: crash restart work at {} records differs from {} records",
                                               to_string(kind), n, reference_size));
          }
        }
        // Post-restart search throughput for the largest crashed table.
        if (!clean && si + 1 == sizes.size() && warmup_windows > 0 && n > 0) {
          std::uint64_t j = 0;
          for (std::uint64_t w = 0; w < warmup_windows; ++w) {
            const auto w0 = Clock::now();
            for (std::uint64_t i = 0; i < window_ops; ++i, ++j) {
              const auto idx = fmix(j ^ seed) % n;
              if (t.search(keys.positive(idx)) != std::optional<std::uint64_t>(idx)) {
                rep.failures.push_back(fmt::format("{}: key {} lost after restart", to_string(kind), idx));
                break;
              }
            }
            const double s = seconds_since(w0);
            rep.warmup.push_back({kind, w, s > 0 ? static_cast<double>(window_ops) / s : 0.0,
                                  t.stats().segments_recovered});
          }
        }
      }
    }
  }
  return rep;
}

// ---- output ---------------------------------------------------------------------------

void print(std::ostream& os, const MetricsReport& r) {
  const auto& s = r.spec;
  os << fmt::format("table={} preload={} ops={} mix={} threads={} seed={} keys={}\n", to_string(s.table), s.preload,
                    s.ops, s.mix.describe(), s.threads, s.seed,
                    s.key_mode == KeyMode::inline8 ? "inline8" : fmt::format("variable({})", s.key_len));
  for (const auto& ph : r.phases) {
    os << fmt::format("[{}] {} ops in {:.3f} s, {:.0f} ops/s\n", ph.name, ph.ops, ph.seconds, ph.ops_per_sec());
    for (std::size_t c = 0; c < kOpClasses; ++c) {
      const auto& m = ph.classes[c];
      if (m.ops == 0) continue;
      const double n = static_cast<double>(m.ops);
      os << fmt::format(
          "  {:<10} ops={:<9} hits={:<9} stores/op={:.3f} flushes/op={:.3f} fences/op={:.3f} "
          "cmp/op={:.4f} keyloads/op={:.4f} stash/op={:.4f}\n",
          to_string(static_cast<OpClass>(c)), m.ops, m.hits, m.persist.stores / n, m.persist.flushes / n,
          m.persist.fences / n, m.probes.key_compares / n, m.probes.key_loads / n, m.probes.stash_probes / n);
    }
  }
  os << fmt::format("load factor: final {:.3f}, peak sampled {:.3f}; segments {}; splits {} doublings {} "
                    "displacements {} stash inserts {} chain buckets {}\n",
                    r.timeline.empty() ? 0.0 : r.timeline.back().load_factor, r.peak_load_factor,
                    r.timeline.empty() ? 0 : r.timeline.back().segments, r.stats.splits, r.stats.doublings,
                    r.stats.displacements, r.stats.stash_inserts, r.stats.chain_allocations);
  if (r.growth.size() > 1) os << fmt::format("capacity growth events: {}\n", r.growth.size() - 1);
  for (const auto& f : r.failures) os << "FAIL: " << f << '\n';
  os << (r.ok() ? "verdict: PASS\n" : "verdict: FAIL\n");
}

void print(std::ostream& os, const SweepReport& r) {
  os << "single-segment peak load factor (mean over trials)\n";
  os << fmt::format("  {:>8}", "segment");
  std::vector<Features> feats;
  for (const auto& s : r.segments) {
    if (std::find(feats.begin(), feats.end(), s.features) == feats.end()) feats.push_back(s.features);
  }
  for (auto f : feats) os << fmt::format(" {:>11}", to_string(f));
  os << '\n';
  std::map<std::size_t, std::map<Features, double>> grid;
  for (const auto& s : r.segments) grid[s.segment_bytes][s.features] = s.mean_peak;
  for (const auto& [bytes, row] : grid) {
    os << fmt::format("  {:>6}KB", bytes / 1024.0);
    for (auto f : feats) os << fmt::format(" {:>11.3f}", row.at(f));
    os << '\n';
  }
  for (const auto& t : r.tables) {
    os << fmt::format("table {} S={}: peak load factor {:.3f} over {} inserts\n", to_string(t.table), t.S, t.peak,
                      t.inserted);
  }
  for (const auto& f : r.failures) os << "FAIL: " << f << '\n';
  os << (r.ok() ? "verdict: PASS\n" : "verdict: FAIL\n");
}

void print(std::ostream& os, const CrashReport& r) {
  for (const auto& s : r.scenarios) {
    os << fmt::format("{:<19} {} ops={:<4} points={:<4} before={:<4} after={:<4} dup-images={:<3} {}\n",
                      to_string(s.scenario), to_string(s.table), s.total_ops, s.points, s.matched_before,
                      s.matched_after, s.duplicates_before_recovery, s.ok() ? "PASS" : "FAIL");
    const std::size_t shown = std::min<std::size_t>(s.errors.size(), 5);
    for (std::size_t i = 0; i < shown; ++i) os << "  " << s.errors[i] << '\n';
    if (s.errors.size() > shown) os << fmt::format("  ... {} more\n", s.errors.size() - shown);
  }
  os << (r.ok() ? "verdict: PASS\n" : "verdict: FAIL\n");
}

void print(std::ostream& os, const RecoveryReport& r) {
  for (const auto& row : r.rows) {
    os << fmt::format("{} records={:<8} {:<5} stores={} bytes={} flushes={} fences={} open={:.3f} ms\n",
                      to_string(row.table), row.records, row.clean ? "clean" : "crash", row.pre_serve.stores,
                      row.pre_serve.bytes_stored, row.pre_serve.flushes, row.pre_serve.fences, row.open_ms);
  }
  for (const auto& w : r.warmup) {
    os << fmt::format("{} warmup window {:<3} {:>10.0f} ops/s  segments recovered {}\n", to_string(w.table),
                      w.window, w.ops_per_sec, w.segments_recovered);
  }
  for (const auto& f : r.failures) os << "FAIL: " << f << '\n';
  os << (r.ok() ? "verdict: PASS\n" : "verdict: FAIL\n");
}

void write_csv(std::ostream& os, const MetricsReport& r) {
  os << "row,phase,op_class,ops,hits,seconds,ops_per_sec,stores,bytes_stored,flushes,fences,key_compares,"
        "key_loads,stash_probes,chain_probes,load_factor,segments\n";
  for (const auto& ph : r.phases) {
    ClassMetrics all;
    for (std::size_t c = 0; c < kOpClasses; ++c) {
      const auto& m = ph.classes[c];
      add(all, m);
      if (m.ops == 0) continue;
      os << fmt::format("class,{},{},{},{},{:.6f},{:.1f},{},{},{},{},{},{},{},{},,\n", ph.name,
                        to_string(static_cast<OpClass>(c)), m.ops, m.hits, ph.seconds, ph.ops_per_sec(),
                        m.persist.stores, m.persist.bytes_stored, m.persist.flushes, m.persist.fences,
                        m.probes.key_compares, m.probes.key_loads, m.probes.stash_probes, m.probes.chain_probes);
    }
    os << fmt::format("phase,{},all,{},{},{:.6f},{:.1f},{},{},{},{},{},{},{},{},,\n", ph.name, all.ops, all.hits,
                      ph.seconds, ph.ops_per_sec(), all.persist.stores, all.persist.bytes_stored, all.persist.flushes,
                      all.persist.fences, all.probes.key_compares, all.probes.key_loads, all.probes.stash_probes,
                      all.probes.chain_probes);
  }
  for (const auto& s : r.timeline) {
    os << fmt::format("sample,,,{},,,,,,,,,,,,{:.6f},{}\n", s.ops_done, s.load_factor, s.segments);
  }
  for (const auto& g : r.growth) os << fmt::format("growth,,,{},,,,,,,,,,,,,{}\n", g.ops_done, g.segments);
}

void write_csv(std::ostream& os, const SweepReport& r) {
  os << "row,config,segment_bytes,K,S,trials_or_records,peak,min_peak,max_peak\n";
  for (const auto& s : r.segments) {
    os << fmt::format("segment,{},{},{},{},{},{:.6f},{:.6f},{:.6f}\n", to_string(s.features), s.segment_bytes, s.K,
                      s.S, s.trials, s.mean_peak, s.min_peak, s.max_peak);
  }
  for (const auto& t : r.tables) {
    os << fmt::format("table,{},{},64,{},{},{:.6f},,\n", to_string(t.table), 64 * bucket_layout::kBucketSize, t.S,
                      t.inserted, t.peak);
  }
}

void write_csv(std::ostream& os, const CrashReport& r) {
  os << "scenario,table,total_ops,points,matched_before,matched_after,duplicates_before_recovery,errors,verdict\n";
  for (const auto& s : r.scenarios) {
    os << fmt::format("{},{},{},{},{},{},{},{},{}\n", to_string(s.scenario), to_string(s.table), s.total_ops,
                      s.points, s.matched_before, s.matched_after, s.duplicates_before_recovery, s.errors.size(),
                      s.ok() ? "pass" : "fail");
  }
}

void write_csv(std::ostream& os, const RecoveryReport& r) {
  os << "row,table,records,clean,stores,bytes_stored,flushes,fences,open_ms,window,ops_per_sec,segments_recovered\n";
  for (const auto& row : r.rows) {
    os << fmt::format("restart,{},{},{},{},{},{},{},{:.4f},,,\n", to_string(row.table), row.records,
                      row.clean ? 1 : 0, row.pre_serve.stores, row.pre_serve.bytes_stored, row.pre_serve.flushes,
                      row.pre_serve.fences, row.open_ms);
  }
  for (const auto& w : r.warmup) {
    os << fmt::format("warmup,{},,,,,,,,{},{:.1f},{}\n", to_string(w.table), w.window, w.ops_per_sec,
                      w.segments_recovered);
  }
}

}  // namespace dash::bench
