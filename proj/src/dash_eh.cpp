#include "dash/dash_eh.hpp"

#include <mutex>
#include <set>
#include <stdexcept>
#include <thread>

namespace dash {

namespace rl = root_layout;
namespace sl = segment_layout;

namespace {
constexpr PoolOffset kDirEntriesOff = 64;
constexpr std::size_t kRecoveryStripes = 64;

std::size_t directory_bytes(int depth) { return kDirEntriesOff + (std::size_t{8} << depth); }
}  // namespace

struct DashEH::Impl {
  PersistentPool& pool;
  PoolOffset root;
  Geometry geo;
  std::uint8_t V = 0;
  detail::AtomicStats st;
  std::mutex dir_mu;
  std::array<std::mutex, kRecoveryStripes> recovery_mu;
  EpochManager epochs;

  Impl(PersistentPool& p, PoolOffset r, const Geometry& g)
      : pool(p), root(r), geo(g),
        epochs([this](std::uint64_t handle, std::uint32_t) { pool.release_retired(handle); }) {}

  [[nodiscard]] PoolOffset dir() const { return pool.load<std::uint64_t>(root + rl::kDirectoryOff); }
  [[nodiscard]] int depth_of(PoolOffset d) const {
    return static_cast<int>(pool.load<std::uint64_t>(d));
  }
  static PoolOffset entry_slot(PoolOffset d, std::uint64_t i) { return d + kDirEntriesOff + 8 * i; }
  [[nodiscard]] PoolOffset entry(PoolOffset d, std::uint64_t i) const {
    return pool.load<std::uint64_t>(entry_slot(d, i));
  }
  [[nodiscard]] PoolOffset locate(Hash h) const {
    const auto d = dir();
    return entry(d, h >> (64 - depth_of(d)));
  }
  [[nodiscard]] Segment seg(PoolOffset off) const { return Segment(pool, geo, off); }

  [[nodiscard]] std::vector<PoolOffset> segments() const {
    const auto d = dir();
    const std::uint64_t n = std::uint64_t{1} << depth_of(d);
    std::vector<PoolOffset> out;
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto e = entry(d, i);
      if (out.empty() || out.back() != e) out.push_back(e);
    }
    return out;
  }

  // Returns true if the segment had to be recovered first.
  bool ensure_recovered(PoolOffset off) {
    if (seg(off).header().version == V) return false;
    recover_segment(off);
    return true;
  }

  void double_directory() {
    const auto old = dir();
    const int G = depth_of(old);
    const std::uint64_t n = std::uint64_t{1} << G;
    std::vector<std::uint64_t> entries(2 * n);
    for (std::uint64_t i = 0; i < n; ++i) entries[2 * i] = entries[2 * i + 1] = entry(old, i);
    const auto bytes = directory_bytes(G + 1);
    pool.alloc_into(
        bytes, root + rl::kDirectoryOff,
        [&](PoolOffset nd) {
          pool.store_atomic<std::uint64_t>(nd, static_cast<std::uint64_t>(G + 1));
          pool.store(nd + kDirEntriesOff, std::as_bytes(std::span(entries)));
          pool.persist(nd, bytes);
        },
        /*retire_previous=*/true);
    epochs.retire(old, detail::kTagDirectory);
    st.doublings.fetch_add(1, std::memory_order_relaxed);
  }

  // Final split step: N becomes NORMAL, its entries are installed and S
  // takes the new depth. Idempotent; entries are only moved off S.
  void apply_redo(PoolOffset s_off) {
    const auto S = seg(s_off);
    const auto rw = pool.load<std::uint64_t>(S.field(sl::kRedoWordOff));
    const int d = static_cast<int>((rw >> 8) & 0xFF);
    const auto np = pool.load<std::uint64_t>(S.field(sl::kRedoPrefixOff));
    const auto n_off = S.side_link();
    const auto N = seg(n_off);

    auto nh = N.header();
    if (nh.state != sl::kStateNormal) {
      nh.state = sl::kStateNormal;
      N.store_header(nh);
    }
    const auto D = dir();
    const int G = depth_of(D);
    const std::uint64_t start = np << (G - d);
    const std::uint64_t count = std::uint64_t{1} << (G - d);
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto slot = entry_slot(D, start + i);
      if (pool.load<std::uint64_t>(slot) == s_off) pool.store_atomic<std::uint64_t>(slot, n_off);
    }
    pool.persist(entry_slot(D, start), count * 8);
    pool.store_atomic<std::uint64_t>(S.field(sl::kPrefixOff), np - 1);
    auto sh = S.header();
    sh.depth = static_cast<std::uint8_t>(d);
    sh.state = sl::kStateNormal;
    S.store_header(sh);
  }

  // Doubles if needed, then writes, applies and clears the redo record.
  void install_split(PoolOffset s_off, int L) {
    const auto S = seg(s_off);
    std::lock_guard lk(dir_mu);
    if (depth_of(dir()) == L) double_directory();
    const auto np = 2 * S.prefix() + 1;
    pool.store_atomic<std::uint64_t>(S.field(sl::kRedoPrefixOff), np);
    pool.store_atomic<std::uint64_t>(S.field(sl::kRedoWordOff),
                                     1 | static_cast<std::uint64_t>(L + 1) << 8);
    pool.persist(S.field(sl::kRedoWordOff), 16);
    apply_redo(s_off);
    pool.store_atomic<std::uint64_t>(S.field(sl::kRedoWordOff), 0);
    pool.persist(S.field(sl::kRedoWordOff), 8);
  }

  static std::function<bool(Hash)> upper_half(int L) {
    return [L](Hash h) { return ((h >> (63 - L)) & 1) != 0; };
  }

  void split(PoolOffset s_off, int observed_depth) {
    const auto S = seg(s_off);
    LockSet locks(pool);
    S.lock_all(locks);
    auto hdr = S.header();
    if (hdr.state != sl::kStateNormal || hdr.depth != observed_depth) return;
    const int L = hdr.depth;
    if (L >= 62) throw std::runtime_error("segment depth limit reached");

    hdr.state = sl::kStateSplitting;
    S.store_header(hdr);
    const auto old_side = S.side_link();
    const auto np = 2 * S.prefix() + 1;
    const auto n_off = pool.alloc_into(geo.segment_bytes(), S.field(sl::kSideLinkOff),
                                       [&](PoolOffset n) {
                                         seg(n).init({static_cast<std::uint8_t>(L + 1),
                                                      sl::kStateNew, V},
                                                     old_side, np);
                                       });
    const auto N = seg(n_off);
    S.rehash_into(N, upper_half(L), false);
    S.rebuild_overflow();
    N.rebuild_overflow();
    install_split(s_off, L);
    st.splits.fetch_add(1, std::memory_order_relaxed);
  }

  void recover_segment(PoolOffset off) {
    std::lock_guard lk(recovery_mu[(off >> 6) % kRecoveryStripes]);
    const auto S = seg(off);
    auto hdr = S.header();
    if (hdr.version == V) return;
    S.recover_local();

    if ((pool.load<std::uint64_t>(S.field(sl::kRedoWordOff)) & 1) != 0) {
      std::lock_guard dl(dir_mu);
      apply_redo(off);
      pool.store_atomic<std::uint64_t>(S.field(sl::kRedoWordOff), 0);
      pool.persist(S.field(sl::kRedoWordOff), 8);
    } else if (hdr.state == sl::kStateSplitting) {
      const auto side = S.side_link();
      if (side != kNullOffset && seg(side).header().state == sl::kStateNew) {
        const auto N = seg(side);
        N.recover_local();
        S.rehash_into(N, upper_half(hdr.depth), true);
        S.rebuild_overflow();
        N.rebuild_overflow();
        install_split(off, hdr.depth);
      } else {
        hdr.state = sl::kStateNormal;
        S.store_header(hdr);
      }
    }
    hdr = S.header();
    hdr.version = V;
    S.store_header(hdr);
    st.segments_recovered.fetch_add(1, std::memory_order_relaxed);
  }
};

DashEH::DashEH(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
DashEH::DashEH(DashEH&&) noexcept = default;
DashEH& DashEH::operator=(DashEH&&) noexcept = default;
DashEH::~DashEH() = default;

DashEH DashEH::create(PersistentPool& pool, const EhConfig& cfg) {
  Geometry geo{cfg.buckets_per_segment, cfg.stash_buckets, cfg.key_mode, cfg.policy, false};
  geo.validate();
  if (cfg.initial_depth < 1 || cfg.initial_depth > 20) {
    throw std::invalid_argument("initial depth must be in [1, 20]");
  }
  if (pool.root_handle() != kNullOffset) throw std::invalid_argument("pool already has a root");

  const auto root = pool.alloc_into(rl::kRootSize, PersistentPool::root_handle_slot(),
                                    [&](PoolOffset r) {
                                      pool.store_atomic<std::uint8_t>(r + rl::kKindOff, rl::kKindEH);
                                      pool.store_atomic<std::uint8_t>(
                                          r + rl::kKeyModeOff, static_cast<std::uint8_t>(geo.key_mode));
                                      pool.store_atomic<std::uint16_t>(r + rl::kKOff, geo.K);
                                      pool.store_atomic<std::uint16_t>(r + rl::kSOff, geo.S);
                                      pool.store_atomic<std::uint8_t>(r + rl::kPolicyOff,
                                                                      geo.policy.encode());
                                      pool.persist(r, rl::kRootSize);
                                    });
  auto impl = std::make_unique<Impl>(pool, root, geo);
  impl->V = pool.global_version();
  const int G = cfg.initial_depth;
  const auto d = pool.alloc_into(directory_bytes(G), root + rl::kDirectoryOff, [&](PoolOffset nd) {
    pool.store_atomic<std::uint64_t>(nd, static_cast<std::uint64_t>(G));
    pool.persist(nd, 8);
  });
  const std::uint64_t n = std::uint64_t{1} << G;
  PoolOffset side = kNullOffset;
  for (std::uint64_t i = n; i-- > 0;) {
    side = pool.alloc_into(geo.segment_bytes(), Impl::entry_slot(d, i), [&](PoolOffset s) {
      Segment(pool, impl->geo, s).init({static_cast<std::uint8_t>(G), sl::kStateNormal, impl->V},
                                       side, i);
    });
  }
  pool.store_atomic<std::uint8_t>(root + rl::kReadyOff, 1);
  pool.persist(root + rl::kReadyOff, 1);
  pool.set_clean(false);
  return DashEH(std::move(impl));
}

DashEH DashEH::open(PersistentPool& pool) {
  const auto root = pool.root_handle();
  if (root == kNullOffset || pool.load<std::uint8_t>(root + rl::kKindOff) != rl::kKindEH ||
      pool.load<std::uint8_t>(root + rl::kReadyOff) != 1) {
    throw std::invalid_argument("pool does not hold an extendible Dash table");
  }
  Geometry geo{pool.load<std::uint16_t>(root + rl::kKOff), pool.load<std::uint16_t>(root + rl::kSOff),
               static_cast<KeyMode>(pool.load<std::uint8_t>(root + rl::kKeyModeOff)),
               InsertPolicy::decode(pool.load<std::uint8_t>(root + rl::kPolicyOff)), false};
  auto impl = std::make_unique<Impl>(pool, root, geo);
  auto* raw = impl.get();
  impl->V = detail::restart_pool(pool, [raw] {
    for (auto off : raw->segments()) {
      auto h = raw->seg(off).header();
      h.version = 0;
      raw->seg(off).store_header(h);
    }
  });
  return DashEH(std::move(impl));
}

InsertStatus DashEH::insert(KeyView key, std::uint64_t value) {
  auto& m = *impl_;
  detail::check_key(m.geo.key_mode, key);
  auto guard = m.epochs.enter();
  const auto h = hash_key(key);
  const KeyMatcher km(m.pool, m.geo.key_mode, key);
  while (true) {
    const auto off = m.locate(h);
    if (m.ensure_recovered(off)) continue;
    const auto S = m.seg(off);
    const int depth = S.header().depth;
    const auto r = S.insert(
        h, km, [&] { return detail::key_word_for(m.pool, m.geo.key_mode, key); }, value,
        [&] { return m.locate(h) == off; });
    switch (r.code) {
      case InsertResult::inserted: m.st.count(r.placement); return InsertStatus::inserted;
      case InsertResult::exists: return InsertStatus::exists;
      case InsertResult::stale: break;
      case InsertResult::full: m.split(off, depth); break;
    }
  }
}

std::optional<std::uint64_t> DashEH::search(KeyView key) {
  auto& m = *impl_;
  detail::check_key(m.geo.key_mode, key);
  auto guard = m.epochs.enter();
  const auto h = hash_key(key);
  const KeyMatcher km(m.pool, m.geo.key_mode, key);
  while (true) {
    const auto off = m.locate(h);
    if (m.ensure_recovered(off)) continue;
    std::uint64_t value = 0;
    switch (m.seg(off).search(h, km, value, [&] { return m.locate(h) == off; })) {
      case ReadResult::found: return value;
      case ReadResult::not_found: return std::nullopt;
      case ReadResult::retry:
        m.st.read_retries.fetch_add(1, std::memory_order_relaxed);
        ++probe_stats().retries;
        std::this_thread::yield();
        break;
    }
  }
}

bool DashEH::remove(KeyView key) {
  auto& m = *impl_;
  detail::check_key(m.geo.key_mode, key);
  auto guard = m.epochs.enter();
  const auto h = hash_key(key);
  const KeyMatcher km(m.pool, m.geo.key_mode, key);
  while (true) {
    const auto off = m.locate(h);
    if (m.ensure_recovered(off)) continue;
    switch (m.seg(off).remove(h, km, [&] { return m.locate(h) == off; })) {
      case ReadResult::found: return true;
      case ReadResult::not_found: return false;
      case ReadResult::retry: break;
    }
  }
}

void DashEH::shutdown() {
  impl_->epochs.drain_all();
  impl_->pool.persist_all();
  impl_->pool.set_clean(true);
}

void DashEH::recover_all() {
  auto guard = impl_->epochs.enter();
  for (auto off : impl_->segments()) impl_->ensure_recovered(off);
}

double DashEH::load_factor() const {
  const auto segs = impl_->segments();
  if (segs.empty()) return 0.0;
  std::size_t records = 0;
  for (auto off : segs) records += impl_->seg(off).record_count();
  const auto& g = impl_->geo;
  return static_cast<double>(records) /
         static_cast<double>(segs.size() * static_cast<std::size_t>(g.K + g.S) * bucket_layout::kSlots);
}

std::size_t DashEH::size() const {
  std::size_t n = 0;
  for (auto off : impl_->segments()) n += impl_->seg(off).record_count();
  return n;
}

int DashEH::global_depth() const { return impl_->depth_of(impl_->dir()); }
std::size_t DashEH::segment_count() const { return impl_->segments().size(); }
std::uint8_t DashEH::version() const { return impl_->V; }
const Geometry& DashEH::geometry() const { return impl_->geo; }
TableStats DashEH::stats() const { return impl_->st.snapshot(); }
EpochManager& DashEH::epochs() { return impl_->epochs; }

void DashEH::for_each(const std::function<void(std::uint64_t, std::uint64_t)>& fn) const {
  for (auto off : impl_->segments()) {
    impl_->seg(off).for_each_record([&](const RecordRef& r) {
      const Bucket B(impl_->pool, r.node);
      fn(B.key_word(r.slot), B.value(r.slot));
    });
  }
}

std::vector<PoolOffset> DashEH::owned_blocks() const {
  const auto& m = *impl_;
  std::vector<PoolOffset> out{m.root, m.dir()};
  std::set<PoolOffset> segs;
  for (auto off : m.segments()) {
    segs.insert(off);
    // A split in flight owns its new segment through the side link.
    const auto S = m.seg(off);
    if (S.header().state == sl::kStateSplitting && S.side_link() != kNullOffset &&
        m.seg(S.side_link()).header().state == sl::kStateNew) {
      segs.insert(S.side_link());
    }
  }
  out.insert(out.end(), segs.begin(), segs.end());
  if (m.geo.key_mode == KeyMode::variable) {
    std::set<PoolOffset> keys;
    for_each([&](std::uint64_t kw, std::uint64_t) { keys.insert(kw); });
    out.insert(out.end(), keys.begin(), keys.end());
  }
  return out;
}

std::vector<PoolOffset> DashEH::directory() const {
  const auto d = impl_->dir();
  const std::uint64_t n = std::uint64_t{1} << impl_->depth_of(d);
  std::vector<PoolOffset> out(n);
  for (std::uint64_t i = 0; i < n; ++i) out[i] = impl_->entry(d, i);
  return out;
}

bool DashEH::check_directory() const {
  const auto& m = *impl_;
  const auto d = m.dir();
  const int G = m.depth_of(d);
  const std::uint64_t n = std::uint64_t{1} << G;
  std::set<PoolOffset> seen;
  for (std::uint64_t i = 0; i < n;) {
    const auto off = m.entry(d, i);
    const auto h = m.seg(off).header();
    if (h.depth > G || !seen.insert(off).second) return false;
    const std::uint64_t chunk = std::uint64_t{1} << (G - h.depth);
    if (i % chunk != 0 || m.seg(off).prefix() != (i >> (G - h.depth))) return false;
    for (std::uint64_t j = i; j < i + chunk; ++j) {
      if (m.entry(d, j) != off) return false;
    }
    i += chunk;
  }
  return true;
}

PoolOffset DashEH::segment_of(KeyView key) const { return impl_->locate(hash_key(key)); }

void DashEH::split_for(KeyView key) {
  auto guard = impl_->epochs.enter();
  const auto off = impl_->locate(hash_key(key));
  impl_->ensure_recovered(off);
  impl_->split(off, impl_->seg(off).header().depth);
}

}  // namespace dash
