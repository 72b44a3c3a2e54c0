#include "dash/dash_lh.hpp"

#include <bit>
#include <mutex>
#include <set>
#include <stdexcept>
#include <thread>

namespace dash {

namespace rl = root_layout;
namespace sl = segment_layout;

namespace {
constexpr std::size_t kRecoveryStripes = 64;
constexpr std::size_t kRingPressure = 128;

std::size_t root_bytes(std::uint32_t stride) {
  return rl::kEntriesOff + std::size_t{8} * kLhGroups * stride;
}
}  // namespace

std::uint64_t lh_array_size(std::uint32_t entry, std::uint64_t M, std::uint32_t stride) {
  return M << (entry / stride);
}

std::uint64_t lh_cum_capacity(std::uint32_t entries, std::uint64_t M, std::uint32_t stride) {
  const std::uint32_t g = entries / stride;
  const std::uint64_t full = std::uint64_t{stride} * M * ((std::uint64_t{1} << g) - 1);
  return full + std::uint64_t{entries % stride} * (M << g);
}

LhLocation lh_locate(std::uint64_t seg_index, std::uint64_t M, std::uint32_t stride) {
  // Group g covers [s*M*(2^g - 1), s*M*(2^(g+1) - 1)).
  const std::uint64_t sm = std::uint64_t{stride} * M;
  const int g = std::bit_width(seg_index / sm + 1) - 1;
  const std::uint64_t rel = seg_index - sm * ((std::uint64_t{1} << g) - 1);
  const std::uint64_t per = M << g;
  return {static_cast<std::uint32_t>(g) * stride + static_cast<std::uint32_t>(rel / per), rel % per};
}

std::uint64_t lh_addr(Hash h, std::uint64_t packed, std::uint64_t M, int shift) {
  const auto n = static_cast<std::uint32_t>(packed >> 32);
  const auto next = static_cast<std::uint32_t>(packed);
  const std::uint64_t x = h >> shift;
  std::uint64_t idx = x & ((M << n) - 1);
  if (idx < next) idx = x & ((M << (n + 1)) - 1);
  return idx;
}

struct DashLH::Impl {
  PersistentPool& pool;
  PoolOffset root;
  Geometry geo;
  std::uint64_t M;
  std::uint32_t s;
  int shift;
  int log2m;
  std::uint8_t V = 0;
  detail::AtomicStats st;
  std::mutex array_mu;
  std::array<std::mutex, kRecoveryStripes> recovery_mu;
  EpochManager epochs;

  Impl(PersistentPool& p, PoolOffset r, const Geometry& g, std::uint64_t m, std::uint32_t stride)
      : pool(p), root(r), geo(g), M(m), s(stride), shift(8 + g.bucket_bits()),
        log2m(std::countr_zero(m)),
        epochs([this](std::uint64_t handle, std::uint32_t) { pool.release_retired(handle); }) {}

  [[nodiscard]] std::uint64_t packed() const { return pool.load<std::uint64_t>(root + rl::kPackedOff); }
  [[nodiscard]] Segment seg(PoolOffset off) const { return Segment(pool, geo, off); }
  [[nodiscard]] PoolOffset entry_slot(std::uint32_t e) const { return root + rl::kEntriesOff + 8 * e; }
  [[nodiscard]] PoolOffset array(std::uint32_t e) const { return pool.load<std::uint64_t>(entry_slot(e)); }

  [[nodiscard]] PoolOffset seg_off(std::uint64_t idx) const {
    const auto loc = lh_locate(idx, M, s);
    return array(loc.entry) + loc.offset * geo.segment_bytes();
  }
  [[nodiscard]] int level(std::uint64_t idx) const { return seg(seg_off(idx)).header().depth; }

  // Addresses by segment levels starting from round N, so a reader holding
  // an old N, or a durable N that lags behind finished splits, still lands
  // on the segment that owns the hash.
  [[nodiscard]] std::pair<std::uint64_t, PoolOffset> locate(Hash h) const {
    const auto n = static_cast<int>(packed() >> 32);
    const std::uint64_t x = h >> shift;
    int l = n;
    std::uint64_t j = x & ((M << l) - 1);
    auto off = seg_off(j);
    while (seg(off).header().depth > l) {
      ++l;
      j = x & ((M << l) - 1);
      off = seg_off(j);
    }
    return {j, off};
  }

  [[nodiscard]] std::uint64_t segment_capacity() const {
    std::uint32_t e = 0;
    while (e < kLhGroups * s && array(e) != kNullOffset) ++e;
    return lh_cum_capacity(e, M, s);
  }

  // Every segment that has been initialized: the base segments and every
  // split image (level >= 1).
  template <class F>
  void for_each_segment(F&& fn) const {
    const auto cap = segment_capacity();
    for (std::uint64_t i = 0; i < cap; ++i) {
      const auto off = seg_off(i);
      if (i < M || seg(off).header().depth >= 1) fn(i, off);
    }
  }

  void ensure_array(std::uint64_t idx) {
    const auto loc = lh_locate(idx, M, s);
    if (loc.entry >= kLhGroups * s) throw std::runtime_error("segment directory exhausted");
    if (array(loc.entry) != kNullOffset) return;
    std::lock_guard lk(array_mu);
    if (array(loc.entry) != kNullOffset) return;
    pool.alloc_into(lh_array_size(loc.entry, M, s) * geo.segment_bytes(), entry_slot(loc.entry), {});
  }

  bool ensure_recovered(std::uint64_t idx, PoolOffset off) {
    if (seg(off).header().version == V) return false;
    recover_segment(idx, off);
    return true;
  }

  [[nodiscard]] std::function<bool(Hash)> upper_half(int level) const {
    const int bit = shift + log2m + level;
    return [bit](Hash h) { return ((h >> bit) & 1) != 0; };
  }

  void apply_redo(PoolOffset p_off) {
    const auto P = seg(p_off);
    const auto rw = pool.load<std::uint64_t>(P.field(sl::kRedoWordOff));
    const auto Q = seg(P.side_link());
    auto qh = Q.header();
    if (qh.state != sl::kStateNormal) {
      qh.state = sl::kStateNormal;
      Q.store_header(qh);
    }
    auto ph = P.header();
    ph.depth = static_cast<std::uint8_t>((rw >> 8) & 0xFF);
    ph.state = sl::kStateNormal;
    P.store_header(ph);
  }

  void install_split(PoolOffset p_off, int level) {
    const auto P = seg(p_off);
    pool.store_atomic<std::uint64_t>(P.field(sl::kRedoWordOff),
                                     1 | static_cast<std::uint64_t>(level + 1) << 8);
    pool.persist(P.field(sl::kRedoWordOff), 8);
    apply_redo(p_off);
    pool.store_atomic<std::uint64_t>(P.field(sl::kRedoWordOff), 0);
    pool.persist(P.field(sl::kRedoWordOff), 8);
  }

  // Moves the upper half of P into Q, folds P's chain back into free slots
  // and installs. Returns a detached chain to retire, if any.
  PoolOffset finish_split(const Segment& P, const Segment& Q, int level, bool unique) {
    P.rehash_into(Q, upper_half(level), unique);
    const auto detached = P.compact_chain();
    P.rebuild_overflow();
    Q.rebuild_overflow();
    install_split(P.offset(), level);
    return detached;
  }

  void relieve_retire_ring() {
    if (pool.retired_handles().size() >= kRingPressure) epochs.try_advance_and_drain();
  }

  void split(std::uint64_t p_idx, int level) {
    relieve_retire_ring();
    const std::uint64_t q_idx = p_idx + (M << level);
    ensure_array(q_idx);
    const auto P = seg(seg_off(p_idx));
    PoolOffset detached = kNullOffset;
    {
      LockSet locks(pool);
      P.lock_all(locks);
      auto hdr = P.header();
      if (hdr.state != sl::kStateNormal || hdr.depth != level) return;
      if (shift + log2m + level >= 64) throw std::runtime_error("segment level limit reached");
      const auto q_off = seg_off(q_idx);
      pool.store_atomic<std::uint64_t>(P.field(sl::kSideLinkOff), q_off);
      hdr.state = sl::kStateSplitting;
      P.store_header(hdr);
      const auto Q = seg(q_off);
      Q.init({static_cast<std::uint8_t>(level + 1), sl::kStateNew, V}, kNullOffset, q_idx);
      detached = finish_split(P, Q, level, false);
    }
    if (detached != kNullOffset) epochs.retire(detached, detail::kTagChain);
    st.splits.fetch_add(1, std::memory_order_relaxed);
  }

  // Splits the segment if Next has passed it this round. Returns true if
  // the caller must re-locate.
  bool split_if_behind(std::uint64_t idx, PoolOffset off, std::uint64_t pk) {
    const auto n = static_cast<int>(pk >> 32);
    const auto next = static_cast<std::uint32_t>(pk);
    if (idx >= next || seg(off).header().depth != n) return false;
    split(idx, n);
    return true;
  }

  void advance_next() {
    while (true) {
      auto pk = packed();
      const auto n = static_cast<int>(pk >> 32);
      const auto next = static_cast<std::uint32_t>(pk);
      const std::uint64_t round = M << n;
      ensure_array(round + next);
      std::uint64_t desired;
      if (next + 1 >= round) {
        // Closing the round: every segment must be at level n + 1 before
        // addressing starts from the new round.
        for (std::uint64_t p = 0; p < round; ++p) {
          const auto off = seg_off(p);
          ensure_recovered(p, off);
          if (seg(off).header().depth == n) split(p, n);
        }
        desired = lh_pack(static_cast<std::uint32_t>(n + 1), 0);
      } else {
        desired = lh_pack(static_cast<std::uint32_t>(n), next + 1);
      }
      if (pool.cas_u64(root + rl::kPackedOff, pk, desired)) {
        pool.persist(root + rl::kPackedOff, 8);
        st.next_advances.fetch_add(1, std::memory_order_relaxed);
        return;
      }
    }
  }

  void recover_segment(std::uint64_t idx, PoolOffset off) {
    std::lock_guard lk(recovery_mu[idx % kRecoveryStripes]);
    const auto P = seg(off);
    auto hdr = P.header();
    if (hdr.version == V) return;
    P.recover_local();

    PoolOffset detached = kNullOffset;
    if ((pool.load<std::uint64_t>(P.field(sl::kRedoWordOff)) & 1) != 0) {
      apply_redo(off);
      pool.store_atomic<std::uint64_t>(P.field(sl::kRedoWordOff), 0);
      pool.persist(P.field(sl::kRedoWordOff), 8);
    } else if (hdr.state == sl::kStateSplitting) {
      const auto side = P.side_link();
      if (side != kNullOffset && seg(side).header().state == sl::kStateNew) {
        const auto Q = seg(side);
        Q.recover_local();
        detached = finish_split(P, Q, hdr.depth, true);
      } else {
        hdr.state = sl::kStateNormal;
        P.store_header(hdr);
      }
    }
    hdr = P.header();
    hdr.version = V;
    P.store_header(hdr);
    if (detached != kNullOffset) epochs.retire(detached, detail::kTagChain);
    st.segments_recovered.fetch_add(1, std::memory_order_relaxed);
  }
};

DashLH::DashLH(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
DashLH::DashLH(DashLH&&) noexcept = default;
DashLH& DashLH::operator=(DashLH&&) noexcept = default;
DashLH::~DashLH() = default;

DashLH DashLH::create(PersistentPool& pool, const LhConfig& cfg) {
  Geometry geo{cfg.buckets_per_segment, cfg.stash_buckets, cfg.key_mode, InsertPolicy{}, true};
  geo.validate();
  if (cfg.base_segments == 0 || !std::has_single_bit(cfg.base_segments) ||
      cfg.base_segments > (1u << 20)) {
    throw std::invalid_argument("base segment count must be a power of two up to 2^20");
  }
  if (cfg.stride == 0 || cfg.stride > 16) throw std::invalid_argument("stride must be in [1, 16]");
  if (pool.root_handle() != kNullOffset) throw std::invalid_argument("pool already has a root");

  const auto bytes = root_bytes(cfg.stride);
  const auto root = pool.alloc_into(bytes, PersistentPool::root_handle_slot(), [&](PoolOffset r) {
    pool.store_atomic<std::uint8_t>(r + rl::kKindOff, rl::kKindLH);
    pool.store_atomic<std::uint8_t>(r + rl::kKeyModeOff, static_cast<std::uint8_t>(geo.key_mode));
    pool.store_atomic<std::uint16_t>(r + rl::kKOff, geo.K);
    pool.store_atomic<std::uint16_t>(r + rl::kSOff, geo.S);
    pool.store_atomic<std::uint8_t>(r + rl::kPolicyOff, geo.policy.encode());
    pool.store_atomic<std::uint32_t>(r + rl::kMOff, cfg.base_segments);
    pool.store_atomic<std::uint32_t>(r + rl::kStrideOff, cfg.stride);
    pool.persist(r, bytes);
  });
  auto impl = std::make_unique<Impl>(pool, root, geo, cfg.base_segments, cfg.stride);
  impl->V = pool.global_version();
  const auto seg_bytes = geo.segment_bytes();
  pool.alloc_into(cfg.base_segments * seg_bytes, impl->entry_slot(0), [&](PoolOffset a) {
    for (std::uint64_t i = 0; i < cfg.base_segments; ++i) {
      Segment(pool, impl->geo, a + i * seg_bytes).init({0, sl::kStateNormal, impl->V}, kNullOffset, i);
    }
  });
  pool.store_atomic<std::uint8_t>(root + rl::kReadyOff, 1);
  pool.persist(root + rl::kReadyOff, 1);
  pool.set_clean(false);
  return DashLH(std::move(impl));
}

DashLH DashLH::open(PersistentPool& pool) {
  const auto root = pool.root_handle();
  if (root == kNullOffset || pool.load<std::uint8_t>(root + rl::kKindOff) != rl::kKindLH ||
      pool.load<std::uint8_t>(root + rl::kReadyOff) != 1) {
    throw std::invalid_argument("pool does not hold a linear Dash table");
  }
  Geometry geo{pool.load<std::uint16_t>(root + rl::kKOff), pool.load<std::uint16_t>(root + rl::kSOff),
               static_cast<KeyMode>(pool.load<std::uint8_t>(root + rl::kKeyModeOff)),
               InsertPolicy::decode(pool.load<std::uint8_t>(root + rl::kPolicyOff)), true};
  auto impl = std::make_unique<Impl>(pool, root, geo, pool.load<std::uint32_t>(root + rl::kMOff),
                                     pool.load<std::uint32_t>(root + rl::kStrideOff));
  auto* raw = impl.get();
  impl->V = detail::restart_pool(pool, [raw] {
    const auto cap = raw->segment_capacity();
    for (std::uint64_t i = 0; i < cap; ++i) {
      const auto S = raw->seg(raw->seg_off(i));
      auto h = S.header();
      if (h.version == 0) continue;
      h.version = 0;
      S.store_header(h);
    }
  });
  return DashLH(std::move(impl));
}

InsertStatus DashLH::insert(KeyView key, std::uint64_t value) {
  auto& m = *impl_;
  detail::check_key(m.geo.key_mode, key);
  const auto h = hash_key(key);
  const KeyMatcher km(m.pool, m.geo.key_mode, key);
  InsertResult r;
  {
    auto guard = m.epochs.enter();
    while (true) {
      const auto [idx, off] = m.locate(h);
      if (m.ensure_recovered(idx, off)) continue;
      if (m.split_if_behind(idx, off, m.packed())) continue;
      const auto target = off;
      r = m.seg(off).insert(
          h, km, [&] { return detail::key_word_for(m.pool, m.geo.key_mode, key); }, value,
          [&] { return m.locate(h).second == target; });
      if (r.code == InsertResult::stale) continue;
      if (r.code == InsertResult::full) throw std::logic_error("chained segment reported full");
      m.st.count(r.placement);
      if (r.chain_allocated) {
        m.st.chain_allocations.fetch_add(1, std::memory_order_relaxed);
        m.advance_next();
      }
      break;
    }
  }
  return r.code == InsertResult::inserted ? InsertStatus::inserted : InsertStatus::exists;
}

std::optional<std::uint64_t> DashLH::search(KeyView key) {
  auto& m = *impl_;
  detail::check_key(m.geo.key_mode, key);
  auto guard = m.epochs.enter();
  const auto h = hash_key(key);
  const KeyMatcher km(m.pool, m.geo.key_mode, key);
  while (true) {
    const auto [idx, off] = m.locate(h);
    if (m.ensure_recovered(idx, off)) continue;
    const auto target = off;
    std::uint64_t value = 0;
    switch (m.seg(off).search(h, km, value, [&] { return m.locate(h).second == target; })) {
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

bool DashLH::remove(KeyView key) {
  auto& m = *impl_;
  detail::check_key(m.geo.key_mode, key);
  auto guard = m.epochs.enter();
  const auto h = hash_key(key);
  const KeyMatcher km(m.pool, m.geo.key_mode, key);
  while (true) {
    const auto [idx, off] = m.locate(h);
    if (m.ensure_recovered(idx, off)) continue;
    if (m.split_if_behind(idx, off, m.packed())) continue;
    const auto target = off;
    switch (m.seg(off).remove(h, km, [&] { return m.locate(h).second == target; })) {
      case ReadResult::found: return true;
      case ReadResult::not_found: return false;
      case ReadResult::retry: break;
    }
  }
}

void DashLH::shutdown() {
  impl_->epochs.drain_all();
  impl_->pool.persist_all();
  impl_->pool.set_clean(true);
}

void DashLH::recover_all() {
  auto guard = impl_->epochs.enter();
  std::vector<std::pair<std::uint64_t, PoolOffset>> segs;
  impl_->for_each_segment([&](std::uint64_t i, PoolOffset off) { segs.emplace_back(i, off); });
  for (auto [i, off] : segs) impl_->ensure_recovered(i, off);
}

void DashLH::advance_next() {
  auto guard = impl_->epochs.enter();
  impl_->advance_next();
}

double DashLH::load_factor() const {
  std::size_t records = 0, buckets = 0;
  const auto& g = impl_->geo;
  impl_->for_each_segment([&](std::uint64_t, PoolOffset off) {
    const auto S = impl_->seg(off);
    records += S.record_count();
    buckets += static_cast<std::size_t>(g.K + g.S) + S.chain_nodes().size();
  });
  return buckets == 0 ? 0.0
                      : static_cast<double>(records) / static_cast<double>(buckets * bucket_layout::kSlots);
}

std::size_t DashLH::size() const {
  std::size_t n = 0;
  impl_->for_each_segment([&](std::uint64_t, PoolOffset off) { n += impl_->seg(off).record_count(); });
  return n;
}

std::uint64_t DashLH::packed() const { return impl_->packed(); }

std::uint64_t DashLH::addressable_segments() const {
  const auto pk = impl_->packed();
  return (impl_->M << (pk >> 32)) + static_cast<std::uint32_t>(pk);
}

std::size_t DashLH::chain_buckets() const {
  std::size_t n = 0;
  impl_->for_each_segment(
      [&](std::uint64_t, PoolOffset off) { n += impl_->seg(off).chain_nodes().size(); });
  return n;
}

std::uint8_t DashLH::version() const { return impl_->V; }
const Geometry& DashLH::geometry() const { return impl_->geo; }
TableStats DashLH::stats() const { return impl_->st.snapshot(); }
EpochManager& DashLH::epochs() { return impl_->epochs; }
int DashLH::address_shift() const { return impl_->shift; }
std::uint64_t DashLH::base_segments() const { return impl_->M; }
std::uint32_t DashLH::stride() const { return impl_->s; }

void DashLH::for_each(const std::function<void(std::uint64_t, std::uint64_t)>& fn) const {
  impl_->for_each_segment([&](std::uint64_t, PoolOffset off) {
    impl_->seg(off).for_each_record([&](const RecordRef& r) {
      const Bucket B(impl_->pool, r.node);
      fn(B.key_word(r.slot), B.value(r.slot));
    });
  });
}

std::vector<PoolOffset> DashLH::owned_blocks() const {
  const auto& m = *impl_;
  std::vector<PoolOffset> out{m.root};
  for (std::uint32_t e = 0; e < kLhGroups * m.s && m.array(e) != kNullOffset; ++e) {
    out.push_back(m.array(e));
  }
  const auto cap = m.segment_capacity();
  for (std::uint64_t i = 0; i < cap; ++i) {
    for (auto node : m.seg(m.seg_off(i)).chain_nodes()) out.push_back(node);
  }
  if (m.geo.key_mode == KeyMode::variable) {
    std::set<PoolOffset> keys;
    for_each([&](std::uint64_t kw, std::uint64_t) { keys.insert(kw); });
    out.insert(out.end(), keys.begin(), keys.end());
  }
  return out;
}

std::pair<std::uint64_t, PoolOffset> DashLH::segment_of(KeyView key) const {
  return impl_->locate(hash_key(key));
}

std::uint8_t DashLH::segment_level(std::uint64_t seg_index) const {
  return static_cast<std::uint8_t>(impl_->level(seg_index));
}

void DashLH::split_segment(std::uint64_t seg_index) {
  auto guard = impl_->epochs.enter();
  const auto off = impl_->seg_off(seg_index);
  impl_->ensure_recovered(seg_index, off);
  impl_->split_if_behind(seg_index, off, impl_->packed());
}

}  // namespace dash
