#include "dash/segment.hpp"

#include <bit>
#include <stdexcept>
#include <unordered_set>

namespace dash {

namespace sl = segment_layout;
namespace bl = bucket_layout;

int Geometry::bucket_bits() const { return std::countr_zero(static_cast<unsigned>(K)); }

void Geometry::validate() const {
  if (K < 4 || K > 1024 || !std::has_single_bit(static_cast<unsigned>(K))) {
    throw std::invalid_argument("bucket count per segment must be a power of two in [4, 1024]");
  }
  if (S < 0 || S > 4) throw std::invalid_argument("stash bucket count must be in [0, 4]");
  if (chain && (S < 1 || !policy.stash)) {
    throw std::invalid_argument("stash chains need at least one stash bucket");
  }
}

// ---- LockSet ----------------------------------------------------------------------

bool LockSet::acquire(int order, PoolOffset bucket) {
  if (holds(bucket)) return true;
  if (order > max_order_) {
    vlock::lock(*pool_, bucket);
  } else if (!vlock::try_lock(*pool_, bucket)) {
    return false;
  }
  held_.push_back(bucket);
  max_order_ = std::max(max_order_, order);
  return true;
}

bool LockSet::holds(PoolOffset bucket) const {
  return std::find(held_.begin(), held_.end(), bucket) != held_.end();
}

void LockSet::release() {
  for (auto it = held_.rbegin(); it != held_.rend(); ++it) vlock::unlock(*pool_, *it);
  held_.clear();
  max_order_ = -1;
}

// ---- header ------------------------------------------------------------------------

SegmentHeader Segment::header() const {
  return SegmentHeader::decode(pool_->load<std::uint64_t>(off_ + sl::kWord0Off));
}

void Segment::store_header(SegmentHeader h) const {
  pool_->store_atomic<std::uint64_t>(off_ + sl::kWord0Off, h.encode());
  pool_->persist(off_ + sl::kWord0Off, 8);
}

PoolOffset Segment::side_link() const { return pool_->load<std::uint64_t>(off_ + sl::kSideLinkOff); }
std::uint64_t Segment::prefix() const { return pool_->load<std::uint64_t>(off_ + sl::kPrefixOff); }
PoolOffset Segment::chain_head() const {
  return pool_->load<std::uint64_t>(off_ + sl::kChainHeadOff);
}

void Segment::init(SegmentHeader h, PoolOffset side_link, std::uint64_t prefix) const {
  pool_->store_atomic<std::uint64_t>(off_ + sl::kSideLinkOff, side_link);
  pool_->store_atomic<std::uint64_t>(off_ + sl::kPrefixOff, prefix);
  pool_->store_atomic<std::uint64_t>(off_ + sl::kWord0Off, h.encode());
  pool_->persist(off_, sl::kHeaderSize);
}

Bucket Segment::bucket(int i) const {
  return Bucket(*pool_, off_ + sl::kHeaderSize + static_cast<PoolOffset>(i) * bl::kBucketSize);
}

int Segment::home_index(Hash h) const { return static_cast<int>((h >> 8) & (geo_->K - 1)); }

std::vector<PoolOffset> Segment::chain_nodes() const {
  std::vector<PoolOffset> out;
  for (PoolOffset n = chain_head(); n != kNullOffset;
       n = pool_->load<std::uint64_t>(n + sl::kChainLinkOff)) {
    out.push_back(n);
  }
  return out;
}

// ---- search -------------------------------------------------------------------------

namespace {

// Stash buckets that may hold a record of home bucket `b` with fingerprint
// `fp`, from the overflow metadata of b and its probing neighbour.
std::uint32_t stash_candidates(const Bucket& b, const Bucket& b1, std::uint8_t fp, int S,
                               bool& scan_all) {
  const auto hw = b.overflow();
  scan_all = false;
  if (!hw.overflow_bit()) return 0;
  if (hw.count() > 0) {
    scan_all = true;
    return (1u << S) - 1;
  }
  std::uint32_t cand = 0;
  for (int i = 0; i < bl::kOverflowSlots; ++i) {
    if ((hw.fp_bitmap() >> i & 1) != 0 && (hw.membership() >> i & 1) == 0 &&
        b.overflow_fp(i) == fp) {
      cand |= 1u << hw.stash_index(i);
    }
  }
  const auto pw = b1.overflow();
  for (int i = 0; i < bl::kOverflowSlots; ++i) {
    if ((pw.fp_bitmap() >> i & 1) != 0 && (pw.membership() >> i & 1) != 0 &&
        b1.overflow_fp(i) == fp) {
      cand |= 1u << pw.stash_index(i);
    }
  }
  return cand & ((1u << S) - 1);
}

}  // namespace

ReadResult Segment::search(Hash h, const KeyMatcher& key, std::uint64_t& value,
                           const Validator& valid) const {
  const auto fp = fingerprint(h);
  const int b = home_index(h);
  const auto B = bucket(b);
  const auto B1 = bucket(next_index(b));
  const auto v0 = B.read_version();
  const auto v1 = B1.read_version();
  if (vlock::is_locked(v0) || vlock::is_locked(v1)) return ReadResult::retry;
  if (!valid()) return ReadResult::retry;

  int slot = B.find(key, fp, Membership::home);
  if (slot >= 0) {
    value = B.value(slot);
    return B.verify(v0) && B1.verify(v1) ? ReadResult::found : ReadResult::retry;
  }
  slot = B1.find(key, fp, Membership::probing);
  if (slot >= 0) {
    value = B1.value(slot);
    return B.verify(v0) && B1.verify(v1) ? ReadResult::found : ReadResult::retry;
  }
  bool scan_all = false;
  const auto cand = stash_candidates(B, B1, fp, geo_->S, scan_all);
  if (!B.verify(v0) || !B1.verify(v1)) return ReadResult::retry;

  auto& st = probe_stats();
  for (int j = 0; j < geo_->S; ++j) {
    if ((cand >> j & 1) == 0) continue;
    ++st.stash_probes;
    const auto SB = bucket(geo_->K + j);
    const auto sv = SB.read_version();
    if (vlock::is_locked(sv)) return ReadResult::retry;
    slot = SB.find(key, fp, Membership::any);
    if (slot >= 0) value = SB.value(slot);
    if (!SB.verify(sv)) return ReadResult::retry;
    if (slot >= 0) return ReadResult::found;
  }
  if (scan_all && geo_->chain) {
    for (PoolOffset n = chain_head(); n != kNullOffset;
         n = pool_->load<std::uint64_t>(n + sl::kChainLinkOff)) {
      ++st.chain_probes;
      const Bucket CB(*pool_, n);
      const auto cv = CB.read_version();
      if (vlock::is_locked(cv)) return ReadResult::retry;
      slot = CB.find(key, fp, Membership::any);
      if (slot >= 0) value = CB.value(slot);
      if (!CB.verify(cv)) return ReadResult::retry;
      if (slot >= 0) return ReadResult::found;
    }
  }
  // Any writer that moves a record of this home bucket out of the stash
  // holds the home bucket's lock.
  return B.verify(v0) ? ReadResult::not_found : ReadResult::retry;
}

// ---- insert ---------------------------------------------------------------------------

bool Segment::insert_chain(LockSet& locks, std::uint64_t key_word, std::uint64_t value,
                           std::uint8_t fp, bool& allocated) const {
  // The caller holds every stash lock, which serializes chain appends.
  const int base = geo_->K + geo_->S;
  PoolOffset link = off_ + sl::kChainHeadOff;
  int pos = 0;
  for (PoolOffset n = pool_->load<std::uint64_t>(link); n != kNullOffset;
       link = n + sl::kChainLinkOff, n = pool_->load<std::uint64_t>(link), ++pos) {
    locks.acquire(base + pos, n);
    const Bucket CB(*pool_, n);
    if (!CB.full()) {
      CB.insert(key_word, value, fp, false);
      return true;
    }
  }
  const auto node = pool_->alloc_into(sl::kChainNodeSize, link, {});
  allocated = true;
  locks.acquire(base + pos, node);
  Bucket(*pool_, node).insert(key_word, value, fp, false);
  return true;
}

InsertResult Segment::insert(Hash h, const KeyMatcher& key, const KeyWordFn& key_word,
                             std::uint64_t value, const Validator& valid) const {
  const auto& pol = geo_->policy;
  const auto fp = fingerprint(h);
  const int b = home_index(h);
  const int b1 = next_index(b);
  const auto B = bucket(b);
  const auto B1 = bucket(b1);

  LockSet locks(*pool_);
  locks.acquire(std::min(b, b1), bucket(std::min(b, b1)).offset());
  locks.acquire(std::max(b, b1), bucket(std::max(b, b1)).offset());
  if (!valid()) return {InsertResult::stale};

  // Uniqueness: the record of home b can only be in b, b+1 or overflow.
  if (B.find(key, fp, Membership::home) >= 0 || B1.find(key, fp, Membership::probing) >= 0) {
    return {InsertResult::exists};
  }
  bool scan_all = false;
  const auto cand = stash_candidates(B, B1, fp, geo_->S, scan_all);
  for (int j = 0; j < geo_->S; ++j) {
    if ((cand >> j & 1) != 0 && bucket(geo_->K + j).find(key, fp, Membership::any) >= 0) {
      return {InsertResult::exists};
    }
  }
  if (scan_all && geo_->chain) {
    for (auto n : chain_nodes()) {
      if (Bucket(*pool_, n).find(key, fp, Membership::any) >= 0) return {InsertResult::exists};
    }
  }

  std::uint64_t kw = 0;
  bool have_kw = false;
  auto word = [&] {
    if (!have_kw) {
      kw = key_word();
      have_kw = true;
    }
    return kw;
  };

  // Balanced insert into the less full of b and b+1; ties go to b.
  if (pol.probing) {
    const Bucket* first = &B;
    const Bucket* second = &B1;
    if (pol.balanced && B1.count() < B.count()) std::swap(first, second);
    for (const Bucket* t : {first, second}) {
      if (!t->full()) {
        t->insert(word(), value, fp, t == &B1);
        return {InsertResult::inserted, false, Placement::bucket};
      }
    }
  } else if (!B.full()) {
    B.insert(word(), value, fp, false);
    return {InsertResult::inserted, false, Placement::bucket};
  }

  if (pol.probing && pol.displacement) {
    // A record of home b+1 moves on to its probing bucket b+2.
    const int b2 = next_index(b1);
    const auto B2 = bucket(b2);
    if (B1.lowest_with_membership(false) >= 0 && locks.acquire(b2, B2.offset()) && !B2.full()) {
      const int slot = B1.lowest_with_membership(false);
      move_record(B1, slot, B2, true);
      B1.insert(word(), value, fp, true);
      return {InsertResult::inserted, false, Placement::displaced};
    }
    // A probing resident of b (home b-1) moves back home.
    const int bm = (b + geo_->K - 1) & (geo_->K - 1);
    const auto Bm = bucket(bm);
    if (B.lowest_with_membership(true) >= 0 && locks.acquire(bm, Bm.offset()) && !Bm.full()) {
      const int slot = B.lowest_with_membership(true);
      move_record(B, slot, Bm, false);
      B.insert(word(), value, fp, false);
      return {InsertResult::inserted, false, Placement::displaced};
    }
  }

  if (pol.stash && geo_->S > 0) {
    for (int j = 0; j < geo_->S; ++j) {
      const auto SB = bucket(geo_->K + j);
      locks.acquire(geo_->K + j, SB.offset());
      if (!SB.full()) {
        SB.insert(word(), value, fp, false);
        set_overflow_meta(B, B1, fp, j);
        return {InsertResult::inserted, false, Placement::stash};
      }
    }
    if (geo_->chain) {
      InsertResult r{InsertResult::inserted, false, Placement::chain};
      const auto w = word();
      insert_chain(locks, w, value, fp, r.chain_allocated);
      set_overflow_meta(B, B1, fp, -1);
      return r;
    }
  }
  return {InsertResult::full};
}

// ---- remove ------------------------------------------------------------------------------

ReadResult Segment::remove(Hash h, const KeyMatcher& key, const Validator& valid) const {
  const auto fp = fingerprint(h);
  const int b = home_index(h);
  const int b1 = next_index(b);
  const auto B = bucket(b);
  const auto B1 = bucket(b1);

  LockSet locks(*pool_);
  locks.acquire(std::min(b, b1), bucket(std::min(b, b1)).offset());
  locks.acquire(std::max(b, b1), bucket(std::max(b, b1)).offset());
  if (!valid()) return ReadResult::retry;

  if (const int s = B.find(key, fp, Membership::home); s >= 0) {
    B.erase(s);
    return ReadResult::found;
  }
  if (const int s = B1.find(key, fp, Membership::probing); s >= 0) {
    B1.erase(s);
    return ReadResult::found;
  }
  bool scan_all = false;
  const auto cand = stash_candidates(B, B1, fp, geo_->S, scan_all);
  for (int j = 0; j < geo_->S; ++j) {
    if ((cand >> j & 1) == 0) continue;
    const auto SB = bucket(geo_->K + j);
    locks.acquire(geo_->K + j, SB.offset());
    if (const int s = SB.find(key, fp, Membership::any); s >= 0) {
      SB.erase(s);
      clear_overflow_meta(B, B1, fp, j);
      return ReadResult::found;
    }
  }
  if (scan_all && geo_->chain) {
    const int base = geo_->K + geo_->S;
    int pos = 0;
    for (auto n : chain_nodes()) {
      locks.acquire(base + pos++, n);
      const Bucket CB(*pool_, n);
      if (const int s = CB.find(key, fp, Membership::any); s >= 0) {
        CB.erase(s);
        clear_overflow_meta(B, B1, fp, -1);
        return ReadResult::found;
      }
    }
  }
  return ReadResult::not_found;
}

// ---- whole-segment helpers ------------------------------------------------------------------

void Segment::lock_all(LockSet& locks) const {
  const int n = geo_->K + geo_->S;
  for (int i = 0; i < n; ++i) locks.acquire(i, bucket(i).offset());
  int pos = 0;
  for (auto node : chain_nodes()) locks.acquire(n + pos++, node);
}

void Segment::for_each_record(const std::function<void(const RecordRef&)>& fn) const {
  const int n = geo_->K + geo_->S;
  for (int i = 0; i < n; ++i) {
    const auto B = bucket(i);
    auto alloc = B.packed().alloc();
    while (alloc != 0) {
      const int s = std::countr_zero(alloc);
      alloc &= alloc - 1;
      fn({i < geo_->K ? Where::normal : Where::stash, i, B.offset(), s});
    }
  }
  int pos = 0;
  for (auto node : chain_nodes()) {
    auto alloc = Bucket(*pool_, node).packed().alloc();
    while (alloc != 0) {
      const int s = std::countr_zero(alloc);
      alloc &= alloc - 1;
      fn({Where::chain, pos, node, s});
    }
    ++pos;
  }
}

std::size_t Segment::record_count() const {
  std::size_t n = 0;
  for (int i = 0; i < geo_->K + geo_->S; ++i) n += static_cast<std::size_t>(bucket(i).count());
  for (auto node : chain_nodes()) n += static_cast<std::size_t>(Bucket(*pool_, node).count());
  return n;
}

bool Segment::place(Hash h, std::uint64_t key_word, std::uint64_t value, std::uint8_t fp) const {
  const int b = home_index(h);
  const auto B = bucket(b);
  const auto B1 = bucket(next_index(b));
  if (!B.full()) {
    B.insert(key_word, value, fp, false);
    return true;
  }
  if (geo_->policy.probing && !B1.full()) {
    B1.insert(key_word, value, fp, true);
    return true;
  }
  if (geo_->policy.stash) {
    for (int j = 0; j < geo_->S; ++j) {
      const auto SB = bucket(geo_->K + j);
      if (!SB.full()) {
        SB.insert(key_word, value, fp, false);
        set_overflow_meta(B, B1, fp, j);
        return true;
      }
    }
  }
  if (!geo_->chain) return false;
  PoolOffset link = off_ + sl::kChainHeadOff;
  for (PoolOffset n = pool_->load<std::uint64_t>(link); n != kNullOffset;
       link = n + sl::kChainLinkOff, n = pool_->load<std::uint64_t>(link)) {
    const Bucket CB(*pool_, n);
    if (!CB.full()) {
      CB.insert(key_word, value, fp, false);
      set_overflow_meta(B, B1, fp, -1);
      return true;
    }
  }
  const auto node = pool_->alloc_into(sl::kChainNodeSize, link, {});
  Bucket(*pool_, node).insert(key_word, value, fp, false);
  set_overflow_meta(B, B1, fp, -1);
  return true;
}

void Segment::rehash_into(const Segment& to, const std::function<bool(Hash)>& moves,
                          bool unique) const {
  const auto mode = geo_->key_mode;
  std::vector<RecordRef> chain_moves;
  for_each_record([&](const RecordRef& r) {
    const Bucket src(*pool_, r.node);
    const auto kw = src.key_word(r.slot);
    const auto h = hash_key_word(*pool_, mode, kw);
    if (!moves(h)) return;
    if (r.where == Where::chain) {
      chain_moves.push_back(r);
      return;
    }
    if (unique && to.contains_key_word(kw, src.fp(r.slot))) {
      src.erase(r.slot);
      return;
    }
    const bool probing = ((src.packed().membership() >> r.slot) & 1) != 0;
    move_record(src, r.slot, to.bucket(r.bucket), probing);
  });
  for (const auto& r : chain_moves) {
    const Bucket src(*pool_, r.node);
    const auto kw = src.key_word(r.slot);
    if (!(unique && to.contains_key_word(kw, src.fp(r.slot)))) {
      to.place(hash_key_word(*pool_, mode, kw), kw, src.value(r.slot), src.fp(r.slot));
    }
    src.erase(r.slot);
  }
}

PoolOffset Segment::compact_chain() const {
  const auto head = chain_head();
  if (head == kNullOffset) return kNullOffset;
  Geometry no_chain = *geo_;
  no_chain.chain = false;
  const Segment self(*pool_, no_chain, off_);
  bool empty = true;
  for (auto node : chain_nodes()) {
    const Bucket CB(*pool_, node);
    auto alloc = CB.packed().alloc();
    while (alloc != 0) {
      const int s = std::countr_zero(alloc);
      alloc &= alloc - 1;
      const auto kw = CB.key_word(s);
      if (self.place(hash_key_word(*pool_, geo_->key_mode, kw), kw, CB.value(s), CB.fp(s))) {
        CB.erase(s);
      } else {
        empty = false;
      }
    }
  }
  if (!empty) return kNullOffset;
  pool_->detach_chain(off_ + sl::kChainHeadOff, sl::kChainLinkOff);
  return head;
}

void Segment::rebuild_overflow() const {
  for (int i = 0; i < geo_->K; ++i) {
    const auto B = bucket(i);
    auto w = B.overflow();
    if (w.fields() != 0) {
      w.clear_fields();
      B.store_overflow(w);
    }
  }
  for_each_record([&](const RecordRef& r) {
    if (r.where == Where::normal) return;
    const Bucket src(*pool_, r.node);
    const auto h = hash_key_word(*pool_, geo_->key_mode, src.key_word(r.slot));
    const int b = home_index(h);
    set_overflow_meta(bucket(b), bucket(next_index(b)), src.fp(r.slot),
                      r.where == Where::stash ? r.bucket - geo_->K : -1);
  });
}

void Segment::recover_local() const {
  for (int i = 0; i < geo_->K + geo_->S; ++i) bucket(i).reset_lock();
  for (auto node : chain_nodes()) Bucket(*pool_, node).reset_lock();

  // Keep the copy in the record's home bucket, then its probing bucket,
  // then stash, then chain.
  std::unordered_set<std::uint64_t> seen;
  auto pass = [&](auto select) {
    for_each_record([&](const RecordRef& r) {
      const Bucket B(*pool_, r.node);
      if (!select(r, B)) return;
      if (!seen.insert(B.key_word(r.slot)).second) B.erase(r.slot);
    });
  };
  pass([](const RecordRef& r, const Bucket& B) {
    return r.where == Where::normal && ((B.packed().membership() >> r.slot) & 1) == 0;
  });
  pass([](const RecordRef& r, const Bucket& B) {
    return r.where == Where::normal && ((B.packed().membership() >> r.slot) & 1) != 0;
  });
  pass([](const RecordRef& r, const Bucket&) { return r.where == Where::stash; });
  pass([](const RecordRef& r, const Bucket&) { return r.where == Where::chain; });
  rebuild_overflow();
}

bool Segment::contains_key_word(std::uint64_t key_word, std::uint8_t fp) const {
  bool found = false;
  for_each_record([&](const RecordRef& r) {
    const Bucket B(*pool_, r.node);
    if (!found && B.fp(r.slot) == fp && B.key_word(r.slot) == key_word) found = true;
  });
  return found;
}

}  // namespace dash
