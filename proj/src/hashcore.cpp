#include "dash/hashcore.hpp"

#include <bit>
#include <thread>

namespace dash {

namespace bl = bucket_layout;

namespace {
constexpr std::size_t kHashSeed = 0xc70f6907UL;
}

Hash hash_word(std::uint64_t key) { return std::_Hash_bytes(&key, sizeof key, kHashSeed); }

Hash hash_bytes(std::string_view bytes) {
  return std::_Hash_bytes(bytes.data(), bytes.size(), kHashSeed);
}

Hash hash_key(KeyView key) {
  return key.is_variable() ? hash_bytes(key.bytes()) : hash_word(key.word());
}

ProbeStats& probe_stats() {
  thread_local ProbeStats stats;
  return stats;
}

// ---- packed / overflow words ---------------------------------------------------

int PackedWord::lowest_free() const {
  const auto free = ~alloc() & bl::kAllocMask;
  return free == 0 ? -1 : std::countr_zero(free);
}

PackedWord PackedWord::make(std::uint32_t alloc, std::uint32_t membership) {
  const auto count = static_cast<std::uint32_t>(std::popcount(alloc));
  return {alloc | (membership << bl::kSlots) | (count << 28)};
}

void OverflowWord::set_slot(int i, bool probing_resident, int stash_idx) {
  raw |= std::uint64_t{1} << (16 + i);
  raw &= ~(std::uint64_t{1} << (21 + i));
  if (probing_resident) raw |= std::uint64_t{1} << (21 + i);
  raw &= ~(std::uint64_t{3} << (25 + 2 * i));
  raw |= static_cast<std::uint64_t>(stash_idx & 3) << (25 + 2 * i);
}

void OverflowWord::clear_slot(int i) {
  raw &= ~(std::uint64_t{1} << (16 + i));
  raw &= ~(std::uint64_t{1} << (21 + i));
  raw &= ~(std::uint64_t{3} << (25 + 2 * i));
}

void OverflowWord::set_overflow_bit(bool on) {
  raw &= ~(std::uint64_t{1} << 20);
  if (on) raw |= std::uint64_t{1} << 20;
}

void OverflowWord::set_count(int c) {
  raw &= ~(std::uint64_t{0xFF} << 33);
  raw |= static_cast<std::uint64_t>(c & 0xFF) << 33;
}

// ---- version locks ---------------------------------------------------------------

namespace vlock {

bool try_lock(PersistentPool& pool, PoolOffset word) {
  auto cur = pool.load<std::uint32_t>(word, std::memory_order_relaxed);
  if (is_locked(cur)) return false;
  return pool.cas_u32(word, cur, cur | kLockBit);
}

void lock(PersistentPool& pool, PoolOffset word) {
  while (!try_lock(pool, word)) std::this_thread::yield();
}

void unlock(PersistentPool& pool, PoolOffset word) {
  const auto cur = pool.load<std::uint32_t>(word, std::memory_order_relaxed);
  pool.store_atomic<std::uint32_t>(word, ((cur & kVersionMask) + 1) & kVersionMask,
                                   std::memory_order_release);
}

std::uint32_t read_version(const PersistentPool& pool, PoolOffset word) {
  return pool.load<std::uint32_t>(word, std::memory_order_acquire);
}

bool verify(const PersistentPool& pool, PoolOffset word, std::uint32_t snapshot) {
  std::atomic_thread_fence(std::memory_order_acquire);
  return !is_locked(snapshot) &&
         pool.load<std::uint32_t>(word, std::memory_order_relaxed) == snapshot;
}

}  // namespace vlock

// ---- keys ------------------------------------------------------------------------

PoolOffset write_key_record(PersistentPool& pool, std::string_view bytes) {
  if (bytes.size() > UINT32_MAX) throw std::length_error("key longer than 2^32-1 bytes");
  return pool.alloc_detached(4 + bytes.size(), [&](PoolOffset rec) {
    const auto len = static_cast<std::uint32_t>(bytes.size());
    pool.store_atomic<std::uint32_t>(rec, len);
    pool.store(rec + 4, std::as_bytes(std::span(bytes.data(), bytes.size())));
    pool.persist(rec, 4 + bytes.size());
  });
}

std::string read_key_record(const PersistentPool& pool, PoolOffset record) {
  const auto len = pool.load<std::uint32_t>(record, std::memory_order_relaxed);
  std::string out(len, '\0');
  pool.read(record + 4, std::as_writable_bytes(std::span(out.data(), out.size())));
  return out;
}

KeyMatcher::KeyMatcher(const PersistentPool& pool, KeyMode mode, KeyView key)
    : pool_(&pool), mode_(mode), key_(key) {}

bool KeyMatcher::matches(std::uint64_t key_word) const {
  auto& st = probe_stats();
  ++st.key_compares;
  if (mode_ == KeyMode::inline8) return key_word == key_.word();
  ++st.key_loads;
  const auto want = key_.bytes();
  // Readers may race with slot reuse; a stale word is rejected by the
  // caller's version check, but it must still name a readable record.
  if (key_word < pool_layout::kDataStart || key_word + 4 > pool_->capacity()) return false;
  const auto len = pool_->load<std::uint32_t>(key_word, std::memory_order_relaxed);
  if (len != want.size() || key_word + 4 + len > pool_->capacity()) return false;
  const auto* stored = pool_->image().data() + key_word + 4;
  return std::memcmp(stored, want.data(), len) == 0;
}

Hash hash_key_word(const PersistentPool& pool, KeyMode mode, std::uint64_t key_word) {
  if (mode == KeyMode::inline8) return hash_word(key_word);
  const auto len = pool.load<std::uint32_t>(key_word, std::memory_order_relaxed);
  const auto* p = reinterpret_cast<const char*>(pool.image().data() + key_word + 4);
  return hash_bytes(std::string_view(p, len));
}

// ---- bucket ----------------------------------------------------------------------

PackedWord Bucket::packed() const {
  return {pool_->load<std::uint32_t>(off_ + bl::kPackedOff, std::memory_order_relaxed)};
}

std::uint8_t Bucket::fp(int slot) const {
  return pool_->load<std::uint8_t>(off_ + bl::kFpOff + slot, std::memory_order_relaxed);
}

std::uint64_t Bucket::key_word(int slot) const {
  return pool_->load<std::uint64_t>(off_ + bl::kSlotOff + slot * bl::kSlotSize,
                                    std::memory_order_relaxed);
}

std::uint64_t Bucket::value(int slot) const {
  return pool_->load<std::uint64_t>(off_ + bl::kSlotOff + slot * bl::kSlotSize + 8,
                                    std::memory_order_relaxed);
}

int Bucket::find(const KeyMatcher& key, std::uint8_t want_fp, Membership m) const {
  ++probe_stats().bucket_probes;
  const auto pw = packed();
  auto candidates = pw.alloc();
  if (m == Membership::home) candidates &= ~pw.membership();
  if (m == Membership::probing) candidates &= pw.membership();
  while (candidates != 0) {
    const int i = std::countr_zero(candidates);
    candidates &= candidates - 1;
    if (fp(i) == want_fp && key.matches(key_word(i))) return i;
  }
  return -1;
}

int Bucket::insert(std::uint64_t key_word, std::uint64_t value, std::uint8_t f,
                   bool probing_resident) const {
  const auto pw = packed();
  const int slot = pw.lowest_free();
  if (slot < 0) throw BucketFull();
  const auto slot_off = off_ + bl::kSlotOff + slot * bl::kSlotSize;
  pool_->store_atomic<std::uint64_t>(slot_off, key_word, std::memory_order_relaxed);
  pool_->store_atomic<std::uint64_t>(slot_off + 8, value, std::memory_order_relaxed);
  pool_->persist(slot_off, bl::kSlotSize);
  pool_->store_atomic<std::uint8_t>(off_ + bl::kFpOff + slot, f, std::memory_order_relaxed);
  auto membership = pw.membership();
  if (probing_resident) membership |= 1u << slot;
  const auto next = PackedWord::make(pw.alloc() | (1u << slot), membership);
  pool_->store_atomic<std::uint32_t>(off_ + bl::kPackedOff, next.raw);
  pool_->persist(off_, 32);
  return slot;
}

void Bucket::erase(int slot) const {
  const auto pw = packed();
  const auto bit = 1u << slot;
  const auto next = PackedWord::make(pw.alloc() & ~bit, pw.membership() & ~bit);
  pool_->store_atomic<std::uint32_t>(off_ + bl::kPackedOff, next.raw);
  pool_->persist(off_ + bl::kPackedOff, 4);
}

int Bucket::lowest_with_membership(bool probing_resident) const {
  const auto pw = packed();
  const auto set = probing_resident ? pw.membership() : pw.alloc() & ~pw.membership();
  return set == 0 ? -1 : std::countr_zero(set);
}

OverflowWord Bucket::overflow() const {
  return {pool_->load<std::uint64_t>(off_ + bl::kOverflowWordOff, std::memory_order_relaxed)};
}

void Bucket::store_overflow(OverflowWord w) const {
  // The low 16 bits are fingerprints 16 and 17, owned by store_overflow_fp.
  const auto cur = pool_->load<std::uint64_t>(off_ + bl::kOverflowWordOff, std::memory_order_relaxed);
  pool_->store_atomic<std::uint64_t>(off_ + bl::kOverflowWordOff, (w.raw & ~0xFFFFull) | (cur & 0xFFFF),
                                     std::memory_order_relaxed);
}

std::uint8_t Bucket::overflow_fp(int i) const {
  return pool_->load<std::uint8_t>(off_ + bl::kOverflowFpOff + i, std::memory_order_relaxed);
}

void Bucket::store_overflow_fp(int i, std::uint8_t f) const {
  pool_->store_atomic<std::uint8_t>(off_ + bl::kOverflowFpOff + i, f,
                                    std::memory_order_relaxed);
}

void Bucket::reset_lock() const {
  const auto cur = pool_->load<std::uint32_t>(off_, std::memory_order_relaxed);
  if (vlock::is_locked(cur)) {
    pool_->store_atomic<std::uint32_t>(off_, ((cur & vlock::kVersionMask) + 1) & vlock::kVersionMask);
  }
}

// ---- overflow metadata -------------------------------------------------------------

namespace {

int free_overflow_slot(const OverflowWord& w) {
  const auto free = ~w.fp_bitmap() & 0xF;
  return free == 0 ? -1 : std::countr_zero(free);
}

// Slot in `w` for (fp, stash_idx) with the given residency, or -1.
int match_overflow_slot(const Bucket& b, const OverflowWord& w, std::uint8_t f, int stash_idx,
                        bool probing_resident) {
  for (int i = 0; i < bl::kOverflowSlots; ++i) {
    if ((w.fp_bitmap() >> i & 1) == 0) continue;
    if (((w.membership() >> i & 1) != 0) != probing_resident) continue;
    if (w.stash_index(i) == stash_idx && b.overflow_fp(i) == f) return i;
  }
  return -1;
}

}  // namespace

void refresh_overflow_bit(const Bucket& home, const Bucket& probing) {
  auto hw = home.overflow();
  const auto pw = probing.overflow();
  const bool on = (hw.fp_bitmap() & ~hw.membership()) != 0 ||
                  (pw.fp_bitmap() & pw.membership()) != 0 || hw.count() > 0;
  if (on != hw.overflow_bit()) {
    hw.set_overflow_bit(on);
    home.store_overflow(hw);
  }
}

void set_overflow_meta(const Bucket& home, const Bucket& probing, std::uint8_t f, int stash_idx) {
  auto hw = home.overflow();
  if (stash_idx >= 0) {
    if (const int i = free_overflow_slot(hw); i >= 0) {
      home.store_overflow_fp(i, f);
      hw.set_slot(i, false, stash_idx);
      hw.set_overflow_bit(true);
      home.store_overflow(hw);
      return;
    }
    auto pw = probing.overflow();
    if (const int i = free_overflow_slot(pw); i >= 0 && probing.offset() != home.offset()) {
      probing.store_overflow_fp(i, f);
      pw.set_slot(i, true, stash_idx);
      probing.store_overflow(pw);
      hw.set_overflow_bit(true);
      home.store_overflow(hw);
      return;
    }
  }
  hw.set_count(std::min(hw.count() + 1, 255));
  hw.set_overflow_bit(true);
  home.store_overflow(hw);
}

void clear_overflow_meta(const Bucket& home, const Bucket& probing, std::uint8_t f,
                         int stash_idx) {
  if (stash_idx >= 0) {
    auto hw = home.overflow();
    if (const int i = match_overflow_slot(home, hw, f, stash_idx, false); i >= 0) {
      hw.clear_slot(i);
      home.store_overflow(hw);
      refresh_overflow_bit(home, probing);
      return;
    }
    auto pw = probing.overflow();
    if (const int i = match_overflow_slot(probing, pw, f, stash_idx, true); i >= 0) {
      pw.clear_slot(i);
      probing.store_overflow(pw);
      refresh_overflow_bit(home, probing);
      return;
    }
  }
  auto hw = home.overflow();
  // A saturated counter no longer tracks an exact number; it stays until
  // the segment's metadata is rebuilt.
  if (hw.count() > 0 && hw.count() < 255) hw.set_count(hw.count() - 1);
  home.store_overflow(hw);
  refresh_overflow_bit(home, probing);
}

int move_record(const Bucket& from, int slot, const Bucket& to, bool probing_resident) {
  const int dst = to.insert(from.key_word(slot), from.value(slot), from.fp(slot), probing_resident);
  from.erase(slot);
  return dst;
}

}  // namespace dash
