#pragma once

// Hashing, fingerprints, version locks and the 256-byte bucket shared by the
// extendible and linear table variants.
//
// Bucket layout (little-endian):
//   [0, 4)     version lock: bit 31 lock, bits 0..30 version
//   [4, 8)     packed: alloc bitmap bits 0..13, membership bits 14..27,
//              counter bits 28..31
//   [8, 26)    fingerprints; 0..13 for slots, 14..17 for overflow records
//   [26, 32)   overflow word: fp bitmap (4), overflow bit (1), overflow
//              membership (4), stash index (4 x 2), overflow count (8)
//   [32, 256)  14 record slots of {key_word, value_word}

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "dash/persist.hpp"

namespace dash {

using Hash = std::uint64_t;

enum class KeyMode : std::uint8_t { inline8 = 0, variable = 1 };

/// A lookup key: an 8-byte word in inline mode, a byte string otherwise.
class KeyView {
 public:
  KeyView(std::uint64_t word) : word_(word) {}  // NOLINT(implicit)
  KeyView(std::string_view bytes) : bytes_(bytes), variable_(true) {}  // NOLINT(implicit)

  [[nodiscard]] bool is_variable() const { return variable_; }
  [[nodiscard]] std::uint64_t word() const { return word_; }
  [[nodiscard]] std::string_view bytes() const { return bytes_; }

 private:
  std::uint64_t word_ = 0;
  std::string_view bytes_;
  bool variable_ = false;
};

Hash hash_word(std::uint64_t key);
Hash hash_bytes(std::string_view bytes);
Hash hash_key(KeyView key);

constexpr std::uint8_t fingerprint(Hash h) { return static_cast<std::uint8_t>(h & 0xFF); }

/// Per-thread probe counters. Exact; reset by the caller.
struct ProbeStats {
  std::uint64_t key_compares = 0;
  std::uint64_t key_loads = 0;  // out-of-line key records read
  std::uint64_t bucket_probes = 0;
  std::uint64_t stash_probes = 0;
  std::uint64_t chain_probes = 0;
  std::uint64_t retries = 0;
};
ProbeStats& probe_stats();

namespace bucket_layout {
inline constexpr std::size_t kBucketSize = 256;
inline constexpr int kSlots = 14;
inline constexpr int kOverflowSlots = 4;
inline constexpr PoolOffset kLockOff = 0;
inline constexpr PoolOffset kPackedOff = 4;
inline constexpr PoolOffset kFpOff = 8;
inline constexpr PoolOffset kOverflowFpOff = kFpOff + kSlots;
// The overflow fields live in bytes 26..31 and are accessed through the
// aligned 8-byte word at 24, whose low 16 bits are fingerprints 16 and 17.
inline constexpr PoolOffset kOverflowWordOff = 24;
inline constexpr int kOvfBase = 16;
inline constexpr PoolOffset kSlotOff = 32;
inline constexpr std::size_t kSlotSize = 16;

inline constexpr std::uint32_t kAllocMask = (1u << kSlots) - 1;
}  // namespace bucket_layout

/// Decoded view of the 4-byte packed word.
struct PackedWord {
  std::uint32_t raw = 0;

  [[nodiscard]] std::uint32_t alloc() const { return raw & bucket_layout::kAllocMask; }
  [[nodiscard]] std::uint32_t membership() const {
    return (raw >> bucket_layout::kSlots) & bucket_layout::kAllocMask;
  }
  [[nodiscard]] int counter() const { return static_cast<int>(raw >> 28); }
  [[nodiscard]] bool full() const { return counter() >= bucket_layout::kSlots; }
  [[nodiscard]] int lowest_free() const;

  static PackedWord make(std::uint32_t alloc, std::uint32_t membership);
};

/// Decoded overflow fields of the 8-byte word at bucket offset 24.
struct OverflowWord {
  std::uint64_t raw = 0;

  [[nodiscard]] std::uint32_t fp_bitmap() const { return (raw >> 16) & 0xF; }
  [[nodiscard]] bool overflow_bit() const { return ((raw >> 20) & 1) != 0; }
  [[nodiscard]] std::uint32_t membership() const { return (raw >> 21) & 0xF; }
  [[nodiscard]] int stash_index(int i) const { return static_cast<int>((raw >> (25 + 2 * i)) & 3); }
  [[nodiscard]] int count() const { return static_cast<int>((raw >> 33) & 0xFF); }
  [[nodiscard]] std::uint64_t fields() const { return raw >> 16; }

  void set_slot(int i, bool probing_resident, int stash_idx);
  void clear_slot(int i);
  void set_overflow_bit(bool on);
  void set_count(int c);
  void clear_fields() { raw &= 0xFFFF; }
};

namespace vlock {
inline constexpr std::uint32_t kLockBit = 1u << 31;
inline constexpr std::uint32_t kVersionMask = kLockBit - 1;
constexpr bool is_locked(std::uint32_t word) { return (word & kLockBit) != 0; }

void lock(PersistentPool& pool, PoolOffset word);
bool try_lock(PersistentPool& pool, PoolOffset word);
/// Clears the lock bit and bumps the version in a single store.
void unlock(PersistentPool& pool, PoolOffset word);
std::uint32_t read_version(const PersistentPool& pool, PoolOffset word);
/// True iff `snapshot` was unlocked and the word is unchanged.
bool verify(const PersistentPool& pool, PoolOffset word, std::uint32_t snapshot);
}  // namespace vlock

/// Out-of-line key records (variable-length mode): {u32 length; bytes}.
PoolOffset write_key_record(PersistentPool& pool, std::string_view bytes);
std::string read_key_record(const PersistentPool& pool, PoolOffset record);

/// Full-key comparison against stored key words; counts compares and loads.
class KeyMatcher {
 public:
  KeyMatcher(const PersistentPool& pool, KeyMode mode, KeyView key);
  [[nodiscard]] bool matches(std::uint64_t key_word) const;
  [[nodiscard]] KeyMode mode() const { return mode_; }
  [[nodiscard]] const KeyView& key() const { return key_; }

 private:
  const PersistentPool* pool_;
  KeyMode mode_;
  KeyView key_;
};

/// Hash of the key a slot refers to.
Hash hash_key_word(const PersistentPool& pool, KeyMode mode, std::uint64_t key_word);

enum class Membership { any, home, probing };

class BucketFull : public std::logic_error {
 public:
  BucketFull() : std::logic_error("bucket full") {}
};

/// Non-owning handle to a bucket stored in a pool.
class Bucket {
 public:
  Bucket(PersistentPool& pool, PoolOffset off) : pool_(&pool), off_(off) {}

  [[nodiscard]] PoolOffset offset() const { return off_; }
  [[nodiscard]] PersistentPool& pool() const { return *pool_; }

  void lock() const { vlock::lock(*pool_, off_); }
  [[nodiscard]] bool try_lock() const { return vlock::try_lock(*pool_, off_); }
  void unlock() const { vlock::unlock(*pool_, off_); }
  [[nodiscard]] std::uint32_t read_version() const { return vlock::read_version(*pool_, off_); }
  [[nodiscard]] bool verify(std::uint32_t snap) const { return vlock::verify(*pool_, off_, snap); }

  [[nodiscard]] PackedWord packed() const;
  [[nodiscard]] int count() const { return packed().counter(); }
  [[nodiscard]] bool full() const { return packed().full(); }
  [[nodiscard]] std::uint8_t fp(int slot) const;
  [[nodiscard]] std::uint64_t key_word(int slot) const;
  [[nodiscard]] std::uint64_t value(int slot) const;

  /// Slot holding the key among slots whose fingerprint matches, or -1.
  [[nodiscard]] int find(const KeyMatcher& key, std::uint8_t fp, Membership m) const;

  /// Record insert with the persistence order: slot, fingerprint, packed.
  int insert(std::uint64_t key_word, std::uint64_t value, std::uint8_t fp,
             bool probing_resident) const;
  /// Clears alloc and membership bits in one store, then persists.
  void erase(int slot) const;

  /// Lowest allocated slot whose membership bit equals `probing_resident`.
  [[nodiscard]] int lowest_with_membership(bool probing_resident) const;

  [[nodiscard]] OverflowWord overflow() const;
  void store_overflow(OverflowWord w) const;
  [[nodiscard]] std::uint8_t overflow_fp(int i) const;
  void store_overflow_fp(int i, std::uint8_t fp) const;

  /// Writes the lock word directly; recovery only.
  void reset_lock() const;

 private:
  PersistentPool* pool_;
  PoolOffset off_;
};

/// Records an overflowing record of home bucket `home` that lives in stash
/// bucket `stash_idx` (or in a chain, when negative). Not persisted.
void set_overflow_meta(const Bucket& home, const Bucket& probing, std::uint8_t fp, int stash_idx);
/// Reverses exactly one earlier `set_overflow_meta` for (fp, stash_idx).
void clear_overflow_meta(const Bucket& home, const Bucket& probing, std::uint8_t fp, int stash_idx);
/// Recomputes the home bucket's overflow bit from its own and its probing
/// neighbour's slots.
void refresh_overflow_bit(const Bucket& home, const Bucket& probing);

/// Moves the record in `slot` of `from` into `to`, then erases the source.
int move_record(const Bucket& from, int slot, const Bucket& to, bool probing_resident);

}  // namespace dash
