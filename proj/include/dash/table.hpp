#pragma once

// Pieces shared by the extendible and linear tables: root record layout,
// result codes and statistics.

#include <atomic>
#include <cstdint>

#include "dash/segment.hpp"

namespace dash {

/// Table root record, published through the pool's root handle.
namespace root_layout {
inline constexpr std::size_t kRootSize = 64;
inline constexpr PoolOffset kKindOff = 0;     // u8
inline constexpr PoolOffset kKeyModeOff = 1;  // u8
inline constexpr PoolOffset kKOff = 2;        // u16
inline constexpr PoolOffset kSOff = 4;        // u16
inline constexpr PoolOffset kPolicyOff = 6;   // u8
inline constexpr PoolOffset kReadyOff = 7;    // u8, set once creation finished
inline constexpr PoolOffset kDirectoryOff = 8;  // EH: directory handle
inline constexpr PoolOffset kPackedOff = 8;     // LH: N (high 32) | Next (low 32)
inline constexpr PoolOffset kMOff = 16;         // LH: u32 base segment count
inline constexpr PoolOffset kStrideOff = 20;    // LH: u32 entries per doubling group
inline constexpr PoolOffset kEntriesOff = 64;   // LH: segment-array handles

inline constexpr std::uint8_t kKindEH = 1;
inline constexpr std::uint8_t kKindLH = 2;
}  // namespace root_layout

enum class InsertStatus { inserted, exists };

struct TableStats {
  std::uint64_t splits = 0;
  std::uint64_t doublings = 0;
  std::uint64_t chain_allocations = 0;
  std::uint64_t next_advances = 0;
  std::uint64_t segments_recovered = 0;
  std::uint64_t read_retries = 0;
  std::uint64_t displacements = 0;
  std::uint64_t stash_inserts = 0;
};

namespace detail {

struct AtomicStats {
  std::atomic<std::uint64_t> splits{0}, doublings{0}, chain_allocations{0}, next_advances{0},
      segments_recovered{0}, read_retries{0}, displacements{0}, stash_inserts{0};

  [[nodiscard]] TableStats snapshot() const {
    return {splits.load(),       doublings.load(),          chain_allocations.load(),
            next_advances.load(), segments_recovered.load(), read_retries.load(),
            displacements.load(), stash_inserts.load()};
  }

  void count(Placement p) {
    if (p == Placement::displaced) displacements.fetch_add(1, std::memory_order_relaxed);
    if (p == Placement::stash) stash_inserts.fetch_add(1, std::memory_order_relaxed);
  }
};

/// Retire-callback tags.
inline constexpr std::uint32_t kTagDirectory = 1;
inline constexpr std::uint32_t kTagChain = 2;

/// Key word to store for `key`; allocates a key record in variable mode.
std::uint64_t key_word_for(PersistentPool& pool, KeyMode mode, const KeyView& key);
/// Throws if `key` does not match the table's key mode.
void check_key(KeyMode mode, const KeyView& key);

/// Constant-work restart: clears the clean marker, or bumps the global
/// version after a crash. When the version wraps, `stamp_all` must set every
/// segment's version to 0 before the new version is written. Returns V.
std::uint8_t restart_pool(PersistentPool& pool, const std::function<void()>& stamp_all);

}  // namespace detail

}  // namespace dash
