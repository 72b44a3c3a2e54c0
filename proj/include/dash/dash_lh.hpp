#pragma once

// Linear hashing over segments with hybrid expansion: directory entry i
// holds an array of M * 2^(i / stride) segments, so the directory stays a
// fixed, small array. N (round) and Next (split cursor) share one atomic
// 64-bit word. Segments overflow into per-segment stash chains; every chain
// allocation advances Next by one, and the segment behind Next is split by
// whichever thread touches it first.

#include <memory>
#include <optional>

#include "dash/persist.hpp"
#include "dash/reclaim.hpp"
#include "dash/table.hpp"

namespace dash {

struct LhConfig {
  int buckets_per_segment = 64;
  int stash_buckets = 2;
  std::uint32_t base_segments = 64;  // M, power of two
  std::uint32_t stride = 8;          // entries per doubling group
  KeyMode key_mode = KeyMode::inline8;
};

inline constexpr std::uint32_t kLhGroups = 32;

struct LhLocation {
  std::uint32_t entry;
  std::uint64_t offset;
  bool operator==(const LhLocation&) const = default;
};

/// Segments held by directory entry `entry`.
std::uint64_t lh_array_size(std::uint32_t entry, std::uint64_t M, std::uint32_t stride);
/// Segments held by entries [0, entries).
std::uint64_t lh_cum_capacity(std::uint32_t entries, std::uint64_t M, std::uint32_t stride);
/// Entry and in-array offset of segment `seg_index`.
LhLocation lh_locate(std::uint64_t seg_index, std::uint64_t M, std::uint32_t stride);

/// Segment index for hash `h` under the packed N|Next word.
std::uint64_t lh_addr(Hash h, std::uint64_t packed, std::uint64_t M, int shift);

constexpr std::uint64_t lh_pack(std::uint32_t n, std::uint32_t next) {
  return std::uint64_t{n} << 32 | next;
}

class DashLH {
 public:
  static DashLH create(PersistentPool& pool, const LhConfig& cfg);
  static DashLH open(PersistentPool& pool);

  DashLH(DashLH&&) noexcept;
  DashLH& operator=(DashLH&&) noexcept;
  ~DashLH();

  InsertStatus insert(KeyView key, std::uint64_t value);
  [[nodiscard]] std::optional<std::uint64_t> search(KeyView key);
  bool remove(KeyView key);

  void shutdown();
  void recover_all();

  /// Advances Next by one (as a chain allocation would).
  void advance_next();

  [[nodiscard]] double load_factor() const;
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] std::uint64_t packed() const;
  /// Segments addressable under the current packed word: M * 2^N + Next.
  [[nodiscard]] std::uint64_t addressable_segments() const;
  [[nodiscard]] std::size_t chain_buckets() const;
  [[nodiscard]] std::uint8_t version() const;
  [[nodiscard]] const Geometry& geometry() const;
  [[nodiscard]] TableStats stats() const;
  [[nodiscard]] EpochManager& epochs();
  [[nodiscard]] int address_shift() const;
  [[nodiscard]] std::uint64_t base_segments() const;
  [[nodiscard]] std::uint32_t stride() const;

  void for_each(const std::function<void(std::uint64_t, std::uint64_t)>& fn) const;
  [[nodiscard]] std::vector<PoolOffset> owned_blocks() const;
  /// Segment index and handle the key currently maps to.
  [[nodiscard]] std::pair<std::uint64_t, PoolOffset> segment_of(KeyView key) const;
  [[nodiscard]] std::uint8_t segment_level(std::uint64_t seg_index) const;
  /// Splits segment `seg_index` if it is behind Next (test hook).
  void split_segment(std::uint64_t seg_index);

 private:
  struct Impl;
  explicit DashLH(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace dash
