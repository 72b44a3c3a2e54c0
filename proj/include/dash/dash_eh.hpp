#pragma once

// Extendible hashing over segments. The directory is indexed by the top G
// hash bits; a segment of local depth L owns 2^(G-L) contiguous entries.
//
// Directory block: @0 u64 global depth G, @64 2^G segment handles.

#include <memory>
#include <optional>

#include "dash/persist.hpp"
#include "dash/reclaim.hpp"
#include "dash/table.hpp"

namespace dash {

struct EhConfig {
  int buckets_per_segment = 64;
  int stash_buckets = 2;
  int initial_depth = 1;
  KeyMode key_mode = KeyMode::inline8;
  InsertPolicy policy{};
};

class DashEH {
 public:
  /// Builds a new table in an empty pool and publishes it as the pool root.
  static DashEH create(PersistentPool& pool, const EhConfig& cfg);
  /// Restarts on an existing pool: constant work, recovery is lazy.
  static DashEH open(PersistentPool& pool);

  DashEH(DashEH&&) noexcept;
  DashEH& operator=(DashEH&&) noexcept;
  ~DashEH();

  InsertStatus insert(KeyView key, std::uint64_t value);
  [[nodiscard]] std::optional<std::uint64_t> search(KeyView key);
  bool remove(KeyView key);

  /// Marks the pool clean. The table must not be used afterwards.
  void shutdown();
  /// Recovers every segment that has not been touched since restart.
  void recover_all();

  [[nodiscard]] double load_factor() const;
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] int global_depth() const;
  [[nodiscard]] std::size_t segment_count() const;
  [[nodiscard]] std::uint8_t version() const;
  [[nodiscard]] const Geometry& geometry() const;
  [[nodiscard]] TableStats stats() const;
  [[nodiscard]] EpochManager& epochs();

  /// Visits every record as (key word, value).
  void for_each(const std::function<void(std::uint64_t, std::uint64_t)>& fn) const;
  /// Blocks reachable from the root: root, directory, segments, key records.
  [[nodiscard]] std::vector<PoolOffset> owned_blocks() const;
  /// Directory entries in index order.
  [[nodiscard]] std::vector<PoolOffset> directory() const;
  /// True iff every segment owns exactly its aligned, contiguous entry range.
  [[nodiscard]] bool check_directory() const;
  /// Segment handle the key currently maps to.
  [[nodiscard]] PoolOffset segment_of(KeyView key) const;
  /// Splits the segment that `key` maps to (test hook).
  void split_for(KeyView key);

 private:
  struct Impl;
  explicit DashEH(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace dash
