#pragma once

// Segment layout and the per-segment record paths shared by both table
// variants: insert with balanced placement, displacement and stashing,
// lock-free search, delete, split rehash and the local recovery steps.
//
// Segment header (64 bytes), buckets follow at +64:
//   @0   u64 word0: byte0 local depth (EH) or level (LH), byte1 state,
//        byte2 segment version
//   @8   side link
//   @16  prefix (EH: top-depth hash bits this segment owns)
//   @24  split redo word: bit0 valid, bits 8..15 new depth
//   @32  split redo prefix
//   @40  stash chain head (LH)

#include <functional>
#include <vector>

#include "dash/hashcore.hpp"

namespace dash {

namespace segment_layout {
inline constexpr std::size_t kHeaderSize = 64;
inline constexpr PoolOffset kWord0Off = 0;
inline constexpr PoolOffset kSideLinkOff = 8;
inline constexpr PoolOffset kPrefixOff = 16;
inline constexpr PoolOffset kRedoWordOff = 24;
inline constexpr PoolOffset kRedoPrefixOff = 32;
inline constexpr PoolOffset kChainHeadOff = 40;

inline constexpr std::uint8_t kStateNormal = 0;
inline constexpr std::uint8_t kStateSplitting = 1;
inline constexpr std::uint8_t kStateNew = 2;

// Chain nodes are a bucket followed by the next-node handle.
inline constexpr std::size_t kChainNodeSize = 320;
inline constexpr std::size_t kChainLinkOff = 256;
}  // namespace segment_layout

/// Which insert techniques are enabled; all on for the real tables.
struct InsertPolicy {
  bool probing = true;
  bool balanced = true;
  bool displacement = true;
  bool stash = true;

  [[nodiscard]] std::uint8_t encode() const {
    return static_cast<std::uint8_t>(probing | balanced << 1 | displacement << 2 | stash << 3);
  }
  static InsertPolicy decode(std::uint8_t v) {
    return {(v & 1) != 0, (v & 2) != 0, (v & 4) != 0, (v & 8) != 0};
  }
  static InsertPolicy bucketized() { return {false, false, false, false}; }
  bool operator==(const InsertPolicy&) const = default;
};

struct Geometry {
  int K = 64;  // normal buckets, power of two >= 4
  int S = 2;   // stash buckets, 0..4
  KeyMode key_mode = KeyMode::inline8;
  InsertPolicy policy{};
  bool chain = false;  // stash chains (linear variant)

  [[nodiscard]] std::size_t segment_bytes() const {
    return segment_layout::kHeaderSize + static_cast<std::size_t>(K + S) * bucket_layout::kBucketSize;
  }
  [[nodiscard]] int bucket_bits() const;
  void validate() const;
};

struct SegmentHeader {
  std::uint8_t depth = 0;
  std::uint8_t state = 0;
  std::uint8_t version = 0;

  static SegmentHeader decode(std::uint64_t w) {
    return {static_cast<std::uint8_t>(w), static_cast<std::uint8_t>(w >> 8),
            static_cast<std::uint8_t>(w >> 16)};
  }
  [[nodiscard]] std::uint64_t encode() const {
    return std::uint64_t{depth} | std::uint64_t{state} << 8 | std::uint64_t{version} << 16;
  }
};

/// Record location within a segment.
enum class Where { normal, stash, chain };

struct RecordRef {
  Where where;
  int bucket;       // normal or stash index; chain position for chain nodes
  PoolOffset node;  // bucket offset
  int slot;
};

/// Callback answering whether the caller still addresses this segment
/// after bucket versions were snapshotted or locks were taken.
using Validator = std::function<bool()>;

/// Where an inserted record ended up.
enum class Placement { none, bucket, displaced, stash, chain };

struct InsertResult {
  enum Code { inserted, exists, full, stale } code = full;
  bool chain_allocated = false;
  Placement placement = Placement::none;
};

enum class ReadResult { found, not_found, retry };

/// Acquires bucket locks under the segment's total order: normal buckets,
/// then stash buckets, then chain nodes in list order. A blocking acquire
/// is used only when ascending; otherwise a single try.
class LockSet {
 public:
  explicit LockSet(PersistentPool& pool) : pool_(&pool) {}
  ~LockSet() { release(); }
  LockSet(const LockSet&) = delete;
  LockSet& operator=(const LockSet&) = delete;

  bool acquire(int order, PoolOffset bucket);
  [[nodiscard]] bool holds(PoolOffset bucket) const;
  void release();

 private:
  PersistentPool* pool_;
  std::vector<PoolOffset> held_;
  int max_order_ = -1;
};

class Segment {
 public:
  Segment(PersistentPool& pool, const Geometry& geo, PoolOffset off)
      : pool_(&pool), geo_(&geo), off_(off) {}

  [[nodiscard]] PoolOffset offset() const { return off_; }
  [[nodiscard]] PersistentPool& pool() const { return *pool_; }
  [[nodiscard]] const Geometry& geometry() const { return *geo_; }

  [[nodiscard]] SegmentHeader header() const;
  void store_header(SegmentHeader h) const;  // store + persist
  [[nodiscard]] PoolOffset side_link() const;
  [[nodiscard]] std::uint64_t prefix() const;
  [[nodiscard]] PoolOffset chain_head() const;
  [[nodiscard]] PoolOffset field(PoolOffset rel) const { return off_ + rel; }

  /// Writes a fresh header; the payload is assumed zeroed. Persists it.
  void init(SegmentHeader h, PoolOffset side_link, std::uint64_t prefix) const;

  [[nodiscard]] Bucket bucket(int i) const;
  [[nodiscard]] int home_index(Hash h) const;
  [[nodiscard]] int next_index(int b) const { return (b + 1) & (geo_->K - 1); }
  [[nodiscard]] std::vector<PoolOffset> chain_nodes() const;

  // ---- record paths -----------------------------------------------------------

  using KeyWordFn = std::function<std::uint64_t()>;
  InsertResult insert(Hash h, const KeyMatcher& key, const KeyWordFn& key_word,
                      std::uint64_t value, const Validator& valid) const;
  ReadResult search(Hash h, const KeyMatcher& key, std::uint64_t& value,
                    const Validator& valid) const;
  /// Returns `found` when deleted, `not_found`, or `retry` when stale.
  ReadResult remove(Hash h, const KeyMatcher& key, const Validator& valid) const;

  // ---- whole-segment helpers (caller holds every lock or owns the segment) ----

  void lock_all(LockSet& locks) const;
  void for_each_record(const std::function<void(const RecordRef&)>& fn) const;
  [[nodiscard]] std::size_t record_count() const;

  /// Slot-placement without uniqueness check: b, b+1, stash, then chain.
  /// Returns false when no room and chains are disabled.
  bool place(Hash h, std::uint64_t key_word, std::uint64_t value, std::uint8_t fp) const;

  /// Moves every record selected by `moves` into `to`. Normal and stash
  /// records keep bucket index and membership; chain records are placed.
  /// With `unique`, records already present in `to` are only erased here.
  void rehash_into(const Segment& to, const std::function<bool(Hash)>& moves, bool unique) const;

  /// Moves chain records into free normal or stash slots where possible and
  /// detaches the chain once empty. Returns the detached head, if any.
  PoolOffset compact_chain() const;

  /// Clears every overflow field and recomputes them from stash and chain
  /// contents.
  void rebuild_overflow() const;
  /// Clears stale lock bits, drops duplicate records and rebuilds overflow
  /// metadata.
  void recover_local() const;

  /// True if a record with this key word exists anywhere in the segment.
  [[nodiscard]] bool contains_key_word(std::uint64_t key_word, std::uint8_t fp) const;

 private:
  bool insert_chain(LockSet& locks, std::uint64_t key_word, std::uint64_t value, std::uint8_t fp,
                    bool& allocated) const;

  PersistentPool* pool_;
  const Geometry* geo_;
  PoolOffset off_;
};

}  // namespace dash
