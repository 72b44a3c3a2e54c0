#pragma once

/// \file
/// File-backed persistent region with explicit flush/fence semantics.
///
/// Two modes are supported. In `direct` mode the backing file is mapped
/// shared and flush/fence are ordering-only operations. In `crash_sim` mode
/// the pool keeps a second image, the persisted shadow, which only receives
/// cachelines that were flushed and then fenced. `crash()` discards
/// everything that never reached the shadow, which is how the table
/// protocols are checked for crash consistency.
///
/// The pool also owns the block allocator. Its only publication primitive is
/// `alloc_into`, which carves a block, runs the caller's initializer on it
/// and then atomically stores the block offset into a caller-supplied
/// persistent handle. A crash anywhere inside that sequence is reconciled at
/// open time from a single persisted in-flight record.

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

namespace dash {

/// Pool offsets are plain 64-bit byte offsets from the start of the pool.
/// Offset 0 is the pool header and doubles as the null handle.
using PoolOffset = std::uint64_t;
inline constexpr PoolOffset kNullOffset = 0;

inline constexpr std::size_t kCacheLine = 64;
inline constexpr std::size_t kMinPoolCapacity = std::size_t{1} << 20;

enum class PoolErrc {
  capacity_too_small,
  not_found,
  bad_magic,
  bad_version,
  truncated,
  io,
  out_of_range,
  out_of_space,
  wrong_mode,
};

const char* to_string(PoolErrc code) noexcept;

class PoolError : public std::runtime_error {
 public:
  PoolError(PoolErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  [[nodiscard]] PoolErrc code() const noexcept { return code_; }

 private:
  PoolErrc code_;
};

enum class PoolMode { direct, crash_sim };

struct CrashPolicy {
  enum class Kind { strict, adversarial } kind = Kind::strict;
  std::uint64_t seed = 0;

  static CrashPolicy strict() { return {}; }
  static CrashPolicy adversarial(std::uint64_t s) {
    return {Kind::adversarial, s};
  }
};

/// Exact persistence-operation counters.
struct PersistCounters {
  std::uint64_t stores = 0;
  std::uint64_t bytes_stored = 0;
  std::uint64_t flushes = 0;
  std::uint64_t flushed_lines = 0;
  std::uint64_t fences = 0;

  PersistCounters operator-(const PersistCounters& o) const {
    return {stores - o.stores, bytes_stored - o.bytes_stored,
            flushes - o.flushes, flushed_lines - o.flushed_lines,
            fences - o.fences};
  }
  PersistCounters& operator+=(const PersistCounters& o) {
    stores += o.stores;
    bytes_stored += o.bytes_stored;
    flushes += o.flushes;
    flushed_lines += o.flushed_lines;
    fences += o.fences;
    return *this;
  }
  bool operator==(const PersistCounters&) const = default;
};

/// One traced store: offset and width in bytes.
struct StoreEvent {
  PoolOffset off;
  std::size_t len;
  bool operator==(const StoreEvent&) const = default;
};

/// On-media pool header. Little-endian, 64 bytes.
namespace pool_layout {
inline constexpr char kMagic[8] = {'D', 'A', 'S', 'H', 'P', 'O', 'O', 'L'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr PoolOffset kMagicOff = 0;
inline constexpr PoolOffset kFormatVersionOff = 8;
inline constexpr PoolOffset kCleanOff = 12;
inline constexpr PoolOffset kGlobalVersionOff = 13;
inline constexpr PoolOffset kCapacityOff = 32;  // u64, truncation check
inline constexpr PoolOffset kRootHandleOff = 16;
inline constexpr PoolOffset kAllocStateHandleOff = 24;
inline constexpr PoolOffset kAllocStateOff = 64;
inline constexpr PoolOffset kDataStart = 4096;

// Allocator state, relative to kAllocStateOff.
inline constexpr PoolOffset kBumpOff = 0;
inline constexpr PoolOffset kFreeHeadOff = 8;
inline constexpr PoolOffset kInFlightOff = 64;  // one cacheline
inline constexpr PoolOffset kRetireRingOff = 128;
inline constexpr std::size_t kRetireRingSlots = 256;

// Per-block header, immediately before the payload.
inline constexpr std::size_t kBlockHeader = 64;
inline constexpr PoolOffset kBlockSizeOff = 0;
inline constexpr PoolOffset kBlockNextOff = 8;
inline constexpr PoolOffset kBlockTagOff = 16;
inline constexpr std::uint64_t kTagUsed = 0x5553454455534544ull;
inline constexpr std::uint64_t kTagFree = 0x4545524645455246ull;
inline constexpr std::uint64_t kTagDetached = 0x4843415445444B44ull;

static_assert(kRetireRingOff + kRetireRingSlots * 8 <= kDataStart - kAllocStateOff);
}  // namespace pool_layout

/// Result of the allocator ownership audit (see `PersistentPool::audit`).
struct AllocAudit {
  std::uint64_t carved_bytes = 0;
  std::uint64_t free_bytes = 0;
  std::uint64_t retired_bytes = 0;
  std::uint64_t owned_bytes = 0;
  std::uint64_t detached_bytes = 0;      // unowned `alloc_detached` blocks
  std::vector<PoolOffset> leaked;        // carved, but in no set
  std::vector<PoolOffset> double_owned;  // in more than one set
  std::vector<PoolOffset> unknown_owned; // claimed owned, but not a block

  [[nodiscard]] bool ok() const {
    return leaked.empty() && double_owned.empty() && unknown_owned.empty() &&
           free_bytes + retired_bytes + owned_bytes + detached_bytes == carved_bytes;
  }
};

class PersistentPool {
 public:
  using Initializer = std::function<void(PoolOffset payload)>;

  /// Creates (truncating) a pool file. All bytes zero, clean=1, V=0.
  static PersistentPool create(const std::filesystem::path& path,
                               std::size_t capacity,
                               PoolMode mode = PoolMode::direct);
  /// Opens an existing pool and reconciles an in-flight allocation.
  static PersistentPool open(const std::filesystem::path& path,
                             PoolMode mode = PoolMode::direct);

  PersistentPool(PersistentPool&&) noexcept;
  PersistentPool& operator=(PersistentPool&&) noexcept;
  PersistentPool(const PersistentPool&) = delete;
  PersistentPool& operator=(const PersistentPool&) = delete;
  ~PersistentPool();

  [[nodiscard]] PoolMode mode() const noexcept;
  [[nodiscard]] std::size_t capacity() const noexcept;
  [[nodiscard]] const std::filesystem::path& path() const noexcept;

  // ---- stores and persistence ---------------------------------------------

  void store(PoolOffset off, std::span<const std::byte> bytes);
  void zero(PoolOffset off, std::size_t len);

  /// Single atomic store of an aligned scalar (1, 2, 4 or 8 bytes).
  template <class T>
  void store_atomic(PoolOffset off, T value,
                    std::memory_order order = std::memory_order_release) {
    static_assert(std::is_trivially_copyable_v<T> &&
                  (sizeof(T) == 1 || sizeof(T) == 2 || sizeof(T) == 4 ||
                   sizeof(T) == 8));
    check_aligned(off, sizeof(T));
    before_op();
    std::atomic_ref<T>(*reinterpret_cast<T*>(ptr(off))).store(value, order);
    after_store(off, sizeof(T));
  }

  /// Compare-and-exchange on a persistent 32-bit word; counts as a store
  /// only when it succeeds.
  bool cas_u32(PoolOffset off, std::uint32_t& expected, std::uint32_t desired);
  bool cas_u64(PoolOffset off, std::uint64_t& expected, std::uint64_t desired);

  void flush(PoolOffset off, std::size_t len);
  void fence();
  void persist(PoolOffset off, std::size_t len) {
    flush(off, len);
    fence();
  }

  // ---- loads ----------------------------------------------------------------

  template <class T>
  [[nodiscard]] T load(PoolOffset off,
                       std::memory_order order = std::memory_order_acquire) const {
    static_assert(std::is_trivially_copyable_v<T> &&
                  (sizeof(T) == 1 || sizeof(T) == 2 || sizeof(T) == 4 ||
                   sizeof(T) == 8));
    check_aligned(off, sizeof(T));
    return std::atomic_ref<T>(*reinterpret_cast<T*>(ptr(off))).load(order);
  }

  void read(PoolOffset off, std::span<std::byte> out) const;

  // ---- header ---------------------------------------------------------------

  [[nodiscard]] bool clean() const { return load<std::uint8_t>(pool_layout::kCleanOff) != 0; }
  [[nodiscard]] std::uint8_t global_version() const {
    return load<std::uint8_t>(pool_layout::kGlobalVersionOff);
  }
  [[nodiscard]] PoolOffset root_handle() const {
    return load<std::uint64_t>(pool_layout::kRootHandleOff);
  }
  static constexpr PoolOffset root_handle_slot() { return pool_layout::kRootHandleOff; }

  // ---- allocator -----------------------------------------------------------

  /// Carves a zeroed block of at least `size` bytes, runs `init` on it and
  /// publishes its payload offset into the 8-byte persistent field at
  /// `owner_slot`. When `retire_previous` is set, the handle previously held
  /// by `owner_slot` is moved to the persistent retire ring in the same
  /// crash-atomic step; the caller must later hand it to `release_retired`.
  PoolOffset alloc_into(std::size_t size, PoolOffset owner_slot,
                        const Initializer& init, bool retire_previous = false);

  /// Allocation with no owner record. A crash before the caller publishes
  /// the block leaks it; used for immutable out-of-line key records.
  PoolOffset alloc_detached(std::size_t size, const Initializer& init);

  /// Clears `owner_slot` and moves the chain of blocks it referenced to the
  /// retire ring. `next_link_off` is the payload offset of each node's
  /// next-block handle.
  void detach_chain(PoolOffset owner_slot, std::size_t next_link_off);

  /// Returns a previously retired block (or chain) to the free list.
  void release_retired(PoolOffset handle);

  [[nodiscard]] std::size_t block_size(PoolOffset payload) const;
  [[nodiscard]] std::vector<PoolOffset> retired_handles() const;

  /// Classifies every carved block as free, retired or owned. `owned`
  /// lists payload offsets reachable from the structure stored in the pool.
  [[nodiscard]] AllocAudit audit(std::span<const PoolOffset> owned) const;

  // ---- counters ------------------------------------------------------------

  [[nodiscard]] PersistCounters counters() const;
  [[nodiscard]] PersistCounters thread_counters() const;
  void reset_counters();

  /// Records every subsequent store (offset, width) until turned off.
  /// Turning it on or off clears the trace. Intended for tests.
  void set_store_trace(bool on);
  [[nodiscard]] std::vector<StoreEvent> store_trace() const;

  // ---- crash simulation ---------------------------------------------------

  /// Sequence number of persistence operations (store/flush/fence) issued
  /// so far; only maintained in crash_sim mode.
  [[nodiscard]] std::uint64_t persist_op_index() const;

  /// Freezes the crash image immediately before persistence op `index`
  /// executes. The workload keeps running; `crash()` returns the frozen
  /// image.
  void arm_crash(std::uint64_t index,
                 CrashPolicy policy = CrashPolicy::strict());
  [[nodiscard]] bool crash_fired() const;

  /// Returns a new pool whose contents are what survived a crash. The
  /// allocator in-flight record is reconciled exactly as on `open`.
  [[nodiscard]] PersistentPool crash(CrashPolicy policy = CrashPolicy::strict());

  /// Deep copy of a crash_sim pool, including dirty/pending state.
  [[nodiscard]] PersistentPool clone() const;

  /// Lines that were stored since their last flush+fence.
  [[nodiscard]] std::vector<PoolOffset> dirty_lines() const;
  /// Byte view of the persisted shadow (crash_sim only).
  [[nodiscard]] std::span<const std::byte> shadow() const;
  [[nodiscard]] std::span<const std::byte> image() const;

  /// Writes back every dirty line, as a clean power-down does.
  void persist_all();

  /// Writes the durable image to the backing file (shadow in crash_sim).
  void sync();

  // ---- header updates used by table restart --------------------------------

  void set_clean(bool clean);
  void set_global_version(std::uint8_t v);

 private:
  struct State;
  explicit PersistentPool(std::unique_ptr<State> s);

  [[nodiscard]] std::byte* ptr(PoolOffset off) const;
  void check_range(PoolOffset off, std::size_t len) const;
  void check_aligned(PoolOffset off, std::size_t size) const;
  void before_op();
  void after_store(PoolOffset off, std::size_t len);

  static PersistentPool from_image(std::vector<std::byte> image,
                                   std::filesystem::path path, PoolMode mode);
  void reconcile_in_flight();
  void process_open_ring_locked();
  void push_free_locked(PoolOffset payload);
  void ring_add_locked(PoolOffset handle);
  [[nodiscard]] std::optional<std::size_t> ring_find(PoolOffset handle) const;
  void free_chain_locked(PoolOffset head, std::size_t next_link_off);
  void release_ring_slot_locked(std::size_t idx);

  std::unique_ptr<State> s_;
};

}  // namespace dash
