#include "dash/persist.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <fstream>
#include <map>
#include <random>
#include <unordered_map>

namespace dash {

namespace pl = pool_layout;

const char* to_string(PoolErrc code) noexcept {
  switch (code) {
    case PoolErrc::capacity_too_small: return "CapacityTooSmall";
    case PoolErrc::not_found: return "NotFound";
    case PoolErrc::bad_magic: return "BadMagic";
    case PoolErrc::bad_version: return "BadVersion";
    case PoolErrc::truncated: return "Truncated";
    case PoolErrc::io: return "IoError";
    case PoolErrc::out_of_range: return "OutOfRange";
    case PoolErrc::out_of_space: return "OutOfSpace";
    case PoolErrc::wrong_mode: return "WrongMode";
  }
  return "Unknown";
}

namespace {

constexpr std::size_t kCounterShards = 64;

// In-flight record fields, relative to the record line.
constexpr PoolOffset kRecOp = 0;
constexpr PoolOffset kRecBlock = 8;
constexpr PoolOffset kRecOwner = 16;
constexpr PoolOffset kRecPrev = 24;
constexpr PoolOffset kRecFlags = 32;
constexpr PoolOffset kRecPred = 40;
constexpr PoolOffset kRecAux = 48;

constexpr std::uint64_t kOpNone = 0;
constexpr std::uint64_t kOpAlloc = 1;
constexpr std::uint64_t kOpFree = 2;
constexpr std::uint64_t kOpDetach = 3;

constexpr std::uint64_t kFlagRetirePrev = 1;
constexpr std::uint64_t kFlagFromFreeList = 2;

// Retire ring entries carry a chain marker and the link offset in the low
// bits; payload offsets are always 64-byte aligned.
constexpr std::uint64_t kRingChain = 1;
constexpr std::uint64_t ring_encode_chain(PoolOffset head, std::size_t link_off) {
  return head | kRingChain | ((link_off / kCacheLine) << 1);
}
constexpr PoolOffset ring_handle(std::uint64_t entry) { return entry & ~std::uint64_t{63}; }
constexpr bool ring_is_chain(std::uint64_t entry) { return (entry & kRingChain) != 0; }
constexpr std::size_t ring_link_off(std::uint64_t entry) {
  return ((entry >> 1) & 31) * kCacheLine;
}

constexpr std::size_t round_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

std::size_t thread_slot() {
  static std::atomic<std::size_t> next{0};
  thread_local const std::size_t slot = next.fetch_add(1, std::memory_order_relaxed);
  return slot % kCounterShards;
}

struct AlignedFree {
  void operator()(std::byte* p) const { ::operator delete[](p, std::align_val_t{4096}); }
};
using AlignedBuffer = std::unique_ptr<std::byte[], AlignedFree>;

AlignedBuffer make_buffer(std::size_t n) {
  auto* p = static_cast<std::byte*>(::operator new[](n, std::align_val_t{4096}));
  return AlignedBuffer(p);
}

[[noreturn]] void io_fail(const std::string& what) {
  throw PoolError(PoolErrc::io, what + ": " + std::strerror(errno));
}

}  // namespace

struct PersistentPool::State {
  std::filesystem::path path;
  PoolMode mode = PoolMode::direct;
  std::size_t capacity = 0;
  std::byte* base = nullptr;

  // direct mode
  int fd = -1;
  // crash_sim mode
  AlignedBuffer owned;
  std::vector<std::byte> shadow;
  std::unique_ptr<std::atomic<std::uint8_t>[]> dirty;
  mutable std::mutex pending_mu;
  std::map<std::uint64_t, std::array<std::byte, kCacheLine>> pending;
  std::atomic<std::uint64_t> op_seq{0};
  std::optional<std::uint64_t> crash_at;
  CrashPolicy armed_policy;
  std::optional<std::vector<std::byte>> frozen;

  struct alignas(64) Shard {
    std::atomic<std::uint64_t> stores{0}, bytes{0}, flushes{0}, lines{0}, fences{0};
  };
  std::array<Shard, kCounterShards> shards;

  std::mutex alloc_mu;
  bool open_ring_pending = false;

  std::atomic<bool> tracing{false};
  std::mutex trace_mu;
  std::vector<StoreEvent> trace;

  [[nodiscard]] std::size_t lines() const { return capacity / kCacheLine; }

  ~State() {
    if (mode == PoolMode::direct && base != nullptr) {
      ::munmap(base, capacity);
    }
    if (fd >= 0) ::close(fd);
  }

  std::vector<std::byte> crash_image(const CrashPolicy& policy) const {
    std::vector<std::byte> img = shadow;
    std::lock_guard lk(pending_mu);
    if (policy.kind == CrashPolicy::Kind::adversarial) {
      // Any dirty or flushed-but-unfenced line may or may not have been
      // written back by the cache before power was lost.
      std::vector<std::uint64_t> cand;
      for (std::size_t l = 0; l < lines(); ++l) {
        if (dirty[l].load(std::memory_order_relaxed) != 0 || pending.count(l) != 0) {
          cand.push_back(l);
        }
      }
      std::mt19937_64 rng(policy.seed);
      for (std::uint64_t l : cand) {
        if ((rng() & 1) == 0) continue;
        const auto off = l * kCacheLine;
        if (dirty[l].load(std::memory_order_relaxed) != 0) {
          std::memcpy(img.data() + off, base + off, kCacheLine);
        } else {
          const auto& snap = pending.at(l);
          std::memcpy(img.data() + off, snap.data(), kCacheLine);
        }
      }
    }
    return img;
  }
};

PersistentPool::PersistentPool(std::unique_ptr<State> s) : s_(std::move(s)) {}
PersistentPool::PersistentPool(PersistentPool&&) noexcept = default;
PersistentPool& PersistentPool::operator=(PersistentPool&&) noexcept = default;
PersistentPool::~PersistentPool() = default;

PoolMode PersistentPool::mode() const noexcept { return s_->mode; }
std::size_t PersistentPool::capacity() const noexcept { return s_->capacity; }
const std::filesystem::path& PersistentPool::path() const noexcept { return s_->path; }

std::byte* PersistentPool::ptr(PoolOffset off) const { return s_->base + off; }

void PersistentPool::check_range(PoolOffset off, std::size_t len) const {
  if (off > s_->capacity || len > s_->capacity - off) {
    throw PoolError(PoolErrc::out_of_range,
                    "pool access [" + std::to_string(off) + ", +" +
                        std::to_string(len) + ") beyond capacity");
  }
}

void PersistentPool::check_aligned(PoolOffset off, std::size_t size) const {
  check_range(off, size);
  if (off % size != 0) {
    throw PoolError(PoolErrc::out_of_range,
                    "misaligned atomic access at " + std::to_string(off));
  }
}

void PersistentPool::before_op() {
  if (s_->mode != PoolMode::crash_sim) return;
  const auto idx = s_->op_seq.fetch_add(1, std::memory_order_relaxed);
  if (s_->crash_at && !s_->frozen && idx == *s_->crash_at) {
    s_->frozen = s_->crash_image(s_->armed_policy);
  }
}

void PersistentPool::after_store(PoolOffset off, std::size_t len) {
  auto& sh = s_->shards[thread_slot()];
  sh.stores.fetch_add(1, std::memory_order_relaxed);
  sh.bytes.fetch_add(len, std::memory_order_relaxed);
  if (s_->tracing.load(std::memory_order_relaxed)) {
    std::lock_guard lk(s_->trace_mu);
    s_->trace.push_back({off, len});
  }
  if (s_->mode == PoolMode::crash_sim && len > 0) {
    for (auto l = off / kCacheLine; l <= (off + len - 1) / kCacheLine; ++l) {
      s_->dirty[l].store(1, std::memory_order_relaxed);
    }
  }
}

void PersistentPool::store(PoolOffset off, std::span<const std::byte> bytes) {
  check_range(off, bytes.size());
  before_op();
  std::memcpy(ptr(off), bytes.data(), bytes.size());
  after_store(off, bytes.size());
}

void PersistentPool::zero(PoolOffset off, std::size_t len) {
  check_range(off, len);
  before_op();
  std::memset(ptr(off), 0, len);
  after_store(off, len);
}

bool PersistentPool::cas_u32(PoolOffset off, std::uint32_t& expected,
                             std::uint32_t desired) {
  check_aligned(off, 4);
  std::atomic_ref<std::uint32_t> ref(*reinterpret_cast<std::uint32_t*>(ptr(off)));
  // Failed attempts never modify memory, so only successful ones count.
  std::uint32_t seen = ref.load(std::memory_order_relaxed);
  if (seen != expected) {
    expected = seen;
    return false;
  }
  before_op();
  if (ref.compare_exchange_strong(expected, desired, std::memory_order_acq_rel,
                                  std::memory_order_acquire)) {
    after_store(off, 4);
    return true;
  }
  return false;
}

bool PersistentPool::cas_u64(PoolOffset off, std::uint64_t& expected,
                             std::uint64_t desired) {
  check_aligned(off, 8);
  std::atomic_ref<std::uint64_t> ref(*reinterpret_cast<std::uint64_t*>(ptr(off)));
  std::uint64_t seen = ref.load(std::memory_order_relaxed);
  if (seen != expected) {
    expected = seen;
    return false;
  }
  before_op();
  if (ref.compare_exchange_strong(expected, desired, std::memory_order_acq_rel,
                                  std::memory_order_acquire)) {
    after_store(off, 8);
    return true;
  }
  return false;
}

void PersistentPool::flush(PoolOffset off, std::size_t len) {
  check_range(off, len);
  before_op();
  auto& sh = s_->shards[thread_slot()];
  sh.flushes.fetch_add(1, std::memory_order_relaxed);
  if (len == 0) return;
  const auto first = off / kCacheLine;
  const auto last = (off + len - 1) / kCacheLine;
  sh.lines.fetch_add(last - first + 1, std::memory_order_relaxed);
  if (s_->mode != PoolMode::crash_sim) return;
  std::lock_guard lk(s_->pending_mu);
  for (auto l = first; l <= last; ++l) {
    if (s_->dirty[l].exchange(0, std::memory_order_relaxed) == 0) continue;
    auto& snap = s_->pending[l];
    std::memcpy(snap.data(), s_->base + l * kCacheLine, kCacheLine);
  }
}

void PersistentPool::fence() {
  before_op();
  s_->shards[thread_slot()].fences.fetch_add(1, std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_seq_cst);
  if (s_->mode != PoolMode::crash_sim) return;
  std::lock_guard lk(s_->pending_mu);
  for (const auto& [line, snap] : s_->pending) {
    std::memcpy(s_->shadow.data() + line * kCacheLine, snap.data(), kCacheLine);
  }
  s_->pending.clear();
}

void PersistentPool::read(PoolOffset off, std::span<std::byte> out) const {
  check_range(off, out.size());
  std::memcpy(out.data(), ptr(off), out.size());
}

// ---- creation / open ---------------------------------------------------------

PersistentPool PersistentPool::create(const std::filesystem::path& path,
                                      std::size_t capacity, PoolMode mode) {
  if (capacity < kMinPoolCapacity) {
    throw PoolError(PoolErrc::capacity_too_small,
                    "pool capacity " + std::to_string(capacity) +
                        " below minimum " + std::to_string(kMinPoolCapacity));
  }
  capacity = round_up(capacity, 4096);

  std::array<std::byte, kCacheLine> header{};
  std::memcpy(header.data() + pl::kMagicOff, pl::kMagic, 8);
  const std::uint32_t ver = pl::kFormatVersion;
  std::memcpy(header.data() + pl::kFormatVersionOff, &ver, 4);
  header[pl::kCleanOff] = std::byte{1};
  header[pl::kGlobalVersionOff] = std::byte{0};
  const std::uint64_t alloc_handle = pl::kAllocStateOff;
  std::memcpy(header.data() + pl::kAllocStateHandleOff, &alloc_handle, 8);
  const std::uint64_t cap64 = capacity;
  std::memcpy(header.data() + pl::kCapacityOff, &cap64, 8);
  const std::uint64_t bump = pl::kDataStart;

  {
    const int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) io_fail("create " + path.string());
    if (::ftruncate(fd, static_cast<off_t>(capacity)) != 0) {
      ::close(fd);
      io_fail("ftruncate " + path.string());
    }
    if (::pwrite(fd, header.data(), header.size(), 0) != static_cast<ssize_t>(header.size()) ||
        ::pwrite(fd, &bump, 8, pl::kAllocStateOff + pl::kBumpOff) != 8) {
      ::close(fd);
      io_fail("write header " + path.string());
    }
    ::fsync(fd);
    ::close(fd);
  }
  return open(path, mode);
}

PersistentPool PersistentPool::open(const std::filesystem::path& path, PoolMode mode) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) {
    throw PoolError(PoolErrc::not_found, "pool file not found: " + path.string());
  }
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec || file_size < kMinPoolCapacity) {
    throw PoolError(PoolErrc::truncated, "pool file too small: " + path.string());
  }
  const int fd = ::open(path.c_str(), O_RDWR);
  if (fd < 0) io_fail("open " + path.string());

  std::array<std::byte, kCacheLine> header{};
  if (::pread(fd, header.data(), header.size(), 0) != static_cast<ssize_t>(header.size())) {
    ::close(fd);
    io_fail("read header " + path.string());
  }
  if (std::memcmp(header.data(), pl::kMagic, 8) != 0) {
    ::close(fd);
    throw PoolError(PoolErrc::bad_magic, "bad pool magic in " + path.string());
  }
  std::uint32_t ver = 0;
  std::memcpy(&ver, header.data() + pl::kFormatVersionOff, 4);
  if (ver != pl::kFormatVersion) {
    ::close(fd);
    throw PoolError(PoolErrc::bad_version,
                    "unsupported pool format version " + std::to_string(ver));
  }
  std::uint64_t capacity = 0;
  std::memcpy(&capacity, header.data() + pl::kCapacityOff, 8);
  if (capacity > file_size) {
    ::close(fd);
    throw PoolError(PoolErrc::truncated, "pool file shorter than recorded capacity");
  }

  if (mode == PoolMode::direct) {
    auto st = std::make_unique<State>();
    st->path = path;
    st->mode = mode;
    st->capacity = capacity;
    st->fd = fd;
    void* m = ::mmap(nullptr, capacity, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    if (m == MAP_FAILED) io_fail("mmap " + path.string());
    st->base = static_cast<std::byte*>(m);
    PersistentPool pool(std::move(st));
    pool.reconcile_in_flight();
    return pool;
  }

  std::vector<std::byte> image(capacity);
  std::size_t done = 0;
  while (done < capacity) {
    const auto n = ::pread(fd, image.data() + done, capacity - done, static_cast<off_t>(done));
    if (n <= 0) {
      ::close(fd);
      io_fail("read image " + path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  ::close(fd);
  return from_image(std::move(image), path, mode);
}

PersistentPool PersistentPool::from_image(std::vector<std::byte> image,
                                          std::filesystem::path path, PoolMode mode) {
  auto st = std::make_unique<State>();
  st->path = std::move(path);
  st->mode = mode;
  st->capacity = image.size();
  st->owned = make_buffer(image.size());
  st->base = st->owned.get();
  std::memcpy(st->base, image.data(), image.size());
  st->shadow = std::move(image);
  st->dirty = std::make_unique<std::atomic<std::uint8_t>[]>(st->lines());
  PersistentPool pool(std::move(st));
  pool.reconcile_in_flight();
  return pool;
}

void PersistentPool::persist_all() {
  before_op();
  std::atomic_thread_fence(std::memory_order_seq_cst);
  if (s_->mode != PoolMode::crash_sim) return;
  std::lock_guard lk(s_->pending_mu);
  std::memcpy(s_->shadow.data(), s_->base, s_->shadow.size());
  for (std::size_t l = 0; l < s_->lines(); ++l) s_->dirty[l].store(0, std::memory_order_relaxed);
  s_->pending.clear();
}

void PersistentPool::sync() {
  if (s_->mode == PoolMode::direct) {
    if (::msync(s_->base, s_->capacity, MS_SYNC) != 0) io_fail("msync");
    return;
  }
  const int fd = ::open(s_->path.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd < 0) io_fail("open " + s_->path.string());
  std::size_t done = 0;
  while (done < s_->shadow.size()) {
    const auto n = ::pwrite(fd, s_->shadow.data() + done, s_->shadow.size() - done,
                            static_cast<off_t>(done));
    if (n <= 0) {
      ::close(fd);
      io_fail("write image " + s_->path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

// ---- crash simulation -----------------------------------------------------------

std::uint64_t PersistentPool::persist_op_index() const {
  return s_->op_seq.load(std::memory_order_relaxed);
}

void PersistentPool::arm_crash(std::uint64_t index, CrashPolicy policy) {
  if (s_->mode != PoolMode::crash_sim) {
    throw PoolError(PoolErrc::wrong_mode, "arm_crash requires crash_sim mode");
  }
  s_->crash_at = index;
  s_->armed_policy = policy;
  s_->frozen.reset();
}

bool PersistentPool::crash_fired() const { return s_->frozen.has_value(); }

PersistentPool PersistentPool::crash(CrashPolicy policy) {
  if (s_->mode != PoolMode::crash_sim) {
    throw PoolError(PoolErrc::wrong_mode, "crash requires crash_sim mode");
  }
  auto image = s_->frozen ? *s_->frozen : s_->crash_image(policy);
  return from_image(std::move(image), s_->path, PoolMode::crash_sim);
}

PersistentPool PersistentPool::clone() const {
  if (s_->mode != PoolMode::crash_sim) {
    throw PoolError(PoolErrc::wrong_mode, "clone requires crash_sim mode");
  }
  auto st = std::make_unique<State>();
  st->path = s_->path;
  st->mode = s_->mode;
  st->capacity = s_->capacity;
  st->owned = make_buffer(s_->capacity);
  st->base = st->owned.get();
  std::memcpy(st->base, s_->base, s_->capacity);
  st->shadow = s_->shadow;
  st->dirty = std::make_unique<std::atomic<std::uint8_t>[]>(st->lines());
  for (std::size_t l = 0; l < st->lines(); ++l) {
    st->dirty[l].store(s_->dirty[l].load(std::memory_order_relaxed), std::memory_order_relaxed);
  }
  {
    std::lock_guard lk(s_->pending_mu);
    st->pending = s_->pending;
  }
  st->op_seq.store(s_->op_seq.load());
  st->open_ring_pending = s_->open_ring_pending;
  return PersistentPool(std::move(st));
}

std::vector<PoolOffset> PersistentPool::dirty_lines() const {
  std::vector<PoolOffset> out;
  if (s_->mode != PoolMode::crash_sim) return out;
  std::lock_guard lk(s_->pending_mu);
  for (std::size_t l = 0; l < s_->lines(); ++l) {
    if (s_->dirty[l].load(std::memory_order_relaxed) != 0 || s_->pending.count(l) != 0) {
      out.push_back(l * kCacheLine);
    }
  }
  return out;
}

std::span<const std::byte> PersistentPool::shadow() const {
  if (s_->mode != PoolMode::crash_sim) {
    throw PoolError(PoolErrc::wrong_mode, "shadow requires crash_sim mode");
  }
  return s_->shadow;
}

std::span<const std::byte> PersistentPool::image() const {
  return {s_->base, s_->capacity};
}

// ---- counters ----------------------------------------------------------------------

PersistCounters PersistentPool::counters() const {
  PersistCounters c;
  for (const auto& sh : s_->shards) {
    c.stores += sh.stores.load(std::memory_order_relaxed);
    c.bytes_stored += sh.bytes.load(std::memory_order_relaxed);
    c.flushes += sh.flushes.load(std::memory_order_relaxed);
    c.flushed_lines += sh.lines.load(std::memory_order_relaxed);
    c.fences += sh.fences.load(std::memory_order_relaxed);
  }
  return c;
}

PersistCounters PersistentPool::thread_counters() const {
  const auto& sh = s_->shards[thread_slot()];
  return {sh.stores.load(std::memory_order_relaxed), sh.bytes.load(std::memory_order_relaxed),
          sh.flushes.load(std::memory_order_relaxed), sh.lines.load(std::memory_order_relaxed),
          sh.fences.load(std::memory_order_relaxed)};
}

void PersistentPool::reset_counters() {
  for (auto& sh : s_->shards) {
    sh.stores = 0;
    sh.bytes = 0;
    sh.flushes = 0;
    sh.lines = 0;
    sh.fences = 0;
  }
}

void PersistentPool::set_clean(bool clean) {
  store_atomic<std::uint8_t>(pl::kCleanOff, clean ? 1 : 0);
  persist(pl::kCleanOff, 1);
}

void PersistentPool::set_global_version(std::uint8_t v) {
  store_atomic<std::uint8_t>(pl::kGlobalVersionOff, v);
  persist(pl::kGlobalVersionOff, 1);
}

// ---- allocator ------------------------------------------------------------------------

namespace {
constexpr PoolOffset kState = pl::kAllocStateOff;
constexpr PoolOffset kRec = pl::kAllocStateOff + pl::kInFlightOff;
constexpr PoolOffset kRing = pl::kAllocStateOff + pl::kRetireRingOff;
constexpr PoolOffset hdr(PoolOffset payload) { return payload - pl::kBlockHeader; }
}  // namespace

std::size_t PersistentPool::block_size(PoolOffset payload) const {
  return load<std::uint64_t>(hdr(payload) + pl::kBlockSizeOff);
}

std::optional<std::size_t> PersistentPool::ring_find(PoolOffset handle) const {
  for (std::size_t i = 0; i < pl::kRetireRingSlots; ++i) {
    const auto e = load<std::uint64_t>(kRing + i * 8);
    if (e != 0 && ring_handle(e) == handle) return i;
  }
  return std::nullopt;
}

std::vector<PoolOffset> PersistentPool::retired_handles() const {
  std::vector<PoolOffset> out;
  for (std::size_t i = 0; i < pl::kRetireRingSlots; ++i) {
    const auto e = load<std::uint64_t>(kRing + i * 8);
    if (e != 0) out.push_back(ring_handle(e));
  }
  return out;
}

void PersistentPool::ring_add_locked(PoolOffset entry) {
  for (std::size_t i = 0; i < pl::kRetireRingSlots; ++i) {
    const auto slot = kRing + i * 8;
    if (load<std::uint64_t>(slot) == 0) {
      store_atomic<std::uint64_t>(slot, entry);
      persist(slot, 8);
      return;
    }
  }
  throw PoolError(PoolErrc::out_of_space, "retire ring full");
}

void PersistentPool::push_free_locked(PoolOffset payload) {
  const auto head = load<std::uint64_t>(kState + pl::kFreeHeadOff);
  store_atomic<std::uint64_t>(hdr(payload) + pl::kBlockNextOff, head);
  store_atomic<std::uint64_t>(hdr(payload) + pl::kBlockTagOff, pl::kTagFree);
  persist(hdr(payload), pl::kBlockHeader);
  store_atomic<std::uint64_t>(kState + pl::kFreeHeadOff, payload);
  persist(kState + pl::kFreeHeadOff, 8);
}

void PersistentPool::free_chain_locked(PoolOffset head, std::size_t next_link_off) {
  // Nodes keep their payload (and thus the link) intact while freed.
  for (PoolOffset node = head; node != kNullOffset;) {
    const auto next = load<std::uint64_t>(node + next_link_off);
    push_free_locked(node);
    node = next;
  }
}

void PersistentPool::release_ring_slot_locked(std::size_t idx) {
  const auto slot = kRing + idx * 8;
  const auto entry = load<std::uint64_t>(slot);
  store_atomic<std::uint64_t>(kRec + kRecBlock, entry);
  store_atomic<std::uint64_t>(kRec + kRecAux, idx);
  store_atomic<std::uint64_t>(kRec + kRecOp, kOpFree);
  persist(kRec, kCacheLine);
  if (ring_is_chain(entry)) {
    free_chain_locked(ring_handle(entry), ring_link_off(entry));
  } else {
    push_free_locked(ring_handle(entry));
  }
  store_atomic<std::uint64_t>(slot, 0);
  persist(slot, 8);
  store_atomic<std::uint64_t>(kRec + kRecOp, kOpNone);
  persist(kRec, kCacheLine);
}

void PersistentPool::process_open_ring_locked() {
  if (!s_->open_ring_pending) return;
  s_->open_ring_pending = false;
  // Nothing from the previous run can still be referenced by a reader.
  for (std::size_t i = 0; i < pl::kRetireRingSlots; ++i) {
    if (load<std::uint64_t>(kRing + i * 8) != 0) release_ring_slot_locked(i);
  }
}

void PersistentPool::reconcile_in_flight() {
  std::lock_guard lk(s_->alloc_mu);
  s_->open_ring_pending = !retired_handles().empty();
  const auto op = load<std::uint64_t>(kRec + kRecOp);
  if (op == kOpNone) return;
  const auto block = load<std::uint64_t>(kRec + kRecBlock);
  const auto owner = load<std::uint64_t>(kRec + kRecOwner);
  const auto prev = load<std::uint64_t>(kRec + kRecPrev);
  const auto flags = load<std::uint64_t>(kRec + kRecFlags);
  const auto pred = load<std::uint64_t>(kRec + kRecPred);
  const auto aux = load<std::uint64_t>(kRec + kRecAux);

  if (op == kOpAlloc) {
    const bool published = load<std::uint64_t>(owner) == block;
    if (published) {
      if ((flags & kFlagRetirePrev) != 0 && prev != kNullOffset && !ring_find(prev)) {
        ring_add_locked(prev);
        s_->open_ring_pending = true;
      }
    } else if ((flags & kFlagFromFreeList) != 0) {
      const auto head = load<std::uint64_t>(kState + pl::kFreeHeadOff);
      const bool linked =
          pred == kNullOffset ? head == block
                              : load<std::uint64_t>(hdr(pred) + pl::kBlockNextOff) == block;
      if (!linked) push_free_locked(block);
    } else {
      // Carved only once the bump pointer moved past it.
      const auto bump = load<std::uint64_t>(kState + pl::kBumpOff);
      if (bump > hdr(block)) push_free_locked(block);
    }
  } else if (op == kOpFree) {
    // `block` holds the ring entry being released. Push whatever part of it
    // is not yet linked into the free list.
    std::unordered_set<PoolOffset> linked;
    for (PoolOffset cur = load<std::uint64_t>(kState + pl::kFreeHeadOff);
         cur != kNullOffset && linked.insert(cur).second;
         cur = load<std::uint64_t>(hdr(cur) + pl::kBlockNextOff)) {
    }
    const auto slot = kRing + aux * 8;
    if (load<std::uint64_t>(slot) == block) {
      if (ring_is_chain(block)) {
        for (PoolOffset node = ring_handle(block); node != kNullOffset;) {
          const auto next = load<std::uint64_t>(node + ring_link_off(block));
          if (linked.count(node) == 0) push_free_locked(node);
          node = next;
        }
      } else if (linked.count(ring_handle(block)) == 0) {
        push_free_locked(ring_handle(block));
      }
      store_atomic<std::uint64_t>(slot, 0);
      persist(slot, 8);
    }
  } else if (op == kOpDetach) {
    if (load<std::uint64_t>(owner) == kNullOffset && prev != kNullOffset && !ring_find(prev)) {
      ring_add_locked(ring_encode_chain(prev, aux));
      s_->open_ring_pending = true;
    }
  }
  store_atomic<std::uint64_t>(kRec + kRecOp, kOpNone);
  persist(kRec, kCacheLine);
}

PoolOffset PersistentPool::alloc_into(std::size_t size, PoolOffset owner_slot,
                                      const Initializer& init, bool retire_previous) {
  check_aligned(owner_slot, 8);
  std::lock_guard lk(s_->alloc_mu);
  process_open_ring_locked();
  size = round_up(std::max<std::size_t>(size, kCacheLine), kCacheLine);

  // First fit on the free list, without splitting, among blocks at most
  // twice the request.
  PoolOffset block = kNullOffset;
  PoolOffset pred = kNullOffset;
  for (PoolOffset cur = load<std::uint64_t>(kState + pl::kFreeHeadOff), prv = kNullOffset;
       cur != kNullOffset; prv = cur, cur = load<std::uint64_t>(hdr(cur) + pl::kBlockNextOff)) {
    const auto bs = block_size(cur);
    if (bs >= size && bs <= 2 * size) {
      block = cur;
      pred = prv;
      break;
    }
  }
  const bool from_free = block != kNullOffset;
  const auto bump = load<std::uint64_t>(kState + pl::kBumpOff);
  if (!from_free) {
    if (bump + pl::kBlockHeader + size > s_->capacity) {
      throw PoolError(PoolErrc::out_of_space,
                      "pool out of space allocating " + std::to_string(size) + " bytes");
    }
    block = bump + pl::kBlockHeader;
  }

  // 1. In-flight record; the op word is written last so a partially
  //    written line never looks active.
  store_atomic<std::uint64_t>(kRec + kRecBlock, block);
  store_atomic<std::uint64_t>(kRec + kRecOwner, owner_slot);
  store_atomic<std::uint64_t>(kRec + kRecPrev, load<std::uint64_t>(owner_slot));
  store_atomic<std::uint64_t>(kRec + kRecFlags, (retire_previous ? kFlagRetirePrev : 0) |
                                                    (from_free ? kFlagFromFreeList : 0));
  store_atomic<std::uint64_t>(kRec + kRecPred, pred);
  store_atomic<std::uint64_t>(kRec + kRecOp, kOpAlloc);
  persist(kRec, kCacheLine);

  // 2. Carve.
  if (from_free) {
    const auto next = load<std::uint64_t>(hdr(block) + pl::kBlockNextOff);
    const auto link = pred == kNullOffset ? kState + pl::kFreeHeadOff : hdr(pred) + pl::kBlockNextOff;
    store_atomic<std::uint64_t>(link, next);
    persist(link, 8);
    store_atomic<std::uint64_t>(hdr(block) + pl::kBlockTagOff, pl::kTagUsed);
    persist(hdr(block), pl::kBlockHeader);
    size = block_size(block);
  } else {
    store_atomic<std::uint64_t>(hdr(block) + pl::kBlockSizeOff, size);
    store_atomic<std::uint64_t>(hdr(block) + pl::kBlockNextOff, 0);
    store_atomic<std::uint64_t>(hdr(block) + pl::kBlockTagOff, pl::kTagUsed);
    persist(hdr(block), pl::kBlockHeader);
    store_atomic<std::uint64_t>(kState + pl::kBumpOff, block + size);
    persist(kState + pl::kBumpOff, 8);
  }

  // 3. Initialize.
  zero(block, size);
  persist(block, size);
  if (init) init(block);

  // 4. Publish.
  const auto prev = load<std::uint64_t>(owner_slot);
  store_atomic<std::uint64_t>(owner_slot, block);
  persist(owner_slot, 8);
  if (retire_previous && prev != kNullOffset) ring_add_locked(prev);

  store_atomic<std::uint64_t>(kRec + kRecOp, kOpNone);
  persist(kRec, kCacheLine);
  return block;
}

PoolOffset PersistentPool::alloc_detached(std::size_t size, const Initializer& init) {
  std::lock_guard lk(s_->alloc_mu);
  process_open_ring_locked();
  size = round_up(std::max<std::size_t>(size, kCacheLine), kCacheLine);
  const auto bump = load<std::uint64_t>(kState + pl::kBumpOff);
  if (bump + pl::kBlockHeader + size > s_->capacity) {
    throw PoolError(PoolErrc::out_of_space,
                    "pool out of space allocating " + std::to_string(size) + " bytes");
  }
  const PoolOffset block = bump + pl::kBlockHeader;
  store_atomic<std::uint64_t>(hdr(block) + pl::kBlockSizeOff, size);
  store_atomic<std::uint64_t>(hdr(block) + pl::kBlockNextOff, 0);
  store_atomic<std::uint64_t>(hdr(block) + pl::kBlockTagOff, pl::kTagDetached);
  persist(hdr(block), pl::kBlockHeader);
  store_atomic<std::uint64_t>(kState + pl::kBumpOff, block + size);
  persist(kState + pl::kBumpOff, 8);
  if (init) init(block);
  return block;
}

void PersistentPool::detach_chain(PoolOffset owner_slot, std::size_t next_link_off) {
  std::lock_guard lk(s_->alloc_mu);
  process_open_ring_locked();
  const auto prev = load<std::uint64_t>(owner_slot);
  if (prev == kNullOffset) return;
  store_atomic<std::uint64_t>(kRec + kRecOwner, owner_slot);
  store_atomic<std::uint64_t>(kRec + kRecPrev, prev);
  store_atomic<std::uint64_t>(kRec + kRecAux, next_link_off);
  store_atomic<std::uint64_t>(kRec + kRecOp, kOpDetach);
  persist(kRec, kCacheLine);

  store_atomic<std::uint64_t>(owner_slot, kNullOffset);
  persist(owner_slot, 8);
  ring_add_locked(ring_encode_chain(prev, next_link_off));

  store_atomic<std::uint64_t>(kRec + kRecOp, kOpNone);
  persist(kRec, kCacheLine);
}

void PersistentPool::release_retired(PoolOffset handle) {
  std::lock_guard lk(s_->alloc_mu);
  process_open_ring_locked();
  // Absent when open-time processing already released it.
  if (const auto idx = ring_find(handle)) release_ring_slot_locked(*idx);
}

AllocAudit PersistentPool::audit(std::span<const PoolOffset> owned) const {
  AllocAudit a;
  std::unordered_map<PoolOffset, int> refs;  // payload -> #sets containing it
  std::unordered_map<PoolOffset, std::uint64_t> carved;
  const auto bump = load<std::uint64_t>(kState + pl::kBumpOff);
  for (PoolOffset h = pl::kDataStart; h < bump;) {
    const auto payload = h + pl::kBlockHeader;
    const auto sz = load<std::uint64_t>(h + pl::kBlockSizeOff);
    carved[payload] = sz;
    a.carved_bytes += pl::kBlockHeader + sz;
    h = payload + sz;
  }
  auto account = [&](PoolOffset p, std::uint64_t& bucket) {
    auto it = carved.find(p);
    if (it == carved.end()) {
      a.unknown_owned.push_back(p);
      return;
    }
    if (++refs[p] > 1) {
      a.double_owned.push_back(p);
      return;
    }
    bucket += pl::kBlockHeader + it->second;
  };
  std::unordered_set<PoolOffset> seen_free;
  for (PoolOffset cur = load<std::uint64_t>(kState + pl::kFreeHeadOff); cur != kNullOffset;
       cur = load<std::uint64_t>(hdr(cur) + pl::kBlockNextOff)) {
    if (!seen_free.insert(cur).second) break;  // cycle guard
    account(cur, a.free_bytes);
  }
  for (std::size_t i = 0; i < pl::kRetireRingSlots; ++i) {
    const auto e = load<std::uint64_t>(kRing + i * 8);
    if (e == 0) continue;
    if (ring_is_chain(e)) {
      for (PoolOffset n = ring_handle(e); n != kNullOffset;
           n = load<std::uint64_t>(n + ring_link_off(e))) {
        if (seen_free.count(n) == 0) account(n, a.retired_bytes);
      }
    } else {
      account(ring_handle(e), a.retired_bytes);
    }
  }
  for (auto p : owned) account(p, a.owned_bytes);
  for (const auto& [p, sz] : carved) {
    if (refs.count(p) != 0) continue;
    if (load<std::uint64_t>(hdr(p) + pl::kBlockTagOff) == pl::kTagDetached) {
      a.detached_bytes += pl::kBlockHeader + sz;
    } else {
      a.leaked.push_back(p);
    }
  }
  std::sort(a.leaked.begin(), a.leaked.end());
  return a;
}

void PersistentPool::set_store_trace(bool on) {
  std::lock_guard lk(s_->trace_mu);
  s_->trace.clear();
  s_->tracing.store(on);
}

std::vector<StoreEvent> PersistentPool::store_trace() const {
  std::lock_guard lk(s_->trace_mu);
  return s_->trace;
}

}  // namespace dash
