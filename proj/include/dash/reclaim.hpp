#pragma once

// Epoch-based reclamation. Threads pin the current epoch for the duration
// of an operation; retired handles are released once the global epoch has
// moved two steps past the epoch they were retired in.

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <vector>

namespace dash {

class EpochManager {
 public:
  using FreeFn = std::function<void(std::uint64_t handle, std::uint32_t tag)>;

  static constexpr std::size_t kMaxThreads = 512;
  static constexpr std::uint32_t kDrainInterval = 1024;

  explicit EpochManager(FreeFn free_fn);
  ~EpochManager();
  EpochManager(const EpochManager&) = delete;
  EpochManager& operator=(const EpochManager&) = delete;

  class Guard {
   public:
    Guard(Guard&& o) noexcept : mgr_(o.mgr_) { o.mgr_ = nullptr; }
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;
    Guard& operator=(Guard&&) = delete;
    ~Guard() {
      if (mgr_ != nullptr) mgr_->exit();
    }

   private:
    friend class EpochManager;
    explicit Guard(EpochManager* m) : mgr_(m) {}
    EpochManager* mgr_;
  };

  /// Pins the calling thread. Nested guards on one thread are allowed.
  [[nodiscard]] Guard enter();

  void retire(std::uint64_t handle, std::uint32_t tag);

  /// Advances the epoch if every pinned thread has observed it, then frees
  /// whatever became safe. Returns the number of handles freed.
  std::size_t try_advance_and_drain();

  /// Repeats `try_advance_and_drain` until nothing is pending or no
  /// progress is possible.
  std::size_t drain_all();

  [[nodiscard]] std::uint64_t epoch() const { return global_.load(std::memory_order_acquire); }
  [[nodiscard]] std::size_t pending() const;

 private:
  struct alignas(64) Slot {
    std::atomic<std::uint64_t> state{0};  // 0 idle, else (epoch << 1) | 1
    std::atomic<bool> claimed{false};
    std::uint32_t depth = 0;
    std::uint32_t enters = 0;
  };
  struct Item {
    std::uint64_t handle;
    std::uint32_t tag;
  };

  Slot& my_slot();
  void exit();

  const std::uint64_t uid_;
  FreeFn free_fn_;
  std::atomic<std::uint64_t> global_{2};
  std::array<Slot, kMaxThreads> slots_;
  mutable std::mutex mu_;
  std::array<std::vector<Item>, 3> lists_;
};

}  // namespace dash
