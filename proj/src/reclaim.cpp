#include "dash/reclaim.hpp"

#include <stdexcept>
#include <unordered_map>

namespace dash {

namespace {
std::atomic<std::uint64_t> next_uid{1};
}

EpochManager::EpochManager(FreeFn free_fn)
    : uid_(next_uid.fetch_add(1)), free_fn_(std::move(free_fn)) {}

EpochManager::~EpochManager() = default;

EpochManager::Slot& EpochManager::my_slot() {
  // Managers are identified by a never-reused id so a stale cache entry for
  // a destroyed manager cannot alias a new one.
  thread_local std::unordered_map<std::uint64_t, std::size_t> cache;
  if (auto it = cache.find(uid_); it != cache.end()) return slots_[it->second];
  for (std::size_t i = 0; i < kMaxThreads; ++i) {
    bool expected = false;
    if (slots_[i].claimed.compare_exchange_strong(expected, true)) {
      cache.emplace(uid_, i);
      return slots_[i];
    }
  }
  throw std::runtime_error("epoch manager: too many threads");
}

EpochManager::Guard EpochManager::enter() {
  auto& s = my_slot();
  if (s.depth++ == 0) {
    auto e = global_.load(std::memory_order_seq_cst);
    s.state.store((e << 1) | 1, std::memory_order_seq_cst);
    // Re-publish until the pinned epoch is current, so a concurrent advance
    // cannot miss this thread.
    while (true) {
      const auto now = global_.load(std::memory_order_seq_cst);
      if (now == e) break;
      e = now;
      s.state.store((e << 1) | 1, std::memory_order_seq_cst);
    }
    if (++s.enters % kDrainInterval == 0) {
      s.depth = 0;
      s.state.store(0, std::memory_order_release);
      try_advance_and_drain();
      s.depth = 1;
      e = global_.load(std::memory_order_seq_cst);
      s.state.store((e << 1) | 1, std::memory_order_seq_cst);
      while (global_.load(std::memory_order_seq_cst) != e) {
        e = global_.load(std::memory_order_seq_cst);
        s.state.store((e << 1) | 1, std::memory_order_seq_cst);
      }
    }
  }
  return Guard(this);
}

void EpochManager::exit() {
  auto& s = my_slot();
  if (--s.depth == 0) s.state.store(0, std::memory_order_release);
}

void EpochManager::retire(std::uint64_t handle, std::uint32_t tag) {
  std::lock_guard lk(mu_);
  lists_[global_.load(std::memory_order_acquire) % 3].push_back({handle, tag});
}

std::size_t EpochManager::try_advance_and_drain() {
  std::vector<Item> ready;
  {
    std::lock_guard lk(mu_);
    const auto e = global_.load(std::memory_order_seq_cst);
    for (const auto& s : slots_) {
      const auto st = s.state.load(std::memory_order_seq_cst);
      if ((st & 1) != 0 && (st >> 1) != e) return 0;
    }
    // Every pinned thread has observed e, so nothing retired at e - 1 or
    // earlier is still reachable.
    global_.store(e + 1, std::memory_order_seq_cst);
    ready.swap(lists_[(e + 2) % 3]);
  }
  for (const auto& it : ready) free_fn_(it.handle, it.tag);
  return ready.size();
}

std::size_t EpochManager::drain_all() {
  std::size_t freed = 0;
  for (int i = 0; i < 4 && pending() > 0; ++i) freed += try_advance_and_drain();
  return freed;
}

std::size_t EpochManager::pending() const {
  std::lock_guard lk(mu_);
  return lists_[0].size() + lists_[1].size() + lists_[2].size();
}

}  // namespace dash
