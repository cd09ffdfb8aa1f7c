#pragma once

// Epoch-based reclamation driven by per-thread request counters. Retiring
// an object snapshots every thread's counter; the object is freed only
// after each thread has moved past its snapshot, i.e. finished the request
// it may have been inside when the object became unreachable.

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <vector>

namespace nicstore {

class EpochManager {
 public:
  explicit EpochManager(std::size_t thread_count)
      : counters_(thread_count) {}

  std::size_t thread_count() const { return counters_.size(); }

  // Request boundary (or idle heartbeat) for thread `tid`.
  void advance(std::size_t tid) {
    counters_[tid].v.fetch_add(1, std::memory_order_acq_rel);
  }

  std::uint64_t counter(std::size_t tid) const {
    return counters_[tid].v.load(std::memory_order_acquire);
  }

  // The object behind `free_fn` must already be unreachable from the
  // current root.
  void retire(std::function<void()> free_fn) {
    Retired r;
    r.free_fn = std::move(free_fn);
    r.snapshot.reserve(counters_.size());
    for (const auto& c : counters_) {
      r.snapshot.push_back(c.v.load(std::memory_order_acquire));
    }
    std::lock_guard<std::mutex> lock(mutex_);
    retired_.push_back(std::move(r));
  }

  // Frees every retired object whose snapshot all threads have passed.
  std::size_t collect() {
    std::vector<Retired> ready;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      for (std::size_t i = 0; i < retired_.size();) {
        if (safe(retired_[i])) {
          ready.push_back(std::move(retired_[i]));
          retired_[i] = std::move(retired_.back());
          retired_.pop_back();
        } else {
          ++i;
        }
      }
    }
    for (auto& r : ready) r.free_fn();
    freed_.fetch_add(ready.size(), std::memory_order_relaxed);
    return ready.size();
  }

  std::size_t pending() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return retired_.size();
  }

  std::uint64_t freed_total() const {
    return freed_.load(std::memory_order_relaxed);
  }

  // Test hook: free everything regardless of counters. Only valid once no
  // reader can still hold a reference (e.g. after all threads joined).
  std::size_t drain_unsafe() {
    std::vector<Retired> all;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      all.swap(retired_);
    }
    for (auto& r : all) r.free_fn();
    freed_.fetch_add(all.size(), std::memory_order_relaxed);
    return all.size();
  }

 private:
  struct alignas(64) Counter {
    std::atomic<std::uint64_t> v{0};
  };
  struct Retired {
    std::function<void()> free_fn;
    std::vector<std::uint64_t> snapshot;
  };

  bool safe(const Retired& r) const {
    for (std::size_t t = 0; t < counters_.size(); ++t) {
      if (counters_[t].v.load(std::memory_order_acquire) <= r.snapshot[t]) {
        return false;
      }
    }
    return true;
  }

  std::vector<Counter> counters_;
  mutable std::mutex mutex_;
  std::vector<Retired> retired_;
  std::atomic<std::uint64_t> freed_{0};
};

}  // namespace nicstore
