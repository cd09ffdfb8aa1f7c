#pragma once

// Per-leaf append log absorbing writes on the device side. Multi-producer
// via the two-counter protocol: a slot is reserved with one atomic
// increment, the value is written before the key, and a second counter is
// bumped after the write. Readers scan per-slot: a visible key implies a
// valid value, so lookups never wait on stragglers.

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "nicstore/common.hpp"

namespace nicstore {

struct BufferEntry {
  Key key = kKeySentinel;
  Value value = 0;
  OpTag tag = OpTag::kInsert;
};

class InsertBuffer {
 public:
  enum class AppendStatus : std::uint8_t { kOk, kFull };

  struct AppendResult {
    AppendStatus status = AppendStatus::kFull;
    std::uint32_t slot = 0;
    bool filled_last_slot = false;  // caller must emit exactly one patch
  };

  explicit InsertBuffer(std::uint32_t capacity)
      : capacity_(capacity), slots_(new Slot[capacity]) {}

  std::uint32_t capacity() const { return capacity_; }

  AppendResult append(Key key, Value value, OpTag tag) {
    // Bounded reserve: the counter never exceeds capacity, so a concurrent
    // reset cannot be undone by a racing failed append.
    std::uint32_t slot = reserve_.load(std::memory_order_acquire);
    do {
      if (slot >= capacity_) return {AppendStatus::kFull, 0, false};
    } while (!reserve_.compare_exchange_weak(slot, slot + 1,
                                             std::memory_order_acq_rel,
                                             std::memory_order_acquire));
    Slot& s = slots_[slot];
    s.value.store(value, std::memory_order_relaxed);
    s.tag.store(static_cast<std::uint8_t>(tag), std::memory_order_relaxed);
    s.key.store(key, std::memory_order_release);
    commit_.fetch_add(1, std::memory_order_release);
    return {AppendStatus::kOk, slot, slot == capacity_ - 1};
  }

  // Newest-to-oldest scan; the first match wins (last-writer-wins).
  std::optional<BufferEntry> lookup(Key key) const {
    std::uint32_t upper = reserve_.load(std::memory_order_acquire);
    if (upper > capacity_) upper = capacity_;
    for (std::uint32_t i = upper; i-- > 0;) {
      const Slot& s = slots_[i];
      if (s.key.load(std::memory_order_acquire) != key) continue;
      BufferEntry e;
      e.key = key;
      e.value = s.value.load(std::memory_order_relaxed);
      e.tag = static_cast<OpTag>(s.tag.load(std::memory_order_relaxed));
      return e;
    }
    return std::nullopt;
  }

  // All currently visible entries in slot (commit) order. Skips slots whose
  // key has not been published yet.
  std::vector<BufferEntry> visible_entries() const {
    std::vector<BufferEntry> out;
    std::uint32_t upper = reserve_.load(std::memory_order_acquire);
    if (upper > capacity_) upper = capacity_;
    out.reserve(upper);
    for (std::uint32_t i = 0; i < upper; ++i) {
      const Slot& s = slots_[i];
      const Key k = s.key.load(std::memory_order_acquire);
      if (k == kKeySentinel) continue;
      out.push_back({k, s.value.load(std::memory_order_relaxed),
                     static_cast<OpTag>(s.tag.load(std::memory_order_relaxed))});
    }
    return out;
  }

  std::uint32_t committed() const {
    return commit_.load(std::memory_order_acquire);
  }
  std::uint32_t reserved() const {
    const std::uint32_t r = reserve_.load(std::memory_order_acquire);
    return r > capacity_ ? capacity_ : r;
  }

  bool sealed() const { return sealed_.load(std::memory_order_acquire); }
  void seal() { sealed_.store(true, std::memory_order_release); }

  // CLEAR_BUFFER: returns the buffer to the empty, unsealed state. Only
  // valid once all producers of the previous fill have committed.
  void reset() {
    for (std::uint32_t i = 0; i < capacity_; ++i) {
      slots_[i].key.store(kKeySentinel, std::memory_order_relaxed);
    }
    commit_.store(0, std::memory_order_relaxed);
    sealed_.store(false, std::memory_order_relaxed);
    reserve_.store(0, std::memory_order_release);
  }

  // Device-domain byte footprint (cost accounting / Table-1 style stats).
  std::size_t device_bytes() const {
    return 16 + static_cast<std::size_t>(capacity_) * 17;
  }

 private:
  struct Slot {
    std::atomic<Key> key{kKeySentinel};
    std::atomic<Value> value{0};
    std::atomic<std::uint8_t> tag{0};
  };

  std::uint32_t capacity_;
  std::unique_ptr<Slot[]> slots_;
  std::atomic<std::uint32_t> reserve_{0};
  std::atomic<std::uint32_t> commit_{0};
  std::atomic<bool> sealed_{false};
};

}  // namespace nicstore
