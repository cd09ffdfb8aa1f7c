#pragma once

// Per-traverser hot-entry cache: a 256-bit, three-probe Bloom filter
// guarding 24 buckets of 4 KV pairs (96 entries). Clients precompute the
// bloom bit indices and the bucket index and ship them in the request, so
// the traverser does one hash-free probe. Invalidation clears the bucket
// entry but leaves bloom bits set; the filter is rebuilt from live bucket
// contents once stale bits would otherwise saturate it.

#include <array>
#include <cstdint>
#include <optional>

#include "nicstore/common.hpp"
#include "nicstore/cost_model.hpp"

namespace nicstore {

struct CacheHint {
  std::array<std::uint8_t, 3> bloom_bits{};  // indices into 256 bits
  std::uint8_t bucket = 0;                   // 0..23
};

class HotCache {
 public:
  static constexpr std::size_t kBloomBits = 256;
  static constexpr std::size_t kBuckets = 24;
  static constexpr std::size_t kWays = 4;
  static constexpr std::size_t kCapacity = kBuckets * kWays;  // 96
  static constexpr std::uint32_t kRebuildThreshold = 4 * kCapacity;

  explicit HotCache(std::uint64_t seed = 1) : rng_state_(seed | 1) {}

  // Bloom-negative probes miss without touching a bucket.
  std::optional<Value> lookup(Key key, const CacheHint& hint,
                              AccessTrace* trace = nullptr) {
    record_access(trace, AccessClass::kLocalL1);  // filter line
    if (!bloom_test(hint)) {
      ++stats_.bloom_negative;
      return std::nullopt;
    }
    record_access(trace, AccessClass::kLocalL1);  // bucket line
    ++stats_.bucket_probes;
    const auto& bucket = buckets_[hint.bucket % kBuckets];
    for (const Entry& e : bucket) {
      if (e.key == key) {
        ++stats_.hits;
        return e.value;
      }
    }
    ++stats_.false_positives;
    return std::nullopt;
  }

  void admit(Key key, Value value, const CacheHint& hint) {
    auto& bucket = buckets_[hint.bucket % kBuckets];
    std::size_t victim = kWays;
    for (std::size_t i = 0; i < kWays; ++i) {
      if (bucket[i].key == key) {
        victim = i;  // refresh in place
        break;
      }
      if (victim == kWays && bucket[i].key == kKeySentinel) victim = i;
    }
    if (victim == kWays) victim = next_random() % kWays;
    bucket[victim] = Entry{key, value, hint};
    bloom_set(hint);
    if (++inserts_since_rebuild_ > kRebuildThreshold) rebuild_bloom();
  }

  void invalidate(Key key, const CacheHint& hint) {
    auto& bucket = buckets_[hint.bucket % kBuckets];
    for (Entry& e : bucket) {
      if (e.key == key) {
        e = Entry{};
        ++stats_.invalidations;
        return;
      }
    }
  }

  bool bloom_test(const CacheHint& hint) const {
    for (const std::uint8_t b : hint.bloom_bits) {
      if ((bloom_[b >> 6] & (1ull << (b & 63))) == 0) return false;
    }
    return true;
  }

  std::size_t live_entries() const {
    std::size_t n = 0;
    for (const auto& bucket : buckets_) {
      for (const Entry& e : bucket) {
        if (e.key != kKeySentinel) ++n;
      }
    }
    return n;
  }

  struct Stats {
    std::uint64_t hits = 0;
    std::uint64_t bloom_negative = 0;
    std::uint64_t bucket_probes = 0;
    std::uint64_t false_positives = 0;
    std::uint64_t invalidations = 0;
    std::uint64_t bloom_rebuilds = 0;
  };
  const Stats& stats() const { return stats_; }

  void clear() {
    bloom_.fill(0);
    for (auto& bucket : buckets_) bucket.fill(Entry{});
    inserts_since_rebuild_ = 0;
  }

 private:
  struct Entry {
    Key key = kKeySentinel;
    Value value = 0;
    CacheHint hint{};
  };

  void bloom_set(const CacheHint& hint) {
    for (const std::uint8_t b : hint.bloom_bits) {
      bloom_[b >> 6] |= 1ull << (b & 63);
    }
  }

  void rebuild_bloom() {
    bloom_.fill(0);
    for (const auto& bucket : buckets_) {
      for (const Entry& e : bucket) {
        if (e.key != kKeySentinel) bloom_set(e.hint);
      }
    }
    inserts_since_rebuild_ = 0;
    ++stats_.bloom_rebuilds;
  }

  std::uint64_t next_random() {
    rng_state_ = mix64(rng_state_);
    return rng_state_;
  }

  std::array<std::uint64_t, kBloomBits / 64> bloom_{};
  std::array<std::array<Entry, kWays>, kBuckets> buckets_{};
  std::uint32_t inserts_since_rebuild_ = 0;
  std::uint64_t rng_state_;
  Stats stats_{};
};

}  // namespace nicstore
