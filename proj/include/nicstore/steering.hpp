#pragma once

// Request steering: a fixed 64-bit mix of the key selects the traverser's
// UDP port, and the same mix yields the cache hint (three 8-bit bloom bit
// slices plus a fourth slice for the bucket), so clients compute exactly
// one hash per request. The alternate scheme uses an independent mixer and
// carries no hint.

#include <cstdint>

#include "nicstore/common.hpp"
#include "nicstore/hot_cache.hpp"

namespace nicstore {

struct SteeringScheme {
  std::uint16_t base_port = 18500;
  std::uint32_t thread_count = 176;
  bool alternate = false;

  std::uint64_t mix(Key key) const {
    return alternate ? mix64_alt(key) : mix64(key);
  }

  std::uint16_t port_for_key(Key key) const {
    return static_cast<std::uint16_t>(base_port + mix(key) % thread_count);
  }
};

// Hint fields derived from the primary mix. Only meaningful for requests
// routed by the primary scheme; the alternate scheme strips hints.
inline CacheHint hint_for_key(Key key) {
  const std::uint64_t h = mix64(key);
  CacheHint hint;
  hint.bloom_bits[0] = static_cast<std::uint8_t>(h);
  hint.bloom_bits[1] = static_cast<std::uint8_t>(h >> 8);
  hint.bloom_bits[2] = static_cast<std::uint8_t>(h >> 16);
  hint.bucket = static_cast<std::uint8_t>((h >> 24) % HotCache::kBuckets);
  return hint;
}

}  // namespace nicstore
