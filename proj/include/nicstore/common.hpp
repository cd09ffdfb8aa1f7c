#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace nicstore {

using Key = std::uint64_t;
using Value = std::uint64_t;

// UINT64_MAX is reserved as a sentinel (pivot padding, empty buffer slots).
inline constexpr Key kKeySentinel = std::numeric_limits<Key>::max();
inline constexpr Key kMaxValidKey = kKeySentinel - 1;

// Device-domain layout constants.
inline constexpr std::size_t kSegmentsPerInner = 7;
inline constexpr std::size_t kMaxPivotsPerSegment = 128;
inline constexpr std::size_t kDefaultLeafCapacity = 128;
inline constexpr std::size_t kDefaultBufferCapacity = 16;
inline constexpr std::size_t kLineBytes = 64;
inline constexpr std::size_t kKeysPerLine = kLineBytes / sizeof(Key);

enum class OpTag : std::uint8_t {
  kInsert = 0,
  kUpdate = 1,
  kDelete = 2,
};

// Fatal inconsistency between host and device state. Never swallowed.
class ProtocolFault : public std::runtime_error {
 public:
  explicit ProtocolFault(const std::string& what) : std::runtime_error(what) {}
};

class CorruptionError : public std::runtime_error {
 public:
  explicit CorruptionError(const std::string& what) : std::runtime_error(what) {}
};

// splitmix64 finalizer. Used for steering, cache hints and seed derivation.
inline std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent mixer (murmur3 finalizer constants) for the alternate
// steering scheme.
inline std::uint64_t mix64_alt(std::uint64_t x) noexcept {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ull;
  return x ^ (x >> 33);
}

}  // namespace nicstore
