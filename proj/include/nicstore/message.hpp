#pragma once

// Decoded request/response messages shared by the engine, the wire codec
// and the client library.

#include <cstdint>
#include <vector>

#include "nicstore/common.hpp"
#include "nicstore/hot_cache.hpp"

namespace nicstore {

enum class OpType : std::uint8_t {
  kGet = 0,
  kInsert = 1,
  kUpdate = 2,
  kDelete = 3,
  kRange = 4,
  kPing = 5,
};

enum class Status : std::uint8_t {
  kOk = 0,
  kNotFound = 1,
  kRetry = 2,
  kMalformed = 3,
  kEndOfRange = 4,
};

struct Request {
  OpType op = OpType::kGet;
  std::uint64_t request_id = 0;
  Key key = 0;
  Value value = 0;
  std::uint16_t max_count = 0;  // RANGE only
  bool has_hint = false;
  CacheHint hint{};
};

struct RangePair {
  Key key = 0;
  Value value = 0;
};

struct Response {
  OpType op = OpType::kGet;
  Status status = Status::kOk;
  std::uint64_t request_id = 0;
  Value value = 0;
  std::vector<RangePair> pairs;  // RANGE only
  std::uint32_t leaf_descents = 0;  // engine metadata, not on the wire
};

}  // namespace nicstore
