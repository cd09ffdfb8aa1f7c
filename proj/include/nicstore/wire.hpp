#pragma once

// Fixed-layout little-endian wire format, one request or response per UDP
// datagram.
//
// Request:
//   off  0  u16 magic (0xD9A5)
//   off  2  u8  version (1)
//   off  3  u8  op {0 GET, 1 INSERT, 2 UPDATE, 3 DELETE, 4 RANGE, 5 PING}
//   off  4  u8  flags (bit0: cache hint present)
//   off  5  u8  hint bloom bit index 0
//   off  6  u8  hint bloom bit index 1
//   off  7  u8  hint bloom bit index 2
//   off  8  u8  hint bucket index
//   off  9  u64 request_id
//   off 17  u64 key
//   off 25  u64 value (INSERT/UPDATE) | u16 max_count (RANGE) | absent
//
// Response:
//   off  0  u16 magic
//   off  2  u8  version
//   off  3  u8  op (echoed)
//   off  4  u8  status {0 OK, 1 NOT_FOUND, 2 RETRY, 3 MALFORMED,
//                       4 END_OF_RANGE}
//   off  5  u64 request_id (echoed)
//   off 13  u64 value | u16 pair_count + pair_count * (u64 key, u64 value)
//
// A RANGE reply spans ceil(n/64) packets of at most 64 pairs; the final
// packet is the one carrying fewer than 64 pairs, or the one that
// completes max_count. Packets with unknown magic or version are dropped
// silently; any other malformed field yields a MALFORMED classification.

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <vector>

#include "nicstore/message.hpp"

namespace nicstore {

inline constexpr std::uint16_t kWireMagic = 0xD9A5;
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kMaxRequestBytes = 64;
inline constexpr std::size_t kMaxRangePairsPerPacket = 64;
inline constexpr std::size_t kMaxResponsePayloadBytes = 1472;  // 1500 MTU

namespace wire_detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

template <typename T>
T get(std::span<const std::uint8_t> in, std::size_t off) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(in[off + i]) << (8 * i);
  }
  return v;
}

}  // namespace wire_detail

inline std::size_t request_size_for_op(OpType op) {
  switch (op) {
    case OpType::kInsert:
    case OpType::kUpdate:
      return 33;
    case OpType::kRange:
      return 27;
    case OpType::kGet:
    case OpType::kDelete:
    case OpType::kPing:
      return 25;
  }
  return 0;
}

inline std::vector<std::uint8_t> encode_request(const Request& req) {
  std::vector<std::uint8_t> out;
  out.reserve(kMaxRequestBytes);
  wire_detail::put<std::uint16_t>(out, kWireMagic);
  out.push_back(kWireVersion);
  out.push_back(static_cast<std::uint8_t>(req.op));
  out.push_back(req.has_hint ? 0x01 : 0x00);
  out.push_back(req.hint.bloom_bits[0]);
  out.push_back(req.hint.bloom_bits[1]);
  out.push_back(req.hint.bloom_bits[2]);
  out.push_back(req.hint.bucket);
  wire_detail::put<std::uint64_t>(out, req.request_id);
  wire_detail::put<std::uint64_t>(out, req.key);
  if (req.op == OpType::kInsert || req.op == OpType::kUpdate) {
    wire_detail::put<std::uint64_t>(out, req.value);
  } else if (req.op == OpType::kRange) {
    wire_detail::put<std::uint16_t>(out, req.max_count);
  }
  return out;
}

enum class DecodeError : std::uint8_t {
  kDrop,       // unknown magic/version: silently ignored
  kMalformed,  // structurally broken but addressable
};

struct DecodedRequest {
  Request request;
  // Set when the header was readable: MALFORMED responses echo it.
  std::optional<std::uint64_t> request_id;
};

inline std::optional<DecodedRequest> decode_request(
    std::span<const std::uint8_t> in, DecodeError& error) {
  error = DecodeError::kDrop;
  if (in.size() < 25 || in.size() > kMaxRequestBytes) return std::nullopt;
  if (wire_detail::get<std::uint16_t>(in, 0) != kWireMagic) {
    return std::nullopt;
  }
  if (in[2] != kWireVersion) return std::nullopt;

  DecodedRequest out;
  out.request_id = wire_detail::get<std::uint64_t>(in, 9);
  error = DecodeError::kMalformed;
  const std::uint8_t op_raw = in[3];
  if (op_raw > static_cast<std::uint8_t>(OpType::kPing)) return std::nullopt;
  const OpType op = static_cast<OpType>(op_raw);
  if (in.size() != request_size_for_op(op)) return std::nullopt;

  const std::uint8_t flags = in[4];
  if ((flags & ~0x01u) != 0) return std::nullopt;

  Request& req = out.request;
  req.op = op;
  req.has_hint = (flags & 0x01u) != 0;
  req.hint.bloom_bits = {in[5], in[6], in[7]};
  req.hint.bucket = in[8];
  if (req.has_hint && req.hint.bucket >= HotCache::kBuckets) {
    return std::nullopt;
  }
  req.request_id = *out.request_id;
  req.key = wire_detail::get<std::uint64_t>(in, 17);
  if (op != OpType::kPing && req.key > kMaxValidKey) return std::nullopt;
  if (op == OpType::kInsert || op == OpType::kUpdate) {
    req.value = wire_detail::get<std::uint64_t>(in, 25);
  } else if (op == OpType::kRange) {
    req.max_count = wire_detail::get<std::uint16_t>(in, 25);
    if (req.max_count < 1) return std::nullopt;
  }
  return out;
}

// Encodes one response packet. RANGE responses must be pre-chunked to at
// most kMaxRangePairsPerPacket pairs.
inline std::vector<std::uint8_t> encode_response(const Response& resp) {
  std::vector<std::uint8_t> out;
  out.reserve(32 + resp.pairs.size() * 16);
  wire_detail::put<std::uint16_t>(out, kWireMagic);
  out.push_back(kWireVersion);
  out.push_back(static_cast<std::uint8_t>(resp.op));
  out.push_back(static_cast<std::uint8_t>(resp.status));
  wire_detail::put<std::uint64_t>(out, resp.request_id);
  if (resp.op == OpType::kRange) {
    if (resp.pairs.size() > kMaxRangePairsPerPacket) {
      throw std::invalid_argument("range response exceeds 64 pairs");
    }
    wire_detail::put<std::uint16_t>(
        out, static_cast<std::uint16_t>(resp.pairs.size()));
    for (const RangePair& p : resp.pairs) {
      wire_detail::put<std::uint64_t>(out, p.key);
      wire_detail::put<std::uint64_t>(out, p.value);
    }
  } else {
    wire_detail::put<std::uint64_t>(out, resp.value);
  }
  return out;
}

inline std::optional<Response> decode_response(
    std::span<const std::uint8_t> in) {
  if (in.size() < 13) return std::nullopt;
  if (wire_detail::get<std::uint16_t>(in, 0) != kWireMagic) {
    return std::nullopt;
  }
  if (in[2] != kWireVersion) return std::nullopt;
  if (in[3] > static_cast<std::uint8_t>(OpType::kPing)) return std::nullopt;
  if (in[4] > static_cast<std::uint8_t>(Status::kEndOfRange)) {
    return std::nullopt;
  }

  Response resp;
  resp.op = static_cast<OpType>(in[3]);
  resp.status = static_cast<Status>(in[4]);
  resp.request_id = wire_detail::get<std::uint64_t>(in, 5);
  if (resp.op == OpType::kRange) {
    if (in.size() < 15) return std::nullopt;
    const std::uint16_t count = wire_detail::get<std::uint16_t>(in, 13);
    if (count > kMaxRangePairsPerPacket) return std::nullopt;
    if (in.size() != 15 + static_cast<std::size_t>(count) * 16) {
      return std::nullopt;
    }
    resp.pairs.reserve(count);
    for (std::uint16_t i = 0; i < count; ++i) {
      const std::size_t off = 15 + static_cast<std::size_t>(i) * 16;
      resp.pairs.push_back({wire_detail::get<std::uint64_t>(in, off),
                            wire_detail::get<std::uint64_t>(in, off + 8)});
    }
  } else {
    if (in.size() != 21) return std::nullopt;
    resp.value = wire_detail::get<std::uint64_t>(in, 13);
  }
  return resp;
}

// Splits an engine response into wire-sized packets. Non-final RANGE
// chunks carry OK; the final chunk carries the engine's status.
inline std::vector<std::vector<std::uint8_t>> encode_response_packets(
    const Response& resp) {
  std::vector<std::vector<std::uint8_t>> packets;
  if (resp.op != OpType::kRange || resp.status == Status::kMalformed ||
      resp.status == Status::kRetry) {
    Response single = resp;
    if (resp.op == OpType::kRange &&
        single.pairs.size() > kMaxRangePairsPerPacket) {
      single.pairs.clear();
    }
    packets.push_back(encode_response(single));
    return packets;
  }
  std::size_t emitted = 0;
  do {
    const std::size_t n = std::min(kMaxRangePairsPerPacket,
                                   resp.pairs.size() - emitted);
    Response chunk;
    chunk.op = resp.op;
    chunk.request_id = resp.request_id;
    chunk.pairs.assign(resp.pairs.begin() + emitted,
                       resp.pairs.begin() + emitted + n);
    emitted += n;
    chunk.status = emitted >= resp.pairs.size() ? resp.status : Status::kOk;
    packets.push_back(encode_response(chunk));
  } while (emitted < resp.pairs.size());
  return packets;
}

}  // namespace nicstore
