#pragma once

// Memory-access accounting along request paths plus the analytic
// latency/throughput model. Results are wall-clock independent: the model
// multiplies per-class access counts by measured per-class latencies.

#include <array>
#include <cstdint>
#include <string_view>

#include "nicstore/common.hpp"

namespace nicstore {

enum class AccessClass : std::uint8_t {
  kDeviceMemory = 0,  // NIC-side DRAM line
  kHostDma = 1,       // DMA round trip to host memory
  kSharedL3 = 2,      // device shared cache
  kLocalL1 = 3,       // thread-private line (bloom filter, cache bucket)
};
inline constexpr std::size_t kAccessClassCount = 4;

inline std::string_view access_class_name(AccessClass c) {
  switch (c) {
    case AccessClass::kDeviceMemory: return "device_memory";
    case AccessClass::kHostDma: return "host_dma";
    case AccessClass::kSharedL3: return "shared_l3";
    case AccessClass::kLocalL1: return "local_l1";
  }
  return "?";
}

struct LatencyConstants {
  double device_memory_ns = 465.0;
  double host_dma_ns = 910.0;
  double shared_l3_ns = 64.0;
  double local_l1_ns = 0.0;

  double of(AccessClass c) const {
    switch (c) {
      case AccessClass::kDeviceMemory: return device_memory_ns;
      case AccessClass::kHostDma: return host_dma_ns;
      case AccessClass::kSharedL3: return shared_l3_ns;
      case AccessClass::kLocalL1: return local_l1_ns;
    }
    return 0.0;
  }

  void validate() const {
    if (device_memory_ns <= 0 || host_dma_ns <= 0 || shared_l3_ns <= 0) {
      throw std::invalid_argument("latency constants must be positive");
    }
  }
};

// Per-class access counts. Doubles so analytic averages (e.g. 4.5 lines per
// inner node at 50% fill) evaluate directly.
struct AccessCounts {
  std::array<double, kAccessClassCount> counts{};

  double& operator[](AccessClass c) {
    return counts[static_cast<std::size_t>(c)];
  }
  double operator[](AccessClass c) const {
    return counts[static_cast<std::size_t>(c)];
  }
  AccessCounts& operator+=(const AccessCounts& o) {
    for (std::size_t i = 0; i < kAccessClassCount; ++i) {
      counts[i] += o.counts[i];
    }
    return *this;
  }
};

inline double modeled_request_latency_us(const AccessCounts& trace,
                                         const LatencyConstants& constants) {
  double ns = 0.0;
  for (std::size_t i = 0; i < kAccessClassCount; ++i) {
    ns += trace.counts[i] * constants.of(static_cast<AccessClass>(i));
  }
  return ns / 1000.0;
}

// Threads fully overlap compute with each other's memory stalls, so the
// aggregate rate is thread_count requests per request latency.
inline double modeled_throughput_mops(double thread_count,
                                      double request_latency_us) {
  if (request_latency_us <= 0) {
    throw std::invalid_argument("request latency must be positive");
  }
  return thread_count / request_latency_us;
}

// Per-request trace recorder owned by one traverser thread. A null
// recorder pointer disables instrumentation entirely.
class AccessTrace {
 public:
  void request_boundary() {
    total_ += request_;
    latency_ns_total_ += request_latency_ns_pending_;
    request_ = AccessCounts{};
    ++requests_;
  }

  void record(AccessClass c, std::uint32_t n = 1) {
    request_[c] += n;
    total_live_[static_cast<std::size_t>(c)] += n;
  }

  // Counts of the in-flight request.
  const AccessCounts& current() const { return request_; }
  // Aggregate over completed requests.
  const AccessCounts& completed_total() const { return total_; }
  std::uint64_t completed_requests() const { return requests_; }

  void note_request_latency_ns(double ns) { request_latency_ns_pending_ = ns; }
  double completed_latency_ns_total() const { return latency_ns_total_; }

  // Monotone per-class counters including the in-flight request.
  std::uint64_t live_count(AccessClass c) const {
    return total_live_[static_cast<std::size_t>(c)];
  }

 private:
  AccessCounts request_{};
  AccessCounts total_{};
  std::array<std::uint64_t, kAccessClassCount> total_live_{};
  double request_latency_ns_pending_ = 0.0;
  double latency_ns_total_ = 0.0;
  std::uint64_t requests_ = 0;
};

inline void record_access(AccessTrace* trace, AccessClass c,
                          std::uint32_t n = 1) {
  if (trace != nullptr && n > 0) trace->record(c, n);
}

}  // namespace nicstore
