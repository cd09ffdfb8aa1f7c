#include "nicstore/cost_model.hpp"

#include <gtest/gtest.h>

namespace nicstore {
namespace {

// Canonical depth-3 uncached GET at 50% node fill: two inner nodes at 4.5
// lines each, one leaf metadata line, keys collapsed to one DMA plus one
// value DMA.
AccessCounts depth3_uncached_trace() {
  AccessCounts t;
  t[AccessClass::kDeviceMemory] = 2 * 4.5 + 1.0;
  t[AccessClass::kHostDma] = 2.0;
  return t;
}

TEST(CostModel, Depth3UncachedGetLatency) {
  const LatencyConstants c;
  const double us = modeled_request_latency_us(depth3_uncached_trace(), c);
  EXPECT_NEAR(us, 6.47, 1e-9);
}

TEST(CostModel, ThroughputAt176Threads) {
  const LatencyConstants c;
  const double us = modeled_request_latency_us(depth3_uncached_trace(), c);
  EXPECT_NEAR(modeled_throughput_mops(176, us), 27.2, 0.1);
}

TEST(CostModel, CachedRootVariant) {
  const LatencyConstants c;
  // Root metadata and model lines served from L3; pivots and the child
  // line still hit device memory.
  AccessCounts t;
  t[AccessClass::kSharedL3] = 2.0;
  t[AccessClass::kDeviceMemory] = 2.5 + 4.5 + 1.0;
  t[AccessClass::kHostDma] = 2.0;
  const double root_delta_us =
      (2 * c.shared_l3_ns + 2.5 * c.device_memory_ns) / 1000.0;
  EXPECT_NEAR(root_delta_us, 1.2905, 1e-9);
  const double us = modeled_request_latency_us(t, c);
  EXPECT_NEAR(modeled_throughput_mops(176, us), 31.05, 0.1);
}

TEST(CostModel, FastDeviceMemoryVariant) {
  LatencyConstants c;
  c.device_memory_ns = 100.0;
  const double us = modeled_request_latency_us(depth3_uncached_trace(), c);
  EXPECT_LT(us, 2.82 + 1e-9);
  EXPECT_GT(modeled_throughput_mops(176, us), 62.0);
}

TEST(CostModel, EmptyTraceIsZero) {
  EXPECT_EQ(modeled_request_latency_us(AccessCounts{}, LatencyConstants{}),
            0.0);
}

TEST(CostModel, ThroughputRejectsNonPositiveLatency) {
  EXPECT_THROW(modeled_throughput_mops(176, 0.0), std::invalid_argument);
}

TEST(CostModel, ConstantsValidated) {
  LatencyConstants c;
  c.host_dma_ns = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(AccessTrace, PerRequestBoundaries) {
  AccessTrace trace;
  record_access(&trace, AccessClass::kDeviceMemory, 3);
  record_access(&trace, AccessClass::kHostDma);
  EXPECT_EQ(trace.current()[AccessClass::kDeviceMemory], 3.0);
  trace.request_boundary();
  EXPECT_EQ(trace.current()[AccessClass::kDeviceMemory], 0.0);
  EXPECT_EQ(trace.completed_total()[AccessClass::kHostDma], 1.0);
  EXPECT_EQ(trace.completed_requests(), 1u);
  EXPECT_EQ(trace.live_count(AccessClass::kDeviceMemory), 3u);
}

TEST(AccessTrace, NullRecorderIsNoOp) {
  record_access(nullptr, AccessClass::kDeviceMemory, 5);  // must not crash
}

}  // namespace
}  // namespace nicstore
