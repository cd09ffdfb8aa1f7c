#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <random>
#include <thread>
#include <vector>

#include "nicstore/epoch.hpp"
#include "nicstore/hot_cache.hpp"
#include "nicstore/insert_buffer.hpp"
#include "nicstore/steering.hpp"

namespace nicstore {
namespace {

TEST(InsertBuffer, AppendToEmptyBuffer) {
  InsertBuffer buf(16);
  const auto r = buf.append(7, 70, OpTag::kInsert);
  EXPECT_EQ(r.status, InsertBuffer::AppendStatus::kOk);
  EXPECT_EQ(r.slot, 0u);
  EXPECT_FALSE(r.filled_last_slot);
  EXPECT_EQ(buf.committed(), 1u);
}

TEST(InsertBuffer, SixteenthAppendSignalsLastSlot) {
  InsertBuffer buf(16);
  for (int i = 0; i < 15; ++i) {
    EXPECT_FALSE(buf.append(i, i, OpTag::kInsert).filled_last_slot);
  }
  const auto last = buf.append(15, 15, OpTag::kInsert);
  EXPECT_TRUE(last.filled_last_slot);
  EXPECT_EQ(buf.append(99, 99, OpTag::kInsert).status,
            InsertBuffer::AppendStatus::kFull);
}

TEST(InsertBuffer, LookupIsLastWriterWins) {
  InsertBuffer buf(16);
  buf.append(5, 1, OpTag::kInsert);
  buf.append(5, 2, OpTag::kUpdate);
  auto e = buf.lookup(5);
  ASSERT_TRUE(e.has_value());
  EXPECT_EQ(e->value, 2u);
  EXPECT_EQ(e->tag, OpTag::kUpdate);

  buf.append(5, 0, OpTag::kDelete);
  e = buf.lookup(5);
  ASSERT_TRUE(e.has_value());
  EXPECT_EQ(e->tag, OpTag::kDelete);
  EXPECT_FALSE(buf.lookup(6).has_value());
}

TEST(InsertBuffer, ConcurrentAppendersMatchSequentialReplay) {
  for (int round = 0; round < 20; ++round) {
    InsertBuffer buf(16);
    constexpr int kThreads = 4;
    std::vector<std::thread> threads;
    for (int t = 0; t < kThreads; ++t) {
      threads.emplace_back([&buf, t] {
        for (int i = 0; i < 4; ++i) {
          const Key k = static_cast<Key>(t * 4 + i);
          ASSERT_EQ(buf.append(k, k * 10, OpTag::kInsert).status,
                    InsertBuffer::AppendStatus::kOk);
        }
      });
    }
    for (auto& t : threads) t.join();
    EXPECT_EQ(buf.committed(), 16u);

    // Every entry present exactly once; replay in slot order equals some
    // sequential interleaving (keys unique here, so set equality).
    const auto entries = buf.visible_entries();
    ASSERT_EQ(entries.size(), 16u);
    std::map<Key, int> seen;
    for (const auto& e : entries) {
      ++seen[e.key];
      EXPECT_EQ(e.value, e.key * 10);
    }
    EXPECT_EQ(seen.size(), 16u);
  }
}

TEST(InsertBuffer, ResetReturnsToEmptyUnsealed) {
  InsertBuffer buf(4);
  for (int i = 0; i < 4; ++i) buf.append(i, i, OpTag::kInsert);
  buf.seal();
  EXPECT_TRUE(buf.sealed());
  buf.reset();
  EXPECT_FALSE(buf.sealed());
  EXPECT_EQ(buf.committed(), 0u);
  EXPECT_FALSE(buf.lookup(1).has_value());
  EXPECT_EQ(buf.append(9, 9, OpTag::kInsert).slot, 0u);
}

TEST(HotCache, AdmitThenLookup) {
  HotCache cache;
  const Key k = 12345;
  const auto hint = hint_for_key(k);
  cache.admit(k, 99, hint);
  const auto v = cache.lookup(k, hint);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(*v, 99u);
}

TEST(HotCache, BloomNegativeSkipsBucketProbe) {
  HotCache cache;
  cache.admit(1, 1, hint_for_key(1));
  const auto before = cache.stats().bucket_probes;
  // A hint whose bits are surely not all set in a near-empty filter.
  CacheHint absent;
  absent.bloom_bits = {250, 251, 252};
  absent.bucket = 3;
  EXPECT_FALSE(cache.lookup(999, absent).has_value());
  EXPECT_EQ(cache.stats().bucket_probes, before);
  EXPECT_GE(cache.stats().bloom_negative, 1u);
}

TEST(HotCache, InvalidateRemovesEntryKeepsBloomBits) {
  HotCache cache;
  const Key k = 777;
  const auto hint = hint_for_key(k);
  cache.admit(k, 1, hint);
  cache.invalidate(k, hint);
  EXPECT_FALSE(cache.lookup(k, hint).has_value());
  // Stale positives allowed: the filter still passes the key's bits.
  EXPECT_TRUE(cache.bloom_test(hint));
}

TEST(HotCache, CapacityIsNinetySix) {
  HotCache cache;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 4000; ++i) {
    const Key k = rng();
    cache.admit(k, k, hint_for_key(k));
  }
  EXPECT_LE(cache.live_entries(), HotCache::kCapacity);
  EXPECT_GT(cache.live_entries(), HotCache::kCapacity / 2);
}

TEST(HotCache, FalsePositiveRateNearPaperValue) {
  HotCache cache;
  std::mt19937_64 rng(2718);
  std::size_t admitted = 0;
  // Fill to exactly 96 live entries.
  while (cache.live_entries() < HotCache::kCapacity) {
    const Key k = rng() % 1000000;
    cache.admit(k, k, hint_for_key(k));
    ++admitted;
    ASSERT_LT(admitted, 10000u);
  }
  std::size_t positives = 0;
  constexpr std::size_t kProbes = 100000;
  for (std::size_t i = 0; i < kProbes; ++i) {
    const Key k = 5000000 + i;  // disjoint from admitted keys
    if (cache.bloom_test(hint_for_key(k))) ++positives;
  }
  const double fp = static_cast<double>(positives) / kProbes;
  EXPECT_GE(fp, 0.28);
  EXPECT_LE(fp, 0.34);
}

TEST(HotCache, RebuildBoundsStaleSaturation) {
  HotCache cache;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 40000; ++i) {
    const Key k = rng();
    cache.admit(k, k, hint_for_key(k));
  }
  EXPECT_GT(cache.stats().bloom_rebuilds, 0u);
  // After heavy churn the filter still rejects most absent keys.
  std::size_t positives = 0;
  for (int i = 0; i < 10000; ++i) {
    if (cache.bloom_test(hint_for_key(rng()))) ++positives;
  }
  EXPECT_LT(positives, 6000u);
}

TEST(Epoch, RetireFreesAfterEveryThreadAdvances) {
  EpochManager epochs(3);
  std::atomic<bool> freed{false};
  epochs.retire([&] { freed.store(true); });
  EXPECT_EQ(epochs.collect(), 0u);
  epochs.advance(0);
  epochs.advance(1);
  EXPECT_EQ(epochs.collect(), 0u);
  EXPECT_FALSE(freed.load());
  epochs.advance(2);
  EXPECT_EQ(epochs.collect(), 1u);
  EXPECT_TRUE(freed.load());
}

TEST(Epoch, MidRequestThreadBlocksReclamation) {
  EpochManager epochs(2);
  // Thread 1 is mid-request: it has not advanced past the snapshot.
  epochs.advance(0);
  std::atomic<bool> freed{false};
  epochs.retire([&] { freed.store(true); });
  epochs.advance(0);
  epochs.advance(0);
  EXPECT_EQ(epochs.collect(), 0u);
  EXPECT_FALSE(freed.load());
  epochs.advance(1);  // the straggler finishes its request
  EXPECT_EQ(epochs.collect(), 1u);
  EXPECT_TRUE(freed.load());
}

TEST(Epoch, DrainUnsafeFreesEverything) {
  EpochManager epochs(4);
  int freed = 0;
  for (int i = 0; i < 10; ++i) epochs.retire([&] { ++freed; });
  EXPECT_EQ(epochs.drain_unsafe(), 10u);
  EXPECT_EQ(freed, 10);
  EXPECT_EQ(epochs.pending(), 0u);
}

TEST(Steering, PrimaryAndAlternateDisagreeOnMostKeys) {
  SteeringScheme primary{18500, 176, false};
  SteeringScheme alternate{18500, 176, true};
  std::mt19937_64 rng(9);
  int differ = 0;
  constexpr int kTrials = 100000;
  for (int i = 0; i < kTrials; ++i) {
    const Key k = rng();
    if (primary.port_for_key(k) != alternate.port_for_key(k)) ++differ;
  }
  EXPECT_GE(static_cast<double>(differ) / kTrials, 0.98);
}

TEST(Steering, SingleThreadAlwaysBasePort) {
  SteeringScheme s{19000, 1, false};
  EXPECT_EQ(s.port_for_key(1), 19000);
  EXPECT_EQ(s.port_for_key(12345678), 19000);
}

TEST(Steering, PortDistributionNearUniform) {
  SteeringScheme s{18500, 176, false};
  std::vector<std::uint32_t> counts(176, 0);
  std::mt19937_64 rng(4242);
  constexpr std::size_t kKeys = 1000000;
  for (std::size_t i = 0; i < kKeys; ++i) {
    ++counts[s.port_for_key(rng()) - s.base_port];
  }
  const double mean = static_cast<double>(kKeys) / 176;
  for (const auto c : counts) {
    EXPECT_NEAR(c, mean, mean * 0.05);
  }
}

}  // namespace
}  // namespace nicstore
