#include "nicstore/pla.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

namespace nicstore {
namespace {

std::vector<Key> random_keys(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::set<Key> set;
  while (set.size() < n) {
    const Key k = rng();
    if (k <= kMaxValidKey) set.insert(k);
  }
  return {set.begin(), set.end()};
}

// Independent feasibility oracle: a segment over points (key_i, i) is
// eps-feasible iff some line a*(k - k0) + b keeps every residual within
// eps. The spread max_t(y_t - a*u_t) - min_t(y_t - a*u_t) is convex in a
// and minimized at a crossing of two residual lines, so scanning all
// pairwise slopes finds the optimum.
bool feasible_oracle(std::span<const Key> keys, std::size_t begin,
                     std::size_t len, std::uint32_t eps) {
  if (len <= 1) return true;
  std::vector<long double> u(len), y(len);
  for (std::size_t t = 0; t < len; ++t) {
    u[t] = static_cast<long double>(keys[begin + t] - keys[begin]);
    y[t] = static_cast<long double>(begin + t);
  }
  std::vector<long double> candidates;
  for (std::size_t s = 0; s < len; ++s) {
    for (std::size_t t = s + 1; t < len; ++t) {
      candidates.push_back((y[t] - y[s]) / (u[t] - u[s]));
    }
  }
  long double best = std::numeric_limits<long double>::max();
  for (const long double a : candidates) {
    long double mx = -std::numeric_limits<long double>::max();
    long double mn = std::numeric_limits<long double>::max();
    for (std::size_t t = 0; t < len; ++t) {
      const long double r = y[t] - a * u[t];
      mx = std::max(mx, r);
      mn = std::min(mn, r);
    }
    best = std::min(best, mx - mn);
  }
  return best <= 2.0L * eps + 1e-9L;
}

// Greedy maximal-extension segmentation on top of the oracle feasibility
// check, with binary-searched extension (feasibility is prefix-monotone).
std::vector<std::size_t> oracle_boundaries(std::span<const Key> keys,
                                           std::uint32_t eps) {
  std::vector<std::size_t> bounds;
  std::size_t begin = 0;
  while (begin < keys.size()) {
    std::size_t lo = 1, hi = keys.size() - begin;
    while (lo < hi) {
      const std::size_t mid = lo + (hi - lo + 1) / 2;
      if (feasible_oracle(keys, begin, mid, eps)) {
        lo = mid;
      } else {
        hi = mid - 1;
      }
    }
    bounds.push_back(begin + lo);
    begin += lo;
  }
  return bounds;
}

TEST(PlaSegment, IdentityModelPredicts) {
  PlaSegment seg;
  seg.first_key = 0;
  seg.slope_fx = static_cast<int128>(1) << kSlopeFracBits;  // 1.0
  seg.intercept_fx = 0;
  EXPECT_EQ(seg.predict(5), 5);
  EXPECT_EQ(seg.predict(0), 0);
}

TEST(PlaSegment, HalfSlopePredicts) {
  PlaSegment seg;
  seg.first_key = 0;
  seg.slope_fx = static_cast<int128>(1) << (kSlopeFracBits - 1);  // 0.5
  seg.intercept_fx = 2;
  EXPECT_EQ(seg.predict(8), 6);
}

TEST(PlaSegment, ExtrapolationSaturatesInsteadOfOverflowing) {
  PlaSegment seg;
  seg.first_key = 0;
  seg.slope_fx = static_cast<int128>(1) << kSlopeFracBits;
  seg.intercept_fx = 100;
  // slope 1.0 over the full key range stays finite and monotone.
  const std::int64_t far = seg.predict(kMaxValidKey);
  EXPECT_GT(far, 0);
  PlaSegment steep = seg;
  steep.slope_fx = static_cast<int128>(1) << (kSlopeFracBits + 6);
  EXPECT_GE(steep.predict(kMaxValidKey), seg.predict(kMaxValidKey));
}

TEST(PlaSegment, RebasedShiftsIntercept) {
  PlaSegment seg;
  seg.first_key = 10;
  seg.slope_fx = static_cast<int128>(1) << kSlopeFracBits;
  seg.intercept_fx = 50;
  PlaSegment local = seg.rebased(50);
  EXPECT_EQ(local.predict(10), 0);
  EXPECT_EQ(local.predict(15), 5);
}

TEST(TrainSegments, DenseRampIsOneExactSegment) {
  std::vector<Key> keys(10);
  for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = i;
  const auto segs = train_segments(keys, 4);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].begin, 0u);
  EXPECT_EQ(segs[0].end, 10u);
  EXPECT_EQ(segs[0].segment.first_key, 0u);
  // Exact affine data: slope quantizes to 1.0 and predictions are exact.
  for (std::size_t i = 0; i < keys.size(); ++i) {
    EXPECT_EQ(segs[0].segment.predict(keys[i]), static_cast<std::int64_t>(i));
  }
}

TEST(TrainSegments, AffineDataEpsilonZero) {
  const std::vector<Key> keys{10, 20, 30, 40};
  const auto segs = train_segments(keys, 0);
  ASSERT_EQ(segs.size(), 1u);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    EXPECT_EQ(segs[0].segment.predict(keys[i]), static_cast<std::int64_t>(i));
  }
}

TEST(TrainSegments, EmptyInputYieldsEmptyList) {
  EXPECT_TRUE(train_segments({}, 4).empty());
}

TEST(TrainSegments, DuplicateKeysRejectedDistinctly) {
  const std::vector<Key> keys{1, 2, 2, 3};
  EXPECT_THROW(train_segments(keys, 4), DuplicateKeyError);
  const std::vector<Key> decreasing{3, 2};
  EXPECT_THROW(train_segments(decreasing, 4), std::invalid_argument);
}

TEST(TrainSegments, SegmentsPartitionTheInput) {
  const auto keys = random_keys(5000, 42);
  const auto segs = train_segments(keys, 8);
  ASSERT_FALSE(segs.empty());
  EXPECT_EQ(segs.front().begin, 0u);
  EXPECT_EQ(segs.back().end, keys.size());
  for (std::size_t i = 1; i < segs.size(); ++i) {
    EXPECT_EQ(segs[i].begin, segs[i - 1].end);
  }
  for (const auto& s : segs) {
    EXPECT_EQ(s.segment.first_key, keys[s.begin]);
    EXPECT_EQ(s.segment.covered_count, s.end - s.begin);
  }
}

TEST(TrainSegments, FixedPointBoundHoldsOnRandomKeys) {
  const auto keys = random_keys(20000, 7);
  for (const std::uint32_t eps : {1u, 4u, 8u}) {
    const auto segs = train_segments(keys, eps);
    for (const auto& s : segs) {
      EXPECT_TRUE(verify_bound(
          s.segment,
          std::span<const Key>(keys.data() + s.begin, s.end - s.begin),
          static_cast<std::int64_t>(s.begin)));
    }
  }
}

TEST(TrainSegments, MatchesReferenceGreedyOracle) {
  const auto keys = random_keys(1000, 1234);
  const auto segs = train_segments(keys, 8);
  const auto oracle = oracle_boundaries(keys, 8);
  ASSERT_EQ(segs.size(), oracle.size());
  for (std::size_t i = 0; i < segs.size(); ++i) {
    EXPECT_EQ(segs[i].end, oracle[i]) << "segment " << i;
  }
}

TEST(TrainSegments, GreedyMaximality) {
  const auto keys = random_keys(3000, 99);
  const auto segs = train_segments(keys, 4);
  for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
    const std::size_t len = segs[i].end - segs[i].begin;
    // Refitting the segment plus the next key must split.
    const auto refit = train_segments(
        std::span<const Key>(keys.data() + segs[i].begin, len + 1), 4);
    EXPECT_GE(refit.size(), 2u) << "segment " << i << " is not maximal";
  }
}

TEST(TrainSegments, DeterministicBitIdentical) {
  const auto keys = random_keys(4000, 5);
  const auto a = train_segments(keys, 8);
  const auto b = train_segments(keys, 8);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].begin, b[i].begin);
    EXPECT_EQ(a[i].end, b[i].end);
    EXPECT_TRUE(a[i].segment.slope_fx == b[i].segment.slope_fx);
    EXPECT_EQ(a[i].segment.intercept_fx, b[i].segment.intercept_fx);
  }
}

TEST(Predict, AgreesWithLongDoubleWithinOneSlot) {
  std::mt19937_64 rng(2024);
  const auto keys = random_keys(4000, 77);
  const auto segs = train_segments(keys, 8);
  std::size_t trials = 0;
  while (trials < 1000000) {
    const auto& s = segs[rng() % segs.size()].segment;
    // Probe keys inside and slightly outside the trained interval.
    const Key k = keys[rng() % keys.size()];
    const long double slope =
        static_cast<long double>(s.slope_fx) /
        std::ldexp(1.0L, static_cast<int>(kSlopeFracBits));
    const long double dk = k >= s.first_key
                               ? static_cast<long double>(k - s.first_key)
                               : -static_cast<long double>(s.first_key - k);
    const long double real = slope * dk + s.intercept_fx;
    const std::int64_t fx = s.predict(k);
    EXPECT_LE(std::fabs(static_cast<long double>(fx) - real), 1.0L)
        << "key " << k;
    ++trials;
  }
}

TEST(VerifyBound, TrainedSegmentsAlwaysPass) {
  const auto keys = random_keys(2000, 3);
  const auto segs = train_segments(keys, 4);
  for (const auto& s : segs) {
    EXPECT_TRUE(verify_bound(
        s.segment,
        std::span<const Key>(keys.data() + s.begin, s.end - s.begin),
        static_cast<std::int64_t>(s.begin)));
  }
}

TEST(VerifyBound, PerturbedSlopeFailsOnSteepData) {
  // Dense consecutive keys give slope 1.0; nudging the slope breaks the
  // bound at the far end of a long segment.
  std::vector<Key> keys(4096);
  for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = i;
  auto segs = train_segments(keys, 1);
  ASSERT_EQ(segs.size(), 1u);
  PlaSegment bad = segs[0].segment;
  bad.slope_fx += static_cast<int128>(1) << (kSlopeFracBits - 10);
  EXPECT_FALSE(verify_bound(bad, keys, 0));
}

TEST(VerifyBound, EmptyKeySetIsVacuouslyTrue) {
  PlaSegment seg;
  seg.epsilon = 0;
  EXPECT_TRUE(verify_bound(seg, {}, 0));
}

TEST(TrainFixedChunks, InfiniteModeChunksAtCapacity) {
  std::vector<Key> keys(300);
  for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = i * 3;
  const auto chunks = train_fixed_chunks(keys, 128);
  ASSERT_EQ(chunks.size(), 3u);
  EXPECT_EQ(chunks[0].end, 128u);
  EXPECT_EQ(chunks[1].end, 256u);
  EXPECT_EQ(chunks[2].end, 300u);
  EXPECT_EQ(chunks[1].segment.first_key, keys[128]);
}

TEST(TrainSegments, SparseKeysKeepLongSegments) {
  // Full-64-bit-range keys: the Q.64 slope resolution must not degrade
  // segmentation to trivial runs.
  const auto keys = random_keys(20000, 11);
  const auto segs = train_segments(keys, 8);
  const double avg = static_cast<double>(keys.size()) / segs.size();
  EXPECT_GT(avg, 20.0);
}

}  // namespace
}  // namespace nicstore
