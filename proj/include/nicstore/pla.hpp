#pragma once

// Piecewise linear approximation over sorted 64-bit keys, trained greedily
// (convex-hull cone shrinking, as in PGM) and evaluated with the same
// fixed-point arithmetic the query path uses. The error bound is enforced
// against the fixed-point evaluator, not a floating-point proxy: if slope
// quantization breaks the bound at the margin the candidate segment is
// shrunk and refitted.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "nicstore/common.hpp"

namespace nicstore {

using int128 = __int128;

// Fractional bits of the slope. 64 keeps the quantization error below one
// slot for any in-segment key distance, sparse 64-bit keyspaces included.
inline constexpr unsigned kSlopeFracBits = 64;

class DuplicateKeyError : public std::invalid_argument {
 public:
  explicit DuplicateKeyError(const std::string& what)
      : std::invalid_argument(what) {}
};

struct PlaSegment {
  Key first_key = 0;
  int128 slope_fx = 0;           // Q.64, non-negative
  std::int64_t intercept_fx = 0;  // slot offset at key == first_key
  std::uint32_t epsilon = 0;
  std::uint32_t covered_count = 0;

  // floor(slope_fx * (key - first_key) >> 64) + intercept, computed in
  // 128-bit width. Keys outside the trained interval are permitted; the
  // product saturates instead of overflowing and callers clamp the result.
  std::int64_t predict(Key key) const noexcept {
    const int128 dk =
        static_cast<int128>(key) - static_cast<int128>(first_key);
    int128 prod;
    if (__builtin_mul_overflow(slope_fx, dk, &prod)) {
      return dk < 0 ? std::numeric_limits<std::int64_t>::min()
                    : std::numeric_limits<std::int64_t>::max();
    }
    const int128 pos = (prod >> kSlopeFracBits) + intercept_fx;
    if (pos > std::numeric_limits<std::int64_t>::max()) {
      return std::numeric_limits<std::int64_t>::max();
    }
    if (pos < std::numeric_limits<std::int64_t>::min()) {
      return std::numeric_limits<std::int64_t>::min();
    }
    return static_cast<std::int64_t>(pos);
  }

  // Same model with positions shifted by -offset (e.g. global index to
  // node-local slot). The error bound is unaffected.
  PlaSegment rebased(std::int64_t offset) const {
    PlaSegment s = *this;
    s.intercept_fx -= offset;
    return s;
  }
};

struct EpsilonConfig {
  std::uint32_t eps_inner = 4;
  std::uint32_t eps_leaf = 8;
  bool infinite_mode = false;  // B+-tree fallback: binary search in nodes

  void validate() const {
    if (!infinite_mode && (eps_inner < 1 || eps_leaf < 1)) {
      throw std::invalid_argument("epsilon values must be >= 1");
    }
  }
};

// A trained segment plus the half-open input index range it covers. The
// intercept is relative to global input positions; rebase by `begin` to get
// a node-local model.
struct TrainedSegment {
  PlaSegment segment;
  std::size_t begin = 0;
  std::size_t end = 0;
};

// True iff every |predict(key) - position| <= epsilon under fixed-point
// evaluation, where keys[i] sits at position first_position + i.
inline bool verify_bound(const PlaSegment& seg, std::span<const Key> keys,
                         std::int64_t first_position) {
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::int64_t truth = first_position + static_cast<std::int64_t>(i);
    const std::int64_t pred = seg.predict(keys[i]);
    const std::int64_t err = pred > truth ? pred - truth : truth - pred;
    if (err > static_cast<std::int64_t>(seg.epsilon)) return false;
  }
  return true;
}

namespace pla_detail {

// Incremental feasibility cone for points (key, position) with vertical
// slack +-epsilon, kept exact with 128-bit rational slope comparisons.
class HullCone {
 public:
  explicit HullCone(std::int64_t epsilon) : eps_(epsilon) {}

  void reset(Key x, std::int64_t y) {
    x0_ = x;
    count_ = 1;
    upper_.clear();
    lower_.clear();
    upper_.push_back({0, y + eps_});
    lower_.push_back({0, y - eps_});
    upper_start_ = lower_start_ = 0;
    rect_[0] = {0, y + eps_};
    rect_[1] = {0, y - eps_};
  }

  // Try to extend the cone with the next point; keys must be strictly
  // increasing. Returns false (cone unchanged in any useful sense) when the
  // point cannot be covered within epsilon.
  bool add(Key x, std::int64_t y) {
    const int128 dx = static_cast<int128>(x) - static_cast<int128>(x0_);
    const Pt p_hi{dx, y + eps_};
    const Pt p_lo{dx, y - eps_};

    if (count_ == 1) {
      rect_[2] = p_lo;
      rect_[3] = p_hi;
      upper_.push_back(p_hi);
      lower_.push_back(p_lo);
      ++count_;
      return true;
    }

    const Slope slope_min = diff(rect_[2], rect_[0]);
    const Slope slope_max = diff(rect_[3], rect_[1]);
    if (less(diff(p_hi, rect_[2]), slope_min) ||
        greater(diff(p_lo, rect_[3]), slope_max)) {
      return false;
    }

    if (less(diff(p_hi, rect_[1]), slope_max)) {
      // Tighten the max slope against the lower hull.
      std::size_t best = lower_start_;
      Slope min_s = diff(lower_[best], p_hi);
      for (std::size_t i = lower_start_ + 1; i < lower_.size(); ++i) {
        Slope s = diff(lower_[i], p_hi);
        if (greater(s, min_s)) break;
        min_s = s;
        best = i;
      }
      rect_[1] = lower_[best];
      rect_[3] = p_hi;
      lower_start_ = best;

      std::size_t end = upper_.size();
      while (end >= upper_start_ + 2 &&
             cross(upper_[end - 2], upper_[end - 1], p_hi) <= 0) {
        --end;
      }
      upper_.resize(end);
      upper_.push_back(p_hi);
    }

    if (greater(diff(p_lo, rect_[0]), slope_min)) {
      // Tighten the min slope against the upper hull.
      std::size_t best = upper_start_;
      Slope max_s = diff(upper_[best], p_lo);
      for (std::size_t i = upper_start_ + 1; i < upper_.size(); ++i) {
        Slope s = diff(upper_[i], p_lo);
        if (less(s, max_s)) break;
        max_s = s;
        best = i;
      }
      rect_[0] = upper_[best];
      rect_[2] = p_lo;
      upper_start_ = best;

      std::size_t end = lower_.size();
      while (end >= lower_start_ + 2 &&
             cross(lower_[end - 2], lower_[end - 1], p_lo) >= 0) {
        --end;
      }
      lower_.resize(end);
      lower_.push_back(p_lo);
    }

    ++count_;
    return true;
  }

  std::size_t size() const { return count_; }

  // Midpoint of the feasible slope range. Exact rationals are collapsed via
  // long double (64-bit mantissa), which is precise to well below the
  // fixed-point quantum for any cone this trainer can produce.
  long double mid_slope() const {
    if (count_ < 2) return 0.0L;
    const long double lo = ratio(diff(rect_[2], rect_[0]));
    const long double hi = ratio(diff(rect_[3], rect_[1]));
    return (lo + hi) / 2.0L;
  }

 private:
  struct Pt {
    int128 x;
    int128 y;
  };
  struct Slope {
    int128 dx;
    int128 dy;
  };

  static Slope diff(const Pt& a, const Pt& b) {
    return {a.x - b.x, a.y - b.y};
  }
  static bool less(const Slope& a, const Slope& b) {
    return a.dy * b.dx < b.dy * a.dx;
  }
  static bool greater(const Slope& a, const Slope& b) {
    return a.dy * b.dx > b.dy * a.dx;
  }
  static int128 cross(const Pt& o, const Pt& a, const Pt& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  }
  static long double ratio(const Slope& s) {
    return static_cast<long double>(s.dy) / static_cast<long double>(s.dx);
  }

  std::int64_t eps_;
  Key x0_ = 0;
  std::size_t count_ = 0;
  Pt rect_[4];
  std::vector<Pt> upper_, lower_;
  std::size_t upper_start_ = 0, lower_start_ = 0;
};

struct FitResult {
  PlaSegment segment;
  // Number of leading points of the candidate that satisfy epsilon under
  // the quantized model. Equals the candidate length when the fit holds.
  std::size_t ok_len = 0;
};

// Quantize a real-slope fit of keys[begin, begin+len) (positions = global
// indices) and derive the intercept that centers the fixed-point residuals.
inline FitResult fit_quantized(std::span<const Key> keys, std::size_t begin,
                               std::size_t len, std::uint32_t epsilon) {
  FitResult r;
  r.segment.first_key = keys[begin];
  r.segment.epsilon = epsilon;
  r.segment.covered_count = static_cast<std::uint32_t>(len);

  if (len == 1) {
    r.segment.slope_fx = 0;
    r.segment.intercept_fx = static_cast<std::int64_t>(begin);
    r.ok_len = 1;
    return r;
  }

  HullCone cone(static_cast<std::int64_t>(epsilon));
  cone.reset(keys[begin], static_cast<std::int64_t>(begin));
  for (std::size_t i = 1; i < len; ++i) {
    const bool ok =
        cone.add(keys[begin + i], static_cast<std::int64_t>(begin + i));
    if (!ok) {
      // Caller passed a candidate the exact cone rejects; report the
      // feasible prefix so it can retry shorter.
      r.ok_len = i;
      return fit_quantized(keys, begin, i, epsilon);
    }
  }

  long double slope = cone.mid_slope();
  if (slope < 0.0L) slope = 0.0L;
  const long double scaled = std::ldexp(slope, kSlopeFracBits);
  r.segment.slope_fx = static_cast<int128>(scaled);

  // Residuals under the production evaluator with intercept 0.
  PlaSegment probe = r.segment;
  probe.intercept_fx = 0;
  std::int64_t min_r = std::numeric_limits<std::int64_t>::max();
  std::int64_t max_r = std::numeric_limits<std::int64_t>::min();
  const std::int64_t spread_limit = 2 * static_cast<std::int64_t>(epsilon);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < len; ++i) {
    const std::int64_t res =
        static_cast<std::int64_t>(begin + i) - probe.predict(keys[begin + i]);
    const std::int64_t nmin = res < min_r ? res : min_r;
    const std::int64_t nmax = res > max_r ? res : max_r;
    if (nmax - nmin > spread_limit) break;
    min_r = nmin;
    max_r = nmax;
    ok = i + 1;
  }
  // Center: max error becomes ceil(spread / 2) <= epsilon.
  r.segment.intercept_fx = min_r + (max_r - min_r) / 2 + ((max_r - min_r) & 1);
  r.ok_len = ok;
  return r;
}

}  // namespace pla_detail

// Greedy left-to-right epsilon-bounded segmentation. Keys must be strictly
// increasing (duplicates raise DuplicateKeyError); empty input yields an
// empty list. Each produced segment is maximal: refitting it together with
// the following key cannot satisfy epsilon under fixed-point evaluation.
inline std::vector<TrainedSegment> train_segments(std::span<const Key> keys,
                                                  std::uint32_t epsilon) {
  std::vector<TrainedSegment> out;
  if (keys.empty()) return out;
  for (std::size_t i = 1; i < keys.size(); ++i) {
    if (keys[i] == keys[i - 1]) {
      throw DuplicateKeyError("duplicate key at index " + std::to_string(i));
    }
    if (keys[i] < keys[i - 1]) {
      throw std::invalid_argument("keys must be strictly increasing");
    }
  }

  pla_detail::HullCone cone(static_cast<std::int64_t>(epsilon));
  std::size_t begin = 0;
  while (begin < keys.size()) {
    cone.reset(keys[begin], static_cast<std::int64_t>(begin));
    std::size_t end = begin + 1;
    while (end < keys.size() &&
           cone.add(keys[end], static_cast<std::int64_t>(end))) {
      ++end;
    }
    // Quantize; shrink (rarely, by a key or two) if rounding breaks the
    // bound, refitting the shorter candidate from scratch.
    std::size_t len = end - begin;
    for (;;) {
      auto fit = pla_detail::fit_quantized(keys, begin, len, epsilon);
      if (fit.ok_len == len) {
        out.push_back({fit.segment, begin, begin + len});
        break;
      }
      len = fit.ok_len > 0 ? fit.ok_len : 1;
    }
    begin = out.back().end;
  }
  return out;
}

// Infinite-epsilon (B+-tree) mode: one trivial zero-slope segment per
// max-capacity chunk; node search degrades to binary search.
inline std::vector<TrainedSegment> train_fixed_chunks(
    std::span<const Key> keys, std::size_t chunk_capacity) {
  std::vector<TrainedSegment> out;
  if (chunk_capacity == 0) {
    throw std::invalid_argument("chunk capacity must be >= 1");
  }
  for (std::size_t begin = 0; begin < keys.size(); begin += chunk_capacity) {
    const std::size_t end = std::min(begin + chunk_capacity, keys.size());
    TrainedSegment t;
    t.begin = begin;
    t.end = end;
    t.segment.first_key = keys[begin];
    t.segment.slope_fx = 0;
    t.segment.intercept_fx = static_cast<std::int64_t>(begin);
    t.segment.epsilon = static_cast<std::uint32_t>(end - begin);
    t.segment.covered_count = static_cast<std::uint32_t>(end - begin);
    out.push_back(t);
  }
  return out;
}

}  // namespace nicstore
