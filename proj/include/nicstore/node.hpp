#pragma once

// Device-domain node formats and intra-node search. Inner nodes hold seven
// learned segments whose first keys share one line with the node metadata;
// each segment has its own pivot array (<= 128 keys) and a parallel array
// of atomically swappable child references. Leaf nodes carry the leaf model
// and handles into host-domain key/value arrays. Nodes are immutable after
// publication; only child references change, via atomic swap.

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "nicstore/common.hpp"
#include "nicstore/cost_model.hpp"
#include "nicstore/insert_buffer.hpp"
#include "nicstore/pla.hpp"

namespace nicstore {

enum class NodeKind : std::uint8_t { kInner, kLeaf };

struct NodeBase {
  std::uint64_t uid = 0;
  NodeKind kind = NodeKind::kLeaf;
  std::uint8_t level = 0;  // 0 = leaf
  // Set when the COPY stitch lands; fuzz harnesses assert readers never
  // traverse an uncopied node.
  std::atomic<bool> copied{false};
  // Reclamation canary: poisoned on logical free, checked by fuzz readers.
  std::atomic<bool> poisoned{false};

  virtual ~NodeBase() = default;
};

using NodeRef = std::atomic<NodeBase*>;

// Host-domain storage for one leaf: a sorted immutable key array plus a
// parallel value array updatable in place at 64-bit granularity.
struct HostRegion {
  std::vector<Key> keys;
  std::unique_ptr<std::atomic<Value>[]> values;

  HostRegion(std::vector<Key> k, std::span<const Value> v)
      : keys(std::move(k)), values(new std::atomic<Value>[keys.size()]) {
    for (std::size_t i = 0; i < keys.size(); ++i) {
      values[i].store(v[i], std::memory_order_relaxed);
    }
  }

  std::size_t count() const { return keys.size(); }
  std::size_t raw_kv_bytes() const {
    return keys.size() * (sizeof(Key) + sizeof(Value));
  }
};

struct LeafNode : NodeBase {
  PlaSegment model;  // predicts the slot in the host key array
  std::uint32_t key_count = 0;
  Key min_key = 0;  // lower boundary of the key range this leaf owns
  std::shared_ptr<HostRegion> region;
  std::shared_ptr<InsertBuffer> buffer;

  LeafNode() { kind = NodeKind::kLeaf; }

  std::size_t device_bytes() const {
    return kLineBytes + (buffer ? buffer->device_bytes() : 0);
  }
};

struct InnerSegmentDir {
  std::vector<Key> pivots;  // capacity-padded with kKeySentinel
  std::vector<NodeRef> children;
  std::uint16_t pivot_count = 0;
};

struct InnerNode : NodeBase {
  std::uint32_t segment_count = 0;
  std::uint32_t pivot_capacity = kMaxPivotsPerSegment;
  std::array<Key, kSegmentsPerInner> segment_first_keys;
  std::array<PlaSegment, kSegmentsPerInner> models;
  std::array<InnerSegmentDir, kSegmentsPerInner> dirs;

  InnerNode() {
    kind = NodeKind::kInner;
    segment_first_keys.fill(kKeySentinel);
  }

  std::size_t device_bytes() const {
    // metadata+first-keys line, model block, padded pivot and child arrays
    return kLineBytes + kSegmentsPerInner * 24 +
           kSegmentsPerInner * pivot_capacity * sizeof(Key) * 2;
  }
};

// Largest i with segment_first_keys[i] <= key; 0 when the key precedes all
// first keys. Binary search over at most seven entries, all within the
// metadata line.
inline std::uint32_t locate_segment(const InnerNode& node, Key key) {
  std::uint32_t lo = 0;
  std::uint32_t hi = node.segment_count;  // > lo, nodes have >= 1 segment
  while (hi - lo > 1) {
    const std::uint32_t mid = (lo + hi) / 2;
    if (node.segment_first_keys[mid] <= key) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

namespace node_detail {

// Distinct 64-byte lines touched within one array of 8-byte cells.
struct LineSet {
  std::uint64_t mask = 0;
  void touch(std::size_t cell) { mask |= 1ull << (cell / kKeysPerLine); }
  std::uint32_t lines() const {
    return static_cast<std::uint32_t>(__builtin_popcountll(mask));
  }
};

}  // namespace node_detail

struct ChildLookup {
  NodeBase* child = nullptr;
  std::uint32_t pivot_index = 0;
};

// Predict the pivot position with the segment model, then walk the pivot
// array toward the child whose interval contains the key. The walk stays
// inside [p - eps - 1, p + eps]; present routing keys are covered by the
// trained bound and intermediate keys by model monotonicity. Landing
// outside every window is a corruption, never a silent wrong turn.
inline ChildLookup locate_child(const InnerNode& node, std::uint32_t seg,
                                Key key, bool binary_search = false,
                                AccessTrace* trace = nullptr) {
  const InnerSegmentDir& dir = node.dirs[seg];
  const std::uint32_t count = dir.pivot_count;
  if (count == 0) {
    throw CorruptionError("inner segment without pivots");
  }
  record_access(trace, AccessClass::kDeviceMemory);  // model line
  node_detail::LineSet touched;
  std::uint32_t idx = 0;

  if (binary_search) {
    std::uint32_t lo = 0, hi = count;
    touched.touch(0);
    while (hi - lo > 1) {
      const std::uint32_t mid = (lo + hi) / 2;
      touched.touch(mid);
      if (dir.pivots[mid] <= key) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    idx = lo;
  } else {
    const PlaSegment& model = node.models[seg];
    std::int64_t p = model.predict(key);
    if (p < 0) p = 0;
    if (p >= count) p = count - 1;
    const std::int64_t eps = static_cast<std::int64_t>(model.epsilon);
    const std::int64_t lo_bound = p - eps - 1;
    const std::int64_t hi_bound = p + eps;

    std::int64_t i = p;
    touched.touch(static_cast<std::size_t>(i));
    if (dir.pivots[i] <= key) {
      while (i + 1 < count && i + 1 <= hi_bound) {
        touched.touch(static_cast<std::size_t>(i + 1));
        if (dir.pivots[i + 1] > key) break;
        ++i;
      }
    } else {
      while (i > 0 && i - 1 >= lo_bound) {
        --i;
        touched.touch(static_cast<std::size_t>(i));
        if (dir.pivots[i] <= key) break;
      }
    }
    idx = static_cast<std::uint32_t>(i);
  }

  record_access(trace, AccessClass::kDeviceMemory, touched.lines());
  if (dir.pivots[idx] > key && idx != 0) {
    throw CorruptionError("key outside every pivot window");
  }
  record_access(trace, AccessClass::kDeviceMemory);  // child reference line
  ChildLookup out;
  out.pivot_index = idx;
  out.child = dir.children[idx].load(std::memory_order_acquire);
  return out;
}

// Exact lookup in the leaf's host key array. The scan is confined to the
// clamped [p - eps, p + eps] window; contiguous key lines of one window
// collapse into a single DMA event.
inline std::optional<std::uint32_t> leaf_locate(const LeafNode& leaf, Key key,
                                                bool binary_search = false,
                                                AccessTrace* trace = nullptr) {
  const std::uint32_t count = leaf.key_count;
  if (count == 0) return std::nullopt;
  const auto& keys = leaf.region->keys;

  if (binary_search) {
    node_detail::LineSet touched;
    std::uint32_t lo = 0, hi = count;
    while (lo < hi) {
      const std::uint32_t mid = (lo + hi) / 2;
      touched.touch(mid);
      if (keys[mid] < key) {
        lo = mid + 1;
      } else {
        hi = mid;
      }
    }
    // Scattered probes do not collapse: one DMA per distinct line.
    record_access(trace, AccessClass::kHostDma, touched.lines());
    if (lo < count && keys[lo] == key) return lo;
    return std::nullopt;
  }

  std::int64_t p = leaf.model.predict(key);
  if (p < 0) p = 0;
  if (p >= count) p = count - 1;
  const std::int64_t eps = static_cast<std::int64_t>(leaf.model.epsilon);
  const std::int64_t lo_bound = std::max<std::int64_t>(0, p - eps);
  const std::int64_t hi_bound = std::min<std::int64_t>(count - 1, p + eps);

  record_access(trace, AccessClass::kHostDma);  // collapsed window fetch
  std::int64_t i = p;
  if (keys[i] == key) return static_cast<std::uint32_t>(i);
  if (keys[i] < key) {
    while (i + 1 <= hi_bound) {
      ++i;
      if (keys[i] == key) return static_cast<std::uint32_t>(i);
      if (keys[i] > key) return std::nullopt;
    }
  } else {
    while (i - 1 >= lo_bound) {
      --i;
      if (keys[i] == key) return static_cast<std::uint32_t>(i);
      if (keys[i] < key) return std::nullopt;
    }
  }
  return std::nullopt;
}

// Slot of the smallest key >= `key`, used by range descents. The successor
// of an absent key lies in [p - eps, p + eps + 1] by model monotonicity.
inline std::optional<std::uint32_t> leaf_successor(
    const LeafNode& leaf, Key key, bool binary_search = false,
    AccessTrace* trace = nullptr) {
  const std::uint32_t count = leaf.key_count;
  if (count == 0) return std::nullopt;
  const auto& keys = leaf.region->keys;

  if (binary_search) {
    node_detail::LineSet touched;
    std::uint32_t lo = 0, hi = count;
    while (lo < hi) {
      const std::uint32_t mid = (lo + hi) / 2;
      touched.touch(mid);
      if (keys[mid] < key) {
        lo = mid + 1;
      } else {
        hi = mid;
      }
    }
    record_access(trace, AccessClass::kHostDma, touched.lines());
    if (lo < count) return lo;
    return std::nullopt;
  }

  std::int64_t p = leaf.model.predict(key);
  if (p < 0) p = 0;
  if (p >= count) p = count - 1;
  const std::int64_t eps = static_cast<std::int64_t>(leaf.model.epsilon);
  const std::int64_t lo_bound = std::max<std::int64_t>(0, p - eps);
  const std::int64_t hi_bound = std::min<std::int64_t>(count - 1, p + eps + 1);

  record_access(trace, AccessClass::kHostDma);
  std::int64_t i = p;
  if (keys[i] >= key) {
    while (i - 1 >= lo_bound && keys[i - 1] >= key) --i;
    return static_cast<std::uint32_t>(i);
  }
  while (i + 1 <= hi_bound) {
    ++i;
    if (keys[i] >= key) return static_cast<std::uint32_t>(i);
  }
  if (hi_bound == count - 1) return std::nullopt;  // key beyond this leaf
  throw CorruptionError("successor outside the leaf model window");
}

}  // namespace nicstore
