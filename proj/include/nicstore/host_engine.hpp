#pragma once

// Host-domain tree replica and maintenance. Patcher workers consume sealed
// insert buffers, update values in place or merge/retrain/split the leaf,
// rebuild ancestors bottom-up under exclusive parent locks, and emit the
// resulting stitch stream. Bulk loading builds the whole tree with the same
// segmentation machinery.
//
// Locking: descents and leaf retraining run under a shared structure lock;
// the single-pointer-swap fast path additionally takes the parent's
// maintenance mutex and swaps through atomic_refs, so concurrent descents
// never see torn pointers. Splices that change node shape (splits, root
// changes) run under the exclusive structure lock.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <thread>
#include <unordered_map>
#include <vector>

#include "nicstore/common.hpp"
#include "nicstore/device_tree.hpp"
#include "nicstore/node.hpp"
#include "nicstore/pla.hpp"
#include "nicstore/stitch.hpp"

namespace nicstore {

struct PatchRequest {
  std::uint64_t leaf_uid = 0;
  Key leaf_min_key = 0;
  std::uint32_t traverser_id = 0;
};

class PatchQueue {
 public:
  void push(PatchRequest req) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      queue_.push_back(req);
      ++pushed_;
    }
    cv_.notify_one();
  }

  std::optional<PatchRequest> pop_wait() {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] { return stopped_ || !queue_.empty(); });
    if (queue_.empty()) return std::nullopt;
    PatchRequest req = queue_.front();
    queue_.pop_front();
    ++active_;
    return req;
  }

  void done() {
    std::lock_guard<std::mutex> lock(mutex_);
    --active_;
    ++completed_;
    idle_cv_.notify_all();
  }

  void stop() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stopped_ = true;
    }
    cv_.notify_all();
  }

  // Blocks until every pushed patch has been fully applied.
  void wait_idle() {
    std::unique_lock<std::mutex> lock(mutex_);
    idle_cv_.wait(lock, [&] { return queue_.empty() && active_ == 0; });
  }

  std::uint64_t pushed() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return pushed_;
  }
  std::uint64_t completed() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return completed_;
  }

 private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<PatchRequest> queue_;
  bool stopped_ = false;
  std::uint64_t active_ = 0;
  std::uint64_t pushed_ = 0;
  std::uint64_t completed_ = 0;
};

struct HostNode {
  std::uint64_t uid = 0;
  bool is_leaf = false;
  std::uint8_t level = 0;
  std::atomic<bool> replaced{false};
  virtual ~HostNode() = default;
};

struct HostLeaf : HostNode {
  std::vector<Key> keys;
  std::shared_ptr<HostRegion> region;
  std::shared_ptr<InsertBuffer> buffer;
  Key min_key = 0;  // routing boundary this leaf is installed under
  LeafNode* device = nullptr;

  HostLeaf() { is_leaf = true; }
};

struct HostChildEntry {
  Key pivot = kKeySentinel;
  HostNode* host = nullptr;
  NodeBase* device = nullptr;
};

struct HostInner : HostNode {
  struct Segment {
    Key first_key = kKeySentinel;
    PlaSegment model;  // local to this segment's pivot list
    std::vector<HostChildEntry> children;
  };
  std::vector<Segment> segments;
  InnerNode* device = nullptr;
  std::mutex maintenance;
};

// Sorted merge of a leaf's contents with a sealed buffer. Buffer entries
// are applied in commit order (newest wins within the buffer), the buffer
// wins over the leaf, delete-tagged keys are absent from the output.
inline std::vector<std::pair<Key, Value>> merge_leaf(
    std::span<const Key> leaf_keys, std::span<const Value> leaf_values,
    std::span<const BufferEntry> buffer_entries) {
  std::unordered_map<Key, std::optional<Value>> effects;
  effects.reserve(buffer_entries.size());
  for (const BufferEntry& e : buffer_entries) {
    if (e.tag == OpTag::kDelete) {
      effects[e.key] = std::nullopt;
    } else {
      effects[e.key] = e.value;
    }
  }
  std::vector<std::pair<Key, std::optional<Value>>> upserts;
  upserts.reserve(effects.size());
  for (const auto& [k, v] : effects) upserts.emplace_back(k, v);
  std::sort(upserts.begin(), upserts.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<std::pair<Key, Value>> out;
  out.reserve(leaf_keys.size() + upserts.size());
  std::size_t i = 0, j = 0;
  while (i < leaf_keys.size() || j < upserts.size()) {
    if (j >= upserts.size() ||
        (i < leaf_keys.size() && leaf_keys[i] < upserts[j].first)) {
      out.emplace_back(leaf_keys[i], leaf_values[i]);
      ++i;
    } else {
      if (i < leaf_keys.size() && leaf_keys[i] == upserts[j].first) ++i;
      if (upserts[j].second.has_value()) {
        out.emplace_back(upserts[j].first, *upserts[j].second);
      }
      ++j;
    }
  }
  return out;
}

struct HostEngineConfig {
  EpsilonConfig eps{};
  std::uint32_t leaf_capacity = kDefaultLeafCapacity;
  std::uint32_t buffer_capacity = kDefaultBufferCapacity;
  std::uint32_t pivot_capacity = kMaxPivotsPerSegment;
  double retrain_fraction = 0.25;
  std::size_t patcher_count = 4;

  std::uint32_t retrain_bound() const {
    return static_cast<std::uint32_t>(
        std::max(1.0, std::ceil(retrain_fraction * leaf_capacity)));
  }

  void validate() const {
    eps.validate();
    if (leaf_capacity < 1) {
      throw std::invalid_argument("leaf capacity must be >= 1");
    }
    if (pivot_capacity < 1 || pivot_capacity > kMaxPivotsPerSegment) {
      throw std::invalid_argument("pivot capacity out of range (max 128)");
    }
    if (buffer_capacity < 1) {
      throw std::invalid_argument("buffer capacity must be >= 1");
    }
    if (retrain_fraction <= 0.0 || retrain_fraction > 1.0) {
      throw std::invalid_argument("retrain fraction must be in (0, 1]");
    }
  }
};

class HostEngine {
 public:
  HostEngine(DeviceTree& device, StitchFabric& fabric, HostEngineConfig cfg)
      : device_(device), fabric_(fabric), cfg_(cfg) {
    cfg_.validate();
  }

  ~HostEngine() { destroy_all(); }

  const HostEngineConfig& config() const { return cfg_; }

  struct Audit {
    std::atomic<std::uint64_t> patches{0};
    std::atomic<std::uint64_t> update_only_patches{0};
    std::atomic<std::uint64_t> single_leaf_patches{0};
    std::atomic<std::uint64_t> leaf_splits{0};
    std::atomic<std::uint64_t> parent_rebuilds{0};
    std::atomic<std::uint64_t> root_installs{0};
    std::atomic<std::uint64_t> root_splits{0};
    std::atomic<std::uint64_t> split_leaves_produced{0};
    std::atomic<std::uint64_t> max_split_leaf_fill{0};
    std::atomic<std::uint64_t> retrain_bound_violations{0};
    std::atomic<std::uint64_t> max_inner_segments{0};
    std::atomic<std::uint64_t> patch_reresolves{0};
    std::atomic<std::uint64_t> leaf_model_fallbacks{0};
  };
  const Audit& audit() const { return audit_; }

  // ---- bulk loading ---------------------------------------------------

  // Builds the host tree from strictly increasing pairs and emits the full
  // stitch stream: every node COPY (children before parents, subtrees
  // routed to their partitions), a fence spanning all queues, then the
  // root-pointer CONNECT. The device tree is unreadable until that final
  // stitch lands.
  void bulk_load(std::span<const Key> keys, std::span<const Value> values) {
    std::unique_lock<std::shared_mutex> lock(structure_mutex_);
    if (root_ != nullptr) {
      throw std::logic_error("bulk_load on a non-empty tree");
    }
    for (std::size_t i = 1; i < keys.size(); ++i) {
      if (keys[i] <= keys[i - 1]) {
        if (keys[i] == keys[i - 1]) {
          throw DuplicateKeyError("duplicate key in bulk load");
        }
        throw std::invalid_argument("bulk load keys must be increasing");
      }
    }
    if (!keys.empty() && keys.back() > kMaxValidKey) {
      throw std::invalid_argument("key sentinel value is not storable");
    }

    if (keys.empty()) {
      // Sentinel root: a single empty leaf.
      BuiltLeaf l = build_leaf({}, {}, 0);
      root_ = l.host;
      fabric_.enqueue_fence_all();
      fabric_.enqueue(kRootPartition,
                      StitchCommand::copy(take_payload(l.host)));
      fabric_.enqueue(kRootPartition,
                      StitchCommand::connect(kRootParentUid, 0, 0,
                                             l.device_ptr));
      audit_.root_installs.fetch_add(1, std::memory_order_relaxed);
      return;
    }

    // Bulk-loaded leaves pack to full capacity; the retrain bound applies
    // to split-produced leaves only.
    auto segs = segment_keys(keys, leaf_epsilon(), cfg_.leaf_capacity);
    std::vector<HostChildEntry> entries;
    entries.reserve(segs.size());
    for (const auto& s : segs) {
      BuiltLeaf l = build_leaf(keys.subspan(s.begin, s.end - s.begin),
                               values.subspan(s.begin, s.end - s.begin),
                               keys[s.begin]);
      entries.push_back({l.host->min_key, l.host, l.device_ptr});
    }

    HostNode* root = build_inner_levels(std::move(entries));
    root_ = root;

    auto* top = static_cast<HostInner*>(root);
    std::size_t top_index = 0;
    for (auto& seg : top->segments) {
      for (auto& child : seg.children) {
        emit_subtree_copies(
            child.host, partition_of(top_index, fabric_.partition_count()));
        ++top_index;
      }
    }
    fabric_.enqueue_fence_all();
    fabric_.enqueue(kRootPartition, StitchCommand::copy(take_payload(root)));
    fabric_.enqueue(kRootPartition,
                    StitchCommand::connect(kRootParentUid, 0, 0,
                                           device_twin(root)));
    audit_.root_installs.fetch_add(1, std::memory_order_relaxed);
  }

  // ---- patch application ----------------------------------------------

  void apply_patch(const PatchRequest& patch) {
    audit_.patches.fetch_add(1, std::memory_order_relaxed);

    std::shared_lock<std::shared_mutex> shared(structure_mutex_);
    HostLeaf* origin = find_leaf(patch.leaf_uid);
    if (origin == nullptr) {
      throw ProtocolFault("patch names unknown leaf uid " +
                          std::to_string(patch.leaf_uid));
    }

    std::shared_ptr<InsertBuffer> buffer = origin->buffer;
    wait_all_committed(*buffer);
    std::vector<BufferEntry> entries = buffer->visible_entries();
    if (entries.size() != buffer->capacity()) {
      throw ProtocolFault("sealed buffer snapshot is incomplete");
    }

    // The leaf this buffer's key range currently belongs to. A replaced
    // uid (raced by a concurrent cascade) re-resolves by min-key descent.
    HostLeaf* target = origin;
    if (origin->replaced.load(std::memory_order_acquire)) {
      audit_.patch_reresolves.fetch_add(1, std::memory_order_relaxed);
      target = descend_to(patch.leaf_min_key).leaf;
      if (target == nullptr) {
        throw ProtocolFault("patch target unresolvable by min-key descent");
      }
    }

    if (is_update_only(*target, entries)) {
      audit_.update_only_patches.fetch_add(1, std::memory_order_relaxed);
      for (const BufferEntry& e : entries) {
        const auto it =
            std::lower_bound(target->keys.begin(), target->keys.end(), e.key);
        const std::size_t slot =
            static_cast<std::size_t>(it - target->keys.begin());
        target->region->values[slot].store(e.value, std::memory_order_relaxed);
      }
      // Values are visible before the clear, so a reader sees the new
      // value from either the buffer or the host array.
      const DescentPath path = descend_to(target->min_key);
      fabric_.enqueue(connect_partition(path),
                      StitchCommand::clear_buffer(target->uid));
      return;
    }

    std::vector<std::pair<Key, Value>> merged =
        merged_contents(*target, entries);
    structural_patch(std::move(shared), target, merged);
  }

  // ---- host-side queries ------------------------------------------------

  // Full host contents; exact only on a quiesced store.
  std::vector<std::pair<Key, Value>> snapshot_contents() const {
    std::shared_lock<std::shared_mutex> lock(structure_mutex_);
    std::vector<std::pair<Key, Value>> out;
    collect(root_, out);
    return out;
  }

  HostNode* root() const { return root_; }

  std::uint64_t alloc_uid() {
    return next_uid_.fetch_add(1, std::memory_order_relaxed);
  }

 private:
  struct BuiltLeaf {
    HostLeaf* host = nullptr;
    LeafNode* device_ptr = nullptr;
  };

  struct BuiltInner {
    HostInner* host = nullptr;
    InnerNode* device_ptr = nullptr;
  };

  struct PathStep {
    HostInner* node = nullptr;
    std::uint32_t segment = 0;
    std::uint32_t slot = 0;
    std::size_t flat_index = 0;  // child index across the node's segments
  };

  struct DescentPath {
    std::vector<PathStep> steps;  // root first
    HostLeaf* leaf = nullptr;
  };

  std::uint32_t leaf_epsilon() const {
    return cfg_.eps.infinite_mode ? 0 : cfg_.eps.eps_leaf;
  }
  std::uint32_t inner_epsilon() const {
    return cfg_.eps.infinite_mode ? 0 : cfg_.eps.eps_inner;
  }

  // Segment a key array, honoring infinite mode and a hard per-segment
  // cap. Chopped chunks keep the trained line, re-anchored at the chunk's
  // first key; the +-1 slot the floor re-anchor can cost is caught by the
  // callers' verify-and-refit.
  std::vector<TrainedSegment> segment_keys(std::span<const Key> keys,
                                           std::uint32_t epsilon,
                                           std::uint32_t cap) const {
    std::vector<TrainedSegment> segs =
        cfg_.eps.infinite_mode ? train_fixed_chunks(keys, cap)
                               : train_segments(keys, epsilon);
    std::vector<TrainedSegment> out;
    out.reserve(segs.size());
    for (const TrainedSegment& s : segs) {
      if (s.end - s.begin <= cap) {
        out.push_back(s);
        continue;
      }
      for (std::size_t b = s.begin; b < s.end; b += cap) {
        const std::size_t e = std::min(b + cap, s.end);
        TrainedSegment t;
        t.begin = b;
        t.end = e;
        t.segment = s.segment;
        t.segment.intercept_fx = s.segment.predict(keys[b]);
        t.segment.first_key = keys[b];
        t.segment.covered_count = static_cast<std::uint32_t>(e - b);
        out.push_back(t);
      }
    }
    return out;
  }

  static void wait_all_committed(const InsertBuffer& buffer) {
    while (buffer.committed() < buffer.capacity()) {
      std::this_thread::yield();
    }
  }

  static bool is_update_only(const HostLeaf& leaf,
                             std::span<const BufferEntry> entries) {
    for (const BufferEntry& e : entries) {
      if (e.tag != OpTag::kUpdate) return false;
      if (!std::binary_search(leaf.keys.begin(), leaf.keys.end(), e.key)) {
        return false;
      }
    }
    return true;
  }

  std::vector<std::pair<Key, Value>> merged_contents(
      const HostLeaf& leaf, std::span<const BufferEntry> entries) const {
    std::vector<Value> values(leaf.keys.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = leaf.region->values[i].load(std::memory_order_relaxed);
    }
    return merge_leaf(leaf.keys, values, entries);
  }

  // ---- leaf / inner construction ----------------------------------------

  // Model for a leaf's keys: prefer the caller's pre-fit line, fall back
  // to a fresh fit, and as a last resort a full-window trivial model
  // (functionally a binary-search leaf). Never fails.
  PlaSegment leaf_model_for(std::span<const Key> keys,
                            const PlaSegment* hint) {
    PlaSegment trivial;
    trivial.first_key = keys.empty() ? 0 : keys[0];
    trivial.epsilon = static_cast<std::uint32_t>(keys.size());
    trivial.covered_count = static_cast<std::uint32_t>(keys.size());
    if (keys.empty()) return trivial;
    if (hint != nullptr && verify_bound(*hint, keys, 0)) return *hint;
    if (!cfg_.eps.infinite_mode) {
      auto fresh = train_segments(keys, leaf_epsilon());
      if (fresh.size() == 1) return fresh[0].segment;
    }
    audit_.leaf_model_fallbacks.fetch_add(1, std::memory_order_relaxed);
    return trivial;
  }

  BuiltLeaf build_leaf(std::span<const Key> keys, std::span<const Value> values,
                       Key min_key, const PlaSegment* model_hint = nullptr) {
    auto host = std::make_unique<HostLeaf>();
    host->uid = alloc_uid();
    host->keys.assign(keys.begin(), keys.end());
    host->region = std::make_shared<HostRegion>(host->keys, values);
    host->buffer = std::make_shared<InsertBuffer>(cfg_.buffer_capacity);
    host->min_key = min_key;

    auto device = std::make_unique<LeafNode>();
    device->uid = host->uid;
    device->level = 0;
    device->key_count = static_cast<std::uint32_t>(keys.size());
    device->min_key = min_key;
    device->region = host->region;
    device->buffer = host->buffer;
    device->model = leaf_model_for(keys, model_hint);
    host->device = device.get();

    BuiltLeaf out{host.get(), device.get()};
    register_node(std::move(host), std::move(device));
    return out;
  }

  // Splits `merged` into new leaves: one full leaf when a single segment
  // fits the capacity, otherwise retrain-bounded leaves.
  std::vector<BuiltLeaf> build_replacement_leaves(
      const std::vector<std::pair<Key, Value>>& merged, Key boundary) {
    std::vector<BuiltLeaf> out;
    if (merged.empty()) {
      out.push_back(build_leaf({}, {}, boundary));
      return out;
    }
    std::vector<Key> keys(merged.size());
    std::vector<Value> values(merged.size());
    for (std::size_t i = 0; i < merged.size(); ++i) {
      keys[i] = merged[i].first;
      values[i] = merged[i].second;
    }

    if (merged.size() <= cfg_.leaf_capacity) {
      auto whole = segment_keys(keys, leaf_epsilon(), cfg_.leaf_capacity);
      if (whole.size() == 1) {
        PlaSegment model = whole[0].segment;
        out.push_back(build_leaf(keys, values, boundary, &model));
        audit_.single_leaf_patches.fetch_add(1, std::memory_order_relaxed);
        return out;
      }
    }

    // Split: cap every produced leaf at the retrain bound so future
    // patches can be absorbed without an immediate re-split.
    audit_.leaf_splits.fetch_add(1, std::memory_order_relaxed);
    auto segs = segment_keys(keys, leaf_epsilon(), cfg_.retrain_bound());
    out.reserve(segs.size());
    for (const auto& s : segs) {
      const std::size_t len = s.end - s.begin;
      PlaSegment model = s.segment.rebased(static_cast<std::int64_t>(s.begin));
      const Key leaf_boundary = out.empty() ? boundary : keys[s.begin];
      out.push_back(build_leaf(
          std::span<const Key>(keys.data() + s.begin, len),
          std::span<const Value>(values.data() + s.begin, len), leaf_boundary,
          &model));
      audit_.split_leaves_produced.fetch_add(1, std::memory_order_relaxed);
      std::uint64_t prev =
          audit_.max_split_leaf_fill.load(std::memory_order_relaxed);
      while (len > prev && !audit_.max_split_leaf_fill.compare_exchange_weak(
                               prev, len, std::memory_order_relaxed)) {
      }
      if (len > cfg_.retrain_bound()) {
        audit_.retrain_bound_violations.fetch_add(1,
                                                  std::memory_order_relaxed);
      }
    }
    return out;
  }

  BuiltInner build_inner_from_segments(
      const std::vector<HostChildEntry>& entries,
      std::span<const TrainedSegment> segs, std::uint8_t level) {
    auto host = std::make_unique<HostInner>();
    host->uid = alloc_uid();
    host->level = level;

    auto device = std::make_unique<InnerNode>();
    device->uid = host->uid;
    device->level = level;
    device->pivot_capacity = cfg_.pivot_capacity;
    device->segment_count = static_cast<std::uint32_t>(segs.size());

    for (std::size_t si = 0; si < segs.size(); ++si) {
      const TrainedSegment& s = segs[si];
      const std::size_t len = s.end - s.begin;
      HostInner::Segment hseg;
      hseg.first_key = entries[s.begin].pivot;
      hseg.model = s.segment.rebased(static_cast<std::int64_t>(s.begin));
      hseg.children.assign(entries.begin() + s.begin, entries.begin() + s.end);

      InnerSegmentDir& dir = device->dirs[si];
      dir.pivot_count = static_cast<std::uint16_t>(len);
      dir.pivots.assign(cfg_.pivot_capacity, kKeySentinel);
      dir.children = std::vector<NodeRef>(cfg_.pivot_capacity);
      for (std::size_t j = 0; j < len; ++j) {
        dir.pivots[j] = entries[s.begin + j].pivot;
        dir.children[j].store(entries[s.begin + j].device,
                              std::memory_order_relaxed);
      }
      // A chunk re-anchor can cost one slot at the edges; refit if the
      // bound no longer holds on this slice.
      std::span<const Key> pv(dir.pivots.data(), len);
      if (!cfg_.eps.infinite_mode && !verify_bound(hseg.model, pv, 0)) {
        auto refit = train_segments(pv, inner_epsilon());
        if (refit.size() == 1) hseg.model = refit[0].segment;
      }
      device->segment_first_keys[si] = hseg.first_key;
      device->models[si] = hseg.model;
      host->segments.push_back(std::move(hseg));
    }
    std::uint64_t prev =
        audit_.max_inner_segments.load(std::memory_order_relaxed);
    while (segs.size() > prev &&
           !audit_.max_inner_segments.compare_exchange_weak(
               prev, segs.size(), std::memory_order_relaxed)) {
    }

    host->device = device.get();
    BuiltInner out{host.get(), device.get()};
    register_node(std::move(host), std::move(device));
    return out;
  }

  // Segment `entries` by their pivots and pack the segments into
  // ceil(S/7) nodes with balanced segment counts ({5,4} for 9 segments).
  std::vector<BuiltInner> build_inner_row(
      const std::vector<HostChildEntry>& entries, std::uint8_t level) {
    std::vector<Key> pivots(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      pivots[i] = entries[i].pivot;
    }
    auto segs = segment_keys(pivots, inner_epsilon(), cfg_.pivot_capacity);
    const std::size_t node_count =
        (segs.size() + kSegmentsPerInner - 1) / kSegmentsPerInner;
    const std::size_t base = segs.size() / node_count;
    const std::size_t extra = segs.size() % node_count;

    std::vector<BuiltInner> out;
    out.reserve(node_count);
    std::size_t next_seg = 0;
    for (std::size_t n = 0; n < node_count; ++n) {
      const std::size_t take = base + (n < extra ? 1 : 0);
      std::vector<TrainedSegment> local(segs.begin() + next_seg,
                                        segs.begin() + next_seg + take);
      const std::size_t entry_begin = local.front().begin;
      const std::size_t entry_end = local.back().end;
      std::vector<HostChildEntry> sub(entries.begin() + entry_begin,
                                      entries.begin() + entry_end);
      for (auto& s : local) {
        s.begin -= entry_begin;
        s.end -= entry_begin;
      }
      out.push_back(build_inner_from_segments(sub, local, level));
      next_seg += take;
    }
    return out;
  }

  // Builds inner levels above `entries` until a single node remains.
  HostNode* build_inner_levels(std::vector<HostChildEntry> entries) {
    std::uint8_t level =
        entries.front().host == nullptr
            ? 1
            : static_cast<std::uint8_t>(entries.front().host->level + 1);
    std::vector<BuiltInner> row = build_inner_row(entries, level);
    while (row.size() > 1) {
      std::vector<HostChildEntry> next;
      next.reserve(row.size());
      for (const BuiltInner& b : row) {
        next.push_back(
            {b.host->segments.front().first_key, b.host, b.device_ptr});
      }
      ++level;
      row = build_inner_row(next, level);
    }
    return row.front().host;
  }

  // ---- structural patching ----------------------------------------------

  void structural_patch(std::shared_lock<std::shared_mutex> shared,
                        HostLeaf* target,
                        const std::vector<std::pair<Key, Value>>& merged) {
    // Single-leaf outcomes only need one pointer swap in the parent; they
    // run under the shared lock plus the parent's maintenance mutex.
    std::vector<Key> keys(merged.size());
    for (std::size_t i = 0; i < merged.size(); ++i) keys[i] = merged[i].first;
    const bool single =
        merged.empty() ||
        (merged.size() <= cfg_.leaf_capacity &&
         segment_keys(keys, leaf_epsilon(), cfg_.leaf_capacity).size() == 1);

    if (single && root_ != nullptr && !root_->is_leaf) {
      if (fast_single_swap(target, merged)) return;
    }

    shared.unlock();
    std::unique_lock<std::shared_mutex> exclusive(structure_mutex_);
    HostLeaf* live = target->replaced.load(std::memory_order_acquire)
                         ? descend_to(target->min_key).leaf
                         : target;
    if (live == nullptr) {
      throw ProtocolFault("structural patch lost its target leaf");
    }
    cascade_replace(live, merged);
    purge_graveyard();
  }

  bool fast_single_swap(HostLeaf* target,
                        const std::vector<std::pair<Key, Value>>& merged) {
    for (int attempt = 0; attempt < 16; ++attempt) {
      DescentPath path = descend_to(target->min_key);
      if (path.leaf != target || path.steps.empty()) return false;
      PathStep tail = path.steps.back();
      std::unique_lock<std::mutex> parent_lock(tail.node->maintenance);
      if (tail.node->replaced.load(std::memory_order_acquire)) continue;
      HostChildEntry& entry =
          tail.node->segments[tail.segment].children[tail.slot];
      if (std::atomic_ref<HostNode*>(entry.host)
              .load(std::memory_order_acquire) != target) {
        continue;
      }

      std::vector<BuiltLeaf> leaves =
          build_replacement_leaves(merged, target->min_key);
      if (leaves.size() != 1) {
        unregister_unused(leaves);
        return false;  // lost the single-segment bet; go exclusive
      }
      BuiltLeaf nl = leaves[0];

      // A top-level leaf's COPY rides its subtree queue while the CONNECT
      // into the root node is a root-level stitch on queue 0; the
      // stitcher's uid probe defers the CONNECT until the COPY lands.
      const bool parent_is_root = tail.node == root_;
      const std::size_t copy_part =
          parent_is_root
              ? partition_of(tail.flat_index, fabric_.partition_count())
              : connect_partition(path);
      const std::size_t conn_part = parent_is_root ? kRootPartition : copy_part;

      fabric_.enqueue(copy_part, StitchCommand::copy(take_payload(nl.host)));
      fabric_.enqueue(conn_part,
                      StitchCommand::connect(tail.node->uid, tail.segment,
                                             tail.slot, nl.device_ptr,
                                             {target->uid}));
      fabric_.enqueue(conn_part, StitchCommand::clear_buffer(target->uid));

      std::atomic_ref<HostNode*>(entry.host)
          .store(nl.host, std::memory_order_release);
      entry.device = nl.device_ptr;
      target->replaced.store(true, std::memory_order_release);
      return true;
    }
    return false;
  }

  // Exclusive-lock cascade: replace `leaf` with retrain-bounded leaves and
  // rebuild ancestors bottom-up until a level absorbs the change or a new
  // root is installed.
  void cascade_replace(HostLeaf* leaf,
                       const std::vector<std::pair<Key, Value>>& merged) {
    DescentPath path = descend_to(leaf->min_key);
    if (path.leaf != leaf) {
      throw ProtocolFault("exclusive descent diverged from patch target");
    }

    std::vector<BuiltLeaf> leaves =
        build_replacement_leaves(merged, leaf->min_key);
    std::vector<std::uint64_t> retired{leaf->uid};
    leaf->replaced.store(true, std::memory_order_release);

    std::vector<HostChildEntry> replacements;
    for (const BuiltLeaf& l : leaves) {
      replacements.push_back({l.host->min_key, l.host, l.device_ptr});
    }

    for (std::size_t depth = path.steps.size(); depth-- > 0;) {
      PathStep step = path.steps[depth];
      HostInner* parent = step.node;
      std::lock_guard<std::mutex> guard(parent->maintenance);
      audit_.parent_rebuilds.fetch_add(1, std::memory_order_relaxed);

      std::vector<HostChildEntry> newlist;
      for (std::size_t si = 0; si < parent->segments.size(); ++si) {
        for (std::size_t j = 0; j < parent->segments[si].children.size();
             ++j) {
          if (si == step.segment && j == step.slot) {
            for (const auto& r : replacements) newlist.push_back(r);
          } else {
            newlist.push_back(parent->segments[si].children[j]);
          }
        }
      }

      std::vector<BuiltInner> row = build_inner_row(newlist, parent->level);
      parent->replaced.store(true, std::memory_order_release);
      retired.push_back(parent->uid);

      const Key row_boundary =
          depth > 0 ? pivot_of(path, depth - 1)
                    : row.front().host->segments.front().first_key;
      replacements.clear();
      for (std::size_t n = 0; n < row.size(); ++n) {
        const Key pivot =
            n == 0 ? row_boundary : row[n].host->segments.front().first_key;
        replacements.push_back({pivot, row[n].host, row[n].device_ptr});
      }

      if (row.size() == 1 && depth > 0) {
        // Absorbed: one CONNECT swaps the rebuilt node into its parent.
        PathStep up = path.steps[depth - 1];
        const std::size_t part = partition_of(path.steps[0].flat_index,
                                              fabric_.partition_count());
        const std::size_t conn_part =
            depth - 1 == 0 ? kRootPartition : part;
        emit_subtree_copies(replacements[0].host, part);
        fabric_.enqueue(conn_part,
                        StitchCommand::connect(up.node->uid, up.segment,
                                               up.slot, replacements[0].device,
                                               retired));
        fabric_.enqueue(conn_part, StitchCommand::clear_buffer(leaf->uid));
        HostChildEntry& entry =
            up.node->segments[up.segment].children[up.slot];
        std::atomic_ref<HostNode*>(entry.host)
            .store(replacements[0].host, std::memory_order_release);
        entry.device = replacements[0].device;
        return;
      }
    }

    install_new_root(std::move(replacements), std::move(retired), leaf->uid);
  }

  void install_new_root(std::vector<HostChildEntry> replacements,
                        std::vector<std::uint64_t> retired,
                        std::uint64_t cleared_leaf_uid) {
    HostNode* new_root = nullptr;
    if (replacements.size() == 1) {
      new_root = replacements[0].host;
      emit_subtree_copies(new_root, kRootPartition);
    } else {
      // Root split: new top-level nodes (and their subtrees) spread
      // round-robin across the partitions.
      audit_.root_splits.fetch_add(1, std::memory_order_relaxed);
      new_root = build_inner_levels(replacements);
      auto* top = static_cast<HostInner*>(new_root);
      std::size_t idx = 0;
      for (auto& seg : top->segments) {
        for (auto& child : seg.children) {
          emit_subtree_copies(
              child.host, partition_of(idx, fabric_.partition_count()));
          ++idx;
        }
      }
      emit_subtree_copies(new_root, kRootPartition);
    }

    // The root install itself is fenced behind every queue.
    fabric_.enqueue_fence_all();
    fabric_.enqueue(kRootPartition,
                    StitchCommand::connect(kRootParentUid, 0, 0,
                                           device_twin(new_root), retired));
    fabric_.enqueue(kRootPartition,
                    StitchCommand::clear_buffer(cleared_leaf_uid));
    audit_.root_installs.fetch_add(1, std::memory_order_relaxed);
    root_ = new_root;
  }

  // ---- helpers ------------------------------------------------------------

  // Emits COPYs for every not-yet-shipped node of `node`'s subtree,
  // children before parents. Nodes already device-resident terminate the
  // recursion.
  void emit_subtree_copies(HostNode* node, std::size_t partition) {
    if (node == nullptr || !has_pending_payload(node->uid)) return;
    if (!node->is_leaf) {
      for (auto& seg : static_cast<HostInner*>(node)->segments) {
        for (auto& c : seg.children) emit_subtree_copies(c.host, partition);
      }
    }
    fabric_.enqueue(partition, StitchCommand::copy(take_payload(node)));
  }

  bool has_pending_payload(std::uint64_t uid) const {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    return pending_payloads_.find(uid) != pending_payloads_.end();
  }

  std::unique_ptr<NodeBase> take_payload(HostNode* node) {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    auto it = pending_payloads_.find(node->uid);
    if (it == pending_payloads_.end()) {
      throw std::logic_error("payload already emitted for uid " +
                             std::to_string(node->uid));
    }
    std::unique_ptr<NodeBase> p = std::move(it->second);
    pending_payloads_.erase(it);
    return p;
  }

  NodeBase* device_twin(HostNode* node) const {
    if (node->is_leaf) return static_cast<HostLeaf*>(node)->device;
    return static_cast<HostInner*>(node)->device;
  }

  Key pivot_of(const DescentPath& path, std::size_t depth) const {
    const PathStep& s = path.steps[depth];
    return s.node->segments[s.segment].children[s.slot].pivot;
  }

  std::size_t connect_partition(const DescentPath& path) const {
    if (path.steps.empty()) return kRootPartition;
    return partition_of(path.steps[0].flat_index, fabric_.partition_count());
  }

  DescentPath descend_to(Key key) const {
    DescentPath out;
    HostNode* n = root_;
    while (n != nullptr && !n->is_leaf) {
      auto* inner = static_cast<HostInner*>(n);
      std::uint32_t seg = 0;
      for (std::uint32_t i = 1; i < inner->segments.size(); ++i) {
        if (inner->segments[i].first_key <= key) {
          seg = i;
        } else {
          break;
        }
      }
      const auto& children = inner->segments[seg].children;
      std::uint32_t slot = 0;
      for (std::uint32_t j = 1; j < children.size(); ++j) {
        if (children[j].pivot <= key) {
          slot = j;
        } else {
          break;
        }
      }
      std::size_t flat = slot;
      for (std::uint32_t i = 0; i < seg; ++i) {
        flat += inner->segments[i].children.size();
      }
      out.steps.push_back({inner, seg, slot, flat});
      n = std::atomic_ref<HostNode*>(
              const_cast<HostNode*&>(children[slot].host))
              .load(std::memory_order_acquire);
    }
    out.leaf = n != nullptr && n->is_leaf ? static_cast<HostLeaf*>(n) : nullptr;
    return out;
  }

  HostLeaf* find_leaf(std::uint64_t uid) const {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    auto it = nodes_.find(uid);
    if (it == nodes_.end() || !it->second->is_leaf) return nullptr;
    return static_cast<HostLeaf*>(it->second.get());
  }

  void register_node(std::unique_ptr<HostNode> node,
                     std::unique_ptr<NodeBase> payload) {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    pending_payloads_[node->uid] = std::move(payload);
    nodes_[node->uid] = std::move(node);
  }

  void unregister_unused(const std::vector<BuiltLeaf>& leaves) {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    for (const BuiltLeaf& l : leaves) {
      pending_payloads_.erase(l.host->uid);
      nodes_.erase(l.host->uid);
    }
  }

  // Replaced host nodes are deleted only under the exclusive lock, when no
  // shared-lock descent can still hold a pointer.
  void purge_graveyard() {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    for (auto it = nodes_.begin(); it != nodes_.end();) {
      if (it->second->replaced.load(std::memory_order_acquire)) {
        it = nodes_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void destroy_all() {
    std::lock_guard<std::mutex> lock(nodes_mutex_);
    nodes_.clear();
    pending_payloads_.clear();
    root_ = nullptr;
  }

  static void collect(HostNode* n, std::vector<std::pair<Key, Value>>& out) {
    if (n == nullptr) return;
    if (n->is_leaf) {
      auto* leaf = static_cast<HostLeaf*>(n);
      for (std::size_t i = 0; i < leaf->keys.size(); ++i) {
        out.emplace_back(
            leaf->keys[i],
            leaf->region->values[i].load(std::memory_order_relaxed));
      }
      return;
    }
    auto* inner = static_cast<HostInner*>(n);
    for (auto& seg : inner->segments) {
      for (auto& c : seg.children) {
        collect(std::atomic_ref<HostNode*>(
                    const_cast<HostNode*&>(c.host))
                    .load(std::memory_order_acquire),
                out);
      }
    }
  }

  DeviceTree& device_;
  StitchFabric& fabric_;
  HostEngineConfig cfg_;

  mutable std::shared_mutex structure_mutex_;
  HostNode* root_ = nullptr;
  std::atomic<std::uint64_t> next_uid_{1};

  mutable std::mutex nodes_mutex_;
  std::unordered_map<std::uint64_t, std::unique_ptr<HostNode>> nodes_;
  // Device payloads built but not yet shipped as COPY commands.
  std::unordered_map<std::uint64_t, std::unique_ptr<NodeBase>>
      pending_payloads_;

  Audit audit_;
};

// Patcher worker pool draining a shared patch queue.
class PatcherPool {
 public:
  PatcherPool(HostEngine& engine, PatchQueue& queue, std::size_t count)
      : engine_(engine), queue_(queue), count_(count) {}

  ~PatcherPool() { stop(); }

  void start() {
    if (!threads_.empty()) return;
    for (std::size_t i = 0; i < count_; ++i) {
      threads_.emplace_back([this] { run(); });
    }
  }

  void stop() {
    queue_.stop();
    for (auto& t : threads_) {
      if (t.joinable()) t.join();
    }
    threads_.clear();
  }

  bool has_fault() const { return fault_.load(std::memory_order_acquire); }
  std::string fault_message() const {
    std::lock_guard<std::mutex> lock(fault_mutex_);
    return fault_message_;
  }

 private:
  void run() {
    for (;;) {
      auto patch = queue_.pop_wait();
      if (!patch.has_value()) return;
      try {
        engine_.apply_patch(*patch);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(fault_mutex_);
        if (fault_message_.empty()) fault_message_ = e.what();
        fault_.store(true, std::memory_order_release);
      }
      queue_.done();
    }
  }

  HostEngine& engine_;
  PatchQueue& queue_;
  std::size_t count_;
  std::vector<std::thread> threads_;
  std::atomic<bool> fault_{false};
  mutable std::mutex fault_mutex_;
  mutable std::string fault_message_;
};

}  // namespace nicstore
