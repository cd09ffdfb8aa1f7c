#pragma once

// Emulated device domain: the root reference, the uid registry stitchers
// probe, and ownership of all installed nodes. Traversers never touch the
// registry; they follow the root and child references only.

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "nicstore/node.hpp"

namespace nicstore {

class DeviceTree {
 public:
  NodeBase* root() const { return root_.load(std::memory_order_acquire); }

  void swap_root(NodeBase* node) {
    root_.store(node, std::memory_order_release);
  }

  // COPY stitch: take ownership, publish the uid, mark readable.
  void install(std::unique_ptr<NodeBase> node) {
    NodeBase* raw = node.get();
    {
      std::lock_guard<std::mutex> lock(mutex_);
      nodes_[raw->uid] = std::move(node);
    }
    raw->copied.store(true, std::memory_order_release);
  }

  // UID probe: non-null only once the COPY has been applied.
  NodeBase* find(std::uint64_t uid) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = nodes_.find(uid);
    return it == nodes_.end() ? nullptr : it->second.get();
  }

  // Unregister a node that became unreachable; the caller hands it to the
  // epoch manager.
  std::unique_ptr<NodeBase> extract(std::uint64_t uid) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = nodes_.find(uid);
    if (it == nodes_.end()) return nullptr;
    std::unique_ptr<NodeBase> out = std::move(it->second);
    nodes_.erase(it);
    return out;
  }

  // Logical free. With quarantine on (reclamation fuzzing), memory is kept
  // alive but poisoned so a late reader would be caught, not UB.
  void dispose(NodeBase* node) {
    node->poisoned.store(true, std::memory_order_release);
    if (quarantine_enabled_.load(std::memory_order_acquire)) {
      std::lock_guard<std::mutex> lock(quarantine_mutex_);
      quarantine_.emplace_back(node);
    } else {
      delete node;
    }
  }

  void enable_quarantine(bool on) {
    quarantine_enabled_.store(on, std::memory_order_release);
  }

  std::size_t registered_nodes() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return nodes_.size();
  }

  struct Stats {
    std::uint64_t inner_nodes = 0;
    std::uint64_t leaf_nodes = 0;
    std::uint64_t segments = 0;
    std::uint64_t pivot_entries = 0;
    std::uint64_t keys = 0;
    std::uint64_t device_index_bytes = 0;
    std::uint64_t raw_kv_bytes = 0;
    std::uint32_t depth = 0;
  };

  // Whole-tree walk; call on a quiesced store.
  Stats stats() const {
    Stats s;
    NodeBase* r = root();
    if (r != nullptr) walk(r, 1, s);
    return s;
  }

 private:
  static void walk(NodeBase* node, std::uint32_t depth, Stats& s) {
    if (depth > s.depth) s.depth = depth;
    if (node->kind == NodeKind::kLeaf) {
      auto* leaf = static_cast<LeafNode*>(node);
      ++s.leaf_nodes;
      s.keys += leaf->key_count;
      s.device_index_bytes += leaf->device_bytes();
      s.raw_kv_bytes += leaf->region ? leaf->region->raw_kv_bytes() : 0;
      return;
    }
    auto* inner = static_cast<InnerNode*>(node);
    ++s.inner_nodes;
    s.segments += inner->segment_count;
    s.device_index_bytes += inner->device_bytes();
    for (std::uint32_t i = 0; i < inner->segment_count; ++i) {
      const InnerSegmentDir& dir = inner->dirs[i];
      s.pivot_entries += dir.pivot_count;
      for (std::uint32_t j = 0; j < dir.pivot_count; ++j) {
        NodeBase* child = dir.children[j].load(std::memory_order_acquire);
        if (child != nullptr) walk(child, depth + 1, s);
      }
    }
  }

  std::atomic<NodeBase*> root_{nullptr};
  mutable std::mutex mutex_;
  std::unordered_map<std::uint64_t, std::unique_ptr<NodeBase>> nodes_;
  std::atomic<bool> quarantine_enabled_{false};
  std::mutex quarantine_mutex_;
  std::vector<std::unique_ptr<NodeBase>> quarantine_;
};

}  // namespace nicstore
