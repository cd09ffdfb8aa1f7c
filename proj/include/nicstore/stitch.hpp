#pragma once

// Host-to-device command channel. COPY installs a pre-built immutable node,
// CONNECT swaps one child reference (or the root pointer) and retires the
// nodes the swap obsoleted, CLEAR_BUFFER resets a live leaf's insert
// buffer, FENCE synchronizes all queues before a root install. One worker
// drains each partition queue in sequence order; CONNECTs whose target uid
// has not been copied yet are deferred and retried after later COPYs land.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "nicstore/common.hpp"
#include "nicstore/device_tree.hpp"
#include "nicstore/epoch.hpp"

namespace nicstore {

inline constexpr std::uint64_t kRootParentUid = 0;

struct StitchCommand {
  enum class Kind : std::uint8_t { kCopy, kConnect, kClearBuffer, kFence };

  Kind kind = Kind::kCopy;
  std::uint64_t seq = 0;  // per-queue, assigned at enqueue

  // COPY: payload + uid. CLEAR_BUFFER: uid of the leaf.
  std::unique_ptr<NodeBase> payload;
  std::uint64_t uid = 0;

  // CONNECT
  std::uint64_t parent_uid = 0;  // kRootParentUid installs the root
  std::uint32_t segment = 0;
  std::uint32_t slot = 0;
  NodeBase* child = nullptr;
  std::uint64_t child_uid = 0;
  std::vector<std::uint64_t> retire_uids;  // obsoleted by this swap

  // FENCE
  std::uint64_t barrier_id = 0;

  std::size_t payload_bytes() const {
    if (kind != Kind::kCopy || payload == nullptr) return 0;
    if (payload->kind == NodeKind::kLeaf) {
      return static_cast<const LeafNode*>(payload.get())->device_bytes();
    }
    return static_cast<const InnerNode*>(payload.get())->device_bytes();
  }

  static StitchCommand copy(std::unique_ptr<NodeBase> node) {
    StitchCommand c;
    c.kind = Kind::kCopy;
    c.uid = node->uid;
    c.payload = std::move(node);
    return c;
  }

  static StitchCommand connect(std::uint64_t parent_uid, std::uint32_t segment,
                               std::uint32_t slot, NodeBase* child,
                               std::vector<std::uint64_t> retire = {}) {
    StitchCommand c;
    c.kind = Kind::kConnect;
    c.parent_uid = parent_uid;
    c.segment = segment;
    c.slot = slot;
    c.child = child;
    c.child_uid = child->uid;
    c.retire_uids = std::move(retire);
    return c;
  }

  static StitchCommand clear_buffer(std::uint64_t leaf_uid) {
    StitchCommand c;
    c.kind = Kind::kClearBuffer;
    c.uid = leaf_uid;
    return c;
  }

  static StitchCommand fence(std::uint64_t barrier_id) {
    StitchCommand c;
    c.kind = Kind::kFence;
    c.barrier_id = barrier_id;
    return c;
  }
};

// Deterministic subtree-to-queue routing: all stitches for the subtree
// under top-level child i go to queue i mod S; root-level stitches go to
// queue 0.
inline std::size_t partition_of(std::size_t top_level_child_index,
                                std::size_t partition_count) {
  return top_level_child_index % partition_count;
}

inline constexpr std::size_t kRootPartition = 0;

// Round-robin distribution of new top-level nodes across partitions after
// a root split, keeping partition loads balanced.
inline std::vector<std::vector<std::size_t>> root_split_plan(
    std::size_t new_top_level_count, std::size_t partition_count) {
  std::vector<std::vector<std::size_t>> per_partition(partition_count);
  for (std::size_t i = 0; i < new_top_level_count; ++i) {
    per_partition[partition_of(i, partition_count)].push_back(i);
  }
  return per_partition;
}

struct ChannelModel {
  std::uint64_t per_command_ns = 0;
  double per_byte_ns = 0.0;  // models the host-to-device copy bandwidth
  std::size_t queue_capacity = 4096;
};

class StitchFabric {
 public:
  StitchFabric(DeviceTree& tree, EpochManager& epochs,
               std::size_t partition_count, ChannelModel model = {})
      : tree_(tree),
        epochs_(epochs),
        model_(model),
        queues_(partition_count) {}

  ~StitchFabric() { stop(); }

  std::size_t partition_count() const { return queues_.size(); }

  std::uint64_t next_barrier_id() {
    return barrier_seq_.fetch_add(1, std::memory_order_relaxed) + 1;
  }

  // Multi-producer; blocks when the queue is full and counts the stall.
  void enqueue(std::size_t partition, StitchCommand cmd) {
    Queue& q = queues_[partition];
    std::unique_lock<std::mutex> lock(q.mutex);
    if (q.commands.size() >= model_.queue_capacity) {
      ++q.stalls;
      q.producer_cv.wait(lock, [&] {
        return q.commands.size() < model_.queue_capacity;
      });
    }
    cmd.seq = ++q.seq;
    if (cmd.kind == StitchCommand::Kind::kCopy) {
      bytes_enqueued_.fetch_add(cmd.payload_bytes(),
                                std::memory_order_relaxed);
      copy_enqueued_.fetch_add(1, std::memory_order_relaxed);
    }
    commands_enqueued_.fetch_add(1, std::memory_order_relaxed);
    q.commands.push_back(std::move(cmd));
    q.worker_cv.notify_all();
  }

  // Enqueue the same fence on every queue. The final root CONNECT must be
  // enqueued after this on the root partition.
  std::uint64_t enqueue_fence_all() {
    const std::uint64_t id = next_barrier_id();
    for (std::size_t p = 0; p < queues_.size(); ++p) {
      enqueue(p, StitchCommand::fence(id));
    }
    return id;
  }

  void start() {
    if (!workers_.empty()) return;
    stop_.store(false, std::memory_order_release);
    for (std::size_t p = 0; p < queues_.size(); ++p) {
      workers_.emplace_back([this, p] { run_worker(p); });
    }
  }

  void stop() {
    stop_.store(true, std::memory_order_release);
    for (auto& q : queues_) {
      std::lock_guard<std::mutex> lock(q.mutex);
      q.worker_cv.notify_all();
      q.producer_cv.notify_all();
    }
    barrier_cv_.notify_all();
    for (auto& w : workers_) {
      if (w.joinable()) w.join();
    }
    workers_.clear();
  }

  // Single-threaded drain for deterministic tests: applies commands without
  // worker threads until everything has landed. Fences resolve because all
  // queues are driven from this one caller.
  void drain_inline() {
    bool progress = true;
    while (progress) {
      progress = false;
      for (std::size_t p = 0; p < queues_.size(); ++p) {
        while (step_inline(p)) progress = true;
      }
      if (!progress && retry_deferred_all()) progress = true;
    }
    check_drained();
  }

  // Waits until every queue is empty, nothing is deferred and workers are
  // idle. Throws ProtocolFault if the stream cannot complete.
  void wait_drained() {
    for (;;) {
      if (fault_.load(std::memory_order_acquire)) {
        throw ProtocolFault(fault_message());
      }
      if (drained()) {
        check_drained();
        return;
      }
      std::this_thread::sleep_for(std::chrono::microseconds(200));
    }
  }

  bool has_fault() const { return fault_.load(std::memory_order_acquire); }
  std::string fault_message() const {
    std::lock_guard<std::mutex> lock(fault_mutex_);
    return fault_message_;
  }

  struct Counters {
    std::uint64_t commands_applied = 0;
    std::uint64_t copies_applied = 0;
    std::uint64_t connects_applied = 0;
    std::uint64_t clears_applied = 0;
    std::uint64_t fences_applied = 0;
    std::uint64_t deferred_connects = 0;
    std::uint64_t copy_bytes = 0;
    std::uint64_t copy_commands = 0;
    std::uint64_t producer_stalls = 0;
  };

  Counters counters() const {
    Counters c;
    c.commands_applied = applied_total_.load(std::memory_order_relaxed);
    c.copies_applied = copies_applied_.load(std::memory_order_relaxed);
    c.connects_applied = connects_applied_.load(std::memory_order_relaxed);
    c.clears_applied = clears_applied_.load(std::memory_order_relaxed);
    c.fences_applied = fences_applied_.load(std::memory_order_relaxed);
    c.deferred_connects = deferrals_.load(std::memory_order_relaxed);
    c.copy_bytes = bytes_enqueued_.load(std::memory_order_relaxed);
    c.copy_commands = copy_enqueued_.load(std::memory_order_relaxed);
    for (const auto& q : queues_) {
      std::lock_guard<std::mutex> lock(q.mutex);
      c.producer_stalls += q.stalls;
    }
    return c;
  }

 private:
  struct Queue {
    mutable std::mutex mutex;
    std::condition_variable worker_cv;
    std::condition_variable producer_cv;
    std::deque<StitchCommand> commands;
    std::vector<StitchCommand> deferred;
    std::uint64_t seq = 0;
    std::uint64_t stalls = 0;
    std::uint64_t copies_seen = 0;  // fabric-wide count at last retry
    bool busy = false;
  };

  void run_worker(std::size_t qid) {
    Queue& q = queues_[qid];
    for (;;) {
      StitchCommand cmd;
      {
        std::unique_lock<std::mutex> lock(q.mutex);
        q.worker_cv.wait(lock, [&] {
          return stop_.load(std::memory_order_acquire) ||
                 !q.commands.empty() ||
                 (!q.deferred.empty() &&
                  q.copies_seen !=
                      copies_applied_.load(std::memory_order_acquire));
        });
        if (stop_.load(std::memory_order_acquire)) return;
        if (q.commands.empty()) {
          lock.unlock();
          retry_deferred(qid);
          continue;
        }
        cmd = std::move(q.commands.front());
        q.commands.pop_front();
        q.busy = true;
        q.producer_cv.notify_all();
      }
      inject_latency(cmd);
      apply(qid, std::move(cmd));
      retry_deferred(qid);
      {
        std::lock_guard<std::mutex> lock(q.mutex);
        q.busy = false;
      }
    }
  }

  bool step_inline(std::size_t qid) {
    Queue& q = queues_[qid];
    StitchCommand cmd;
    {
      std::lock_guard<std::mutex> lock(q.mutex);
      if (q.commands.empty()) return false;
      if (q.commands.front().kind == StitchCommand::Kind::kFence) {
        // Inline mode: a fence resolves only when it is at the head of
        // every queue.
        if (!fence_ready_inline(q.commands.front().barrier_id)) return false;
      }
      cmd = std::move(q.commands.front());
      q.commands.pop_front();
    }
    if (cmd.kind == StitchCommand::Kind::kFence) {
      applied_total_.fetch_add(1, std::memory_order_relaxed);
      fences_applied_.fetch_add(1, std::memory_order_relaxed);
    } else {
      apply(qid, std::move(cmd));
    }
    retry_deferred(qid);
    return true;
  }

  bool fence_ready_inline(std::uint64_t id) const {
    for (const auto& q : queues_) {
      std::lock_guard<std::mutex> lock(q.mutex);
      if (q.commands.empty() ||
          q.commands.front().kind != StitchCommand::Kind::kFence ||
          q.commands.front().barrier_id != id) {
        return false;
      }
    }
    return true;
  }

  void inject_latency(const StitchCommand& cmd) {
    if (model_.per_command_ns == 0 && model_.per_byte_ns <= 0) return;
    const double ns = static_cast<double>(model_.per_command_ns) +
                      model_.per_byte_ns *
                          static_cast<double>(cmd.payload_bytes());
    if (ns > 0) {
      std::this_thread::sleep_for(
          std::chrono::nanoseconds(static_cast<std::uint64_t>(ns)));
    }
  }

  void apply(std::size_t qid, StitchCommand cmd) {
    switch (cmd.kind) {
      case StitchCommand::Kind::kCopy: {
        tree_.install(std::move(cmd.payload));
        copies_applied_.fetch_add(1, std::memory_order_acq_rel);
        // Wake every queue: a cross-queue deferred CONNECT may now resolve.
        for (auto& q : queues_) {
          std::lock_guard<std::mutex> lock(q.mutex);
          q.worker_cv.notify_all();
        }
        break;
      }
      case StitchCommand::Kind::kConnect: {
        if (!try_connect(cmd)) {
          Queue& q = queues_[qid];
          std::lock_guard<std::mutex> lock(q.mutex);
          deferrals_.fetch_add(1, std::memory_order_relaxed);
          q.deferred.push_back(std::move(cmd));
          return;  // applied counter bumps when it lands
        }
        connects_applied_.fetch_add(1, std::memory_order_relaxed);
        break;
      }
      case StitchCommand::Kind::kClearBuffer: {
        NodeBase* node = tree_.find(cmd.uid);
        if (node != nullptr && node->kind == NodeKind::kLeaf) {
          auto* leaf = static_cast<LeafNode*>(node);
          if (leaf->buffer) leaf->buffer->reset();
        }
        // A uid that was already retired by a preceding CONNECT is a
        // no-op: the old buffer stays readable for in-flight readers.
        clears_applied_.fetch_add(1, std::memory_order_relaxed);
        break;
      }
      case StitchCommand::Kind::kFence: {
        wait_barrier(cmd.barrier_id);
        fences_applied_.fetch_add(1, std::memory_order_relaxed);
        break;
      }
    }
    applied_total_.fetch_add(1, std::memory_order_relaxed);
  }

  // Returns false when parent or child uid is not installed yet.
  bool try_connect(StitchCommand& cmd) {
    NodeBase* child = tree_.find(cmd.child_uid);
    if (child == nullptr) return false;
    if (cmd.parent_uid == kRootParentUid) {
      tree_.swap_root(child);
    } else {
      NodeBase* parent = tree_.find(cmd.parent_uid);
      if (parent == nullptr) return false;
      if (parent->kind != NodeKind::kInner) {
        set_fault("CONNECT parent uid " + std::to_string(cmd.parent_uid) +
                  " is not an inner node");
        return true;
      }
      auto* inner = static_cast<InnerNode*>(parent);
      if (cmd.segment >= inner->segment_count ||
          cmd.slot >= inner->dirs[cmd.segment].pivot_count) {
        set_fault("CONNECT slot out of range in parent uid " +
                  std::to_string(cmd.parent_uid));
        return true;
      }
      inner->dirs[cmd.segment].children[cmd.slot].store(
          child, std::memory_order_release);
    }
    for (const std::uint64_t uid : cmd.retire_uids) {
      std::unique_ptr<NodeBase> dead = tree_.extract(uid);
      if (dead != nullptr) {
        NodeBase* raw = dead.release();
        epochs_.retire([this, raw] { tree_.dispose(raw); });
      }
    }
    return true;
  }

  void retry_deferred(std::size_t qid) {
    Queue& q = queues_[qid];
    std::vector<StitchCommand> pending;
    {
      std::lock_guard<std::mutex> lock(q.mutex);
      q.copies_seen = copies_applied_.load(std::memory_order_acquire);
      if (q.deferred.empty()) return;
      pending.swap(q.deferred);
    }
    std::vector<StitchCommand> still;
    for (auto& cmd : pending) {
      if (try_connect(cmd)) {
        connects_applied_.fetch_add(1, std::memory_order_relaxed);
        applied_total_.fetch_add(1, std::memory_order_relaxed);
      } else {
        still.push_back(std::move(cmd));
      }
    }
    if (!still.empty()) {
      std::lock_guard<std::mutex> lock(q.mutex);
      for (auto& cmd : still) q.deferred.push_back(std::move(cmd));
    }
  }

  bool retry_deferred_all() {
    const std::uint64_t before =
        connects_applied_.load(std::memory_order_relaxed);
    for (std::size_t p = 0; p < queues_.size(); ++p) retry_deferred(p);
    return connects_applied_.load(std::memory_order_relaxed) != before;
  }

  void wait_barrier(std::uint64_t id) {
    std::unique_lock<std::mutex> lock(barrier_mutex_);
    std::size_t& arrived = barrier_arrivals_[id];
    ++arrived;
    if (arrived >= queues_.size()) {
      barrier_cv_.notify_all();
    } else {
      barrier_cv_.wait(lock, [&] {
        return stop_.load(std::memory_order_acquire) ||
               barrier_arrivals_[id] >= queues_.size();
      });
    }
  }

  bool drained() const {
    for (const auto& q : queues_) {
      std::lock_guard<std::mutex> lock(q.mutex);
      if (!q.commands.empty() || q.busy) return false;
    }
    return true;
  }

  // After a full drain any leftover deferred CONNECT names a uid that will
  // never arrive: protocol fault, never silently dropped.
  void check_drained() {
    for (auto& q : queues_) {
      std::lock_guard<std::mutex> lock(q.mutex);
      if (!q.deferred.empty()) {
        set_fault("CONNECT with unknown uid after full drain (parent " +
                  std::to_string(q.deferred.front().parent_uid) + ", child " +
                  std::to_string(q.deferred.front().child_uid) + ")");
      } else if (!q.commands.empty()) {
        set_fault("stitch stream stuck behind an unsatisfiable fence");
      }
    }
    if (fault_.load(std::memory_order_acquire)) {
      throw ProtocolFault(fault_message());
    }
  }

  void set_fault(const std::string& msg) {
    {
      std::lock_guard<std::mutex> lock(fault_mutex_);
      if (fault_message_.empty()) fault_message_ = msg;
    }
    fault_.store(true, std::memory_order_release);
  }

  DeviceTree& tree_;
  EpochManager& epochs_;
  ChannelModel model_;
  std::vector<Queue> queues_;
  std::vector<std::thread> workers_;
  std::atomic<bool> stop_{false};

  std::mutex barrier_mutex_;
  std::condition_variable barrier_cv_;
  std::unordered_map<std::uint64_t, std::size_t> barrier_arrivals_;
  std::atomic<std::uint64_t> barrier_seq_{0};

  std::atomic<std::uint64_t> applied_total_{0};
  std::atomic<std::uint64_t> copies_applied_{0};
  std::atomic<std::uint64_t> connects_applied_{0};
  std::atomic<std::uint64_t> clears_applied_{0};
  std::atomic<std::uint64_t> fences_applied_{0};
  std::atomic<std::uint64_t> deferrals_{0};
  std::atomic<std::uint64_t> bytes_enqueued_{0};
  std::atomic<std::uint64_t> copy_enqueued_{0};

  mutable std::mutex fault_mutex_;
  std::string fault_message_;
  std::atomic<bool> fault_{false};
};

}  // namespace nicstore
