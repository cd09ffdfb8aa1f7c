#pragma once

// Device-domain request engine: per-traverser contexts executing
// GET/INSERT/UPDATE/DELETE/RANGE/PING against the device tree. The read
// path takes no locks: it follows atomic references through immutable
// nodes, scans per-leaf insert buffers with the two-counter protocol and
// consults the thread-owned hot cache. Writes append to insert buffers and
// emit exactly one patch request when they fill the last slot.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <thread>
#include <vector>

#include "nicstore/common.hpp"
#include "nicstore/cost_model.hpp"
#include "nicstore/device_tree.hpp"
#include "nicstore/epoch.hpp"
#include "nicstore/host_engine.hpp"
#include "nicstore/hot_cache.hpp"
#include "nicstore/message.hpp"
#include "nicstore/node.hpp"
#include "nicstore/pla.hpp"

namespace nicstore {

inline constexpr std::size_t kReceiveQueueDepth = 256;

struct TraverserContext {
  std::uint32_t id = 0;
  HotCache cache;
  AccessTrace trace;
  std::uint64_t requests = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_lookups = 0;
  std::uint64_t buffer_hits = 0;
  std::uint64_t patches_emitted = 0;
  std::uint64_t retries_returned = 0;

  explicit TraverserContext(std::uint32_t ctx_id)
      : id(ctx_id), cache(mix64(ctx_id + 0x5eedULL)) {}
};

struct NicEngineConfig {
  std::size_t traverser_count = 4;
  bool cache_enabled = true;
  bool cost_trace = true;
  // Fuzz harness switch: assert at every visit that the node was COPYed
  // and not reclaimed.
  bool validate_canary = false;
  // Latency-model injection: sleep each request for its modeled latency.
  bool inject_model_latency = false;
  LatencyConstants latency{};
  EpsilonConfig eps{};
};

class NicEngine {
 public:
  NicEngine(DeviceTree& tree, EpochManager& epochs, PatchQueue& patches,
            NicEngineConfig cfg)
      : tree_(tree), epochs_(epochs), patches_(patches), cfg_(cfg) {
    if (cfg_.inject_model_latency) cfg_.cost_trace = true;
    contexts_.reserve(cfg_.traverser_count);
    for (std::size_t i = 0; i < cfg_.traverser_count; ++i) {
      contexts_.push_back(
          std::make_unique<TraverserContext>(static_cast<std::uint32_t>(i)));
    }
  }

  const NicEngineConfig& config() const { return cfg_; }
  std::size_t traverser_count() const { return contexts_.size(); }
  TraverserContext& context(std::size_t i) { return *contexts_[i]; }

  // Must be invoked by the thread owning context `ctx_id`.
  Response handle(std::uint32_t ctx_id, const Request& req) {
    TraverserContext& ctx = *contexts_[ctx_id];
    AccessTrace* trace = cfg_.cost_trace ? &ctx.trace : nullptr;

    Response resp;
    resp.op = req.op;
    resp.request_id = req.request_id;
    try {
      switch (req.op) {
        case OpType::kPing:
          resp.status = Status::kOk;
          break;
        case OpType::kGet:
          handle_get(ctx, req, trace, resp);
          break;
        case OpType::kInsert:
        case OpType::kUpdate:
        case OpType::kDelete:
          handle_write(ctx, req, trace, resp);
          break;
        case OpType::kRange:
          handle_range(ctx, req, trace, resp);
          break;
        default:
          resp.status = Status::kMalformed;
          break;
      }
    } catch (const CorruptionError&) {
      corruption_errors_.fetch_add(1, std::memory_order_relaxed);
      resp.status = Status::kMalformed;
      resp.pairs.clear();
    }

    ++ctx.requests;
    if (trace != nullptr) {
      const double us =
          modeled_request_latency_us(trace->current(), cfg_.latency);
      trace->note_request_latency_ns(us * 1000.0);
      trace->request_boundary();
      if (cfg_.inject_model_latency && us > 0) {
        std::this_thread::sleep_for(std::chrono::nanoseconds(
            static_cast<std::uint64_t>(us * 1000.0)));
      }
    }
    epochs_.advance(ctx_id);
    return resp;
  }

  struct Stats {
    std::uint64_t requests = 0;
    std::uint64_t cache_hits = 0;
    std::uint64_t cache_lookups = 0;
    std::uint64_t buffer_hits = 0;
    std::uint64_t patches_emitted = 0;
    std::uint64_t retries_returned = 0;
    std::uint64_t corruption_errors = 0;
    std::uint64_t canary_violations = 0;
    AccessCounts access_totals{};
    double modeled_latency_ns_total = 0.0;
    std::uint64_t traced_requests = 0;
  };

  // Aggregate over contexts; exact when traversers are quiescent.
  Stats stats() const {
    Stats s;
    for (const auto& ctx : contexts_) {
      s.requests += ctx->requests;
      s.cache_hits += ctx->cache_hits;
      s.cache_lookups += ctx->cache_lookups;
      s.buffer_hits += ctx->buffer_hits;
      s.patches_emitted += ctx->patches_emitted;
      s.retries_returned += ctx->retries_returned;
      s.access_totals += ctx->trace.completed_total();
      s.modeled_latency_ns_total += ctx->trace.completed_latency_ns_total();
      s.traced_requests += ctx->trace.completed_requests();
    }
    s.corruption_errors = corruption_errors_.load(std::memory_order_relaxed);
    s.canary_violations = canary_violations_.load(std::memory_order_relaxed);
    return s;
  }

  std::uint64_t canary_violations() const {
    return canary_violations_.load(std::memory_order_relaxed);
  }

 private:
  void check_node(const NodeBase* node) {
    if (!cfg_.validate_canary) return;
    if (node->poisoned.load(std::memory_order_acquire)) {
      canary_violations_.fetch_add(1, std::memory_order_relaxed);
      throw CorruptionError("reader reached a reclaimed node");
    }
    if (!node->copied.load(std::memory_order_acquire)) {
      canary_violations_.fetch_add(1, std::memory_order_relaxed);
      throw CorruptionError("reader reached a node before its COPY landed");
    }
  }

  struct Descent {
    LeafNode* leaf = nullptr;
    // Smallest routing key strictly above the taken branch; sentinel on
    // the rightmost path. Range scans re-descend with this key.
    Key upper_bound = kKeySentinel;
  };

  Descent descend(Key key, AccessTrace* trace) {
    Descent out;
    NodeBase* node = tree_.root();
    if (node == nullptr) return out;
    while (true) {
      check_node(node);
      if (node->kind == NodeKind::kLeaf) {
        out.leaf = static_cast<LeafNode*>(node);
        record_access(trace, AccessClass::kDeviceMemory);  // leaf metadata
        return out;
      }
      auto* inner = static_cast<InnerNode*>(node);
      record_access(trace, AccessClass::kDeviceMemory);  // meta + first keys
      const std::uint32_t seg = locate_segment(*inner, key);
      ChildLookup next =
          locate_child(*inner, seg, key, cfg_.eps.infinite_mode, trace);
      // Track the tightest right boundary for range continuation.
      const InnerSegmentDir& dir = inner->dirs[seg];
      if (next.pivot_index + 1u < dir.pivot_count) {
        out.upper_bound =
            std::min(out.upper_bound, dir.pivots[next.pivot_index + 1]);
      } else if (seg + 1 < inner->segment_count) {
        out.upper_bound =
            std::min(out.upper_bound, inner->segment_first_keys[seg + 1]);
      }
      if (next.child == nullptr) {
        throw CorruptionError("null child reference");
      }
      node = next.child;
    }
  }

  std::uint32_t buffer_scan_lines(const InsertBuffer& buffer) const {
    const std::uint32_t n = buffer.reserved();
    if (n == 0) return 0;
    return (n * 17 + kLineBytes - 1) / kLineBytes;
  }

  void handle_get(TraverserContext& ctx, const Request& req,
                  AccessTrace* trace, Response& resp) {
    const bool use_cache = cfg_.cache_enabled && req.has_hint;
    if (use_cache) {
      ++ctx.cache_lookups;
      if (auto hit = ctx.cache.lookup(req.key, req.hint, trace)) {
        ++ctx.cache_hits;
        resp.status = Status::kOk;
        resp.value = *hit;
        return;
      }
    }

    Descent d = descend(req.key, trace);
    if (d.leaf == nullptr) {
      resp.status = Status::kRetry;  // tree not installed yet
      ++ctx.retries_returned;
      return;
    }

    // Insert buffer first: recently written entries win (early exit).
    const InsertBuffer& buffer = *d.leaf->buffer;
    record_access(trace, AccessClass::kDeviceMemory,
                  buffer_scan_lines(buffer));
    if (auto hit = buffer.lookup(req.key)) {
      ++ctx.buffer_hits;
      if (hit->tag == OpTag::kDelete) {
        resp.status = Status::kNotFound;
        return;
      }
      resp.status = Status::kOk;
      resp.value = hit->value;
      if (use_cache) ctx.cache.admit(req.key, hit->value, req.hint);
      return;
    }

    auto slot = leaf_locate(*d.leaf, req.key, cfg_.eps.infinite_mode, trace);
    if (!slot.has_value()) {
      resp.status = Status::kNotFound;
      return;
    }
    record_access(trace, AccessClass::kHostDma);  // value fetch
    resp.status = Status::kOk;
    resp.value = d.leaf->region->values[*slot].load(std::memory_order_relaxed);
    if (use_cache) ctx.cache.admit(req.key, resp.value, req.hint);
  }

  void handle_write(TraverserContext& ctx, const Request& req,
                    AccessTrace* trace, Response& resp) {
    Descent d = descend(req.key, trace);
    if (d.leaf == nullptr) {
      resp.status = Status::kRetry;
      ++ctx.retries_returned;
      return;
    }

    const OpTag tag = req.op == OpType::kInsert   ? OpTag::kInsert
                      : req.op == OpType::kUpdate ? OpTag::kUpdate
                                                  : OpTag::kDelete;
    InsertBuffer& buffer = *d.leaf->buffer;
    const auto appended = buffer.append(req.key, req.value, tag);
    record_access(trace, AccessClass::kDeviceMemory);  // slot write
    if (appended.status == InsertBuffer::AppendStatus::kFull) {
      resp.status = Status::kRetry;  // patch in flight; client re-enqueues
      ++ctx.retries_returned;
      return;
    }
    if (appended.filled_last_slot) {
      buffer.seal();
      patches_.push({d.leaf->uid, d.leaf->min_key, ctx.id});
      ++ctx.patches_emitted;
    }
    if (cfg_.cache_enabled && req.has_hint &&
        (tag == OpTag::kUpdate || tag == OpTag::kDelete)) {
      ctx.cache.invalidate(req.key, req.hint);
    }
    resp.status = Status::kOk;
  }

  void handle_range(TraverserContext& ctx, const Request& req,
                    AccessTrace* trace, Response& resp) {
    std::uint32_t remaining = req.max_count;
    Key cursor = req.key;
    bool exhausted = false;

    while (remaining > 0) {
      Descent d = descend(cursor, trace);
      if (d.leaf == nullptr) {
        resp.status = Status::kRetry;
        ++ctx.retries_returned;
        resp.pairs.clear();
        return;
      }
      ++resp.leaf_descents;

      // Buffer effects for this leaf, last-writer-wins.
      const InsertBuffer& buffer = *d.leaf->buffer;
      record_access(trace, AccessClass::kDeviceMemory,
                    buffer_scan_lines(buffer));
      std::map<Key, std::optional<Value>> effects;
      for (const BufferEntry& e : buffer.visible_entries()) {
        if (e.key < cursor || e.key >= d.upper_bound) continue;
        if (e.tag == OpTag::kDelete) {
          effects[e.key] = std::nullopt;
        } else {
          effects[e.key] = e.value;
        }
      }

      const auto& keys = d.leaf->region->keys;
      auto slot = leaf_successor(*d.leaf, cursor, cfg_.eps.infinite_mode,
                                 trace);
      std::size_t i = slot.value_or(keys.size());
      auto eff = effects.begin();
      bool touched_values = false;
      while (remaining > 0) {
        const Key host_key = i < keys.size() ? keys[i] : kKeySentinel;
        const Key buf_key = eff != effects.end() ? eff->first : kKeySentinel;
        if (host_key == kKeySentinel && buf_key == kKeySentinel) break;
        if (buf_key <= host_key) {
          if (eff->second.has_value()) {
            resp.pairs.push_back({buf_key, *eff->second});
            --remaining;
          }
          if (buf_key == host_key) ++i;
          ++eff;
        } else {
          resp.pairs.push_back(
              {host_key,
               d.leaf->region->values[i].load(std::memory_order_relaxed)});
          touched_values = true;
          --remaining;
          ++i;
        }
      }
      if (touched_values) {
        record_access(trace, AccessClass::kHostDma);  // contiguous values
      }

      if (remaining == 0) break;
      if (d.upper_bound == kKeySentinel) {
        exhausted = true;
        break;
      }
      cursor = d.upper_bound;
    }

    resp.status = exhausted && !resp.pairs.empty() ? Status::kEndOfRange
                                                   : Status::kOk;
  }

  DeviceTree& tree_;
  EpochManager& epochs_;
  PatchQueue& patches_;
  NicEngineConfig cfg_;
  std::vector<std::unique_ptr<TraverserContext>> contexts_;
  std::atomic<std::uint64_t> corruption_errors_{0};
  std::atomic<std::uint64_t> canary_violations_{0};
};

}  // namespace nicstore
