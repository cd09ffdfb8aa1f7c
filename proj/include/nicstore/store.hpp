#pragma once

// Full store assembly: device tree + host replica + stitch fabric +
// patcher pool + traverser engine, with lifecycle, quiescing and
// reclamation wiring. The transport layer (UDP server or a test harness)
// drives NicEngine::handle on per-context threads.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "nicstore/cost_model.hpp"
#include "nicstore/device_tree.hpp"
#include "nicstore/epoch.hpp"
#include "nicstore/host_engine.hpp"
#include "nicstore/nic_engine.hpp"
#include "nicstore/stitch.hpp"

namespace nicstore {

struct StoreConfig {
  std::size_t traversers = 4;
  std::size_t patchers = 4;
  std::size_t partitions = 4;
  EpsilonConfig eps{};
  std::uint32_t leaf_capacity = kDefaultLeafCapacity;
  std::uint32_t buffer_capacity = kDefaultBufferCapacity;
  std::uint32_t pivot_capacity = kMaxPivotsPerSegment;
  double retrain_fraction = 0.25;
  bool cache_enabled = true;
  bool cost_trace = true;
  bool validate_canary = false;
  bool inject_model_latency = false;
  LatencyConstants latency{};
  ChannelModel channel{};
  // Reclamation cadence; 0 disables the background collector.
  std::uint32_t collect_interval_us = 500;

  NicEngineConfig nic_config() const {
    NicEngineConfig c;
    c.traverser_count = traversers;
    c.cache_enabled = cache_enabled;
    c.cost_trace = cost_trace;
    c.validate_canary = validate_canary;
    c.inject_model_latency = inject_model_latency;
    c.latency = latency;
    c.eps = eps;
    return c;
  }

  HostEngineConfig host_config() const {
    HostEngineConfig c;
    c.eps = eps;
    c.leaf_capacity = leaf_capacity;
    c.buffer_capacity = buffer_capacity;
    c.pivot_capacity = pivot_capacity;
    c.retrain_fraction = retrain_fraction;
    c.patcher_count = patchers;
    return c;
  }
};

class Store {
 public:
  explicit Store(StoreConfig cfg)
      : cfg_(cfg),
        epochs_(cfg.traversers),
        fabric_(tree_, epochs_, cfg.partitions, cfg.channel),
        host_(tree_, fabric_, cfg.host_config()),
        patchers_(host_, patch_queue_, cfg.patchers),
        nic_(tree_, epochs_, patch_queue_, cfg.nic_config()) {
    tree_.enable_quarantine(cfg.validate_canary);
  }

  ~Store() { stop(); }

  const StoreConfig& config() const { return cfg_; }

  void start() {
    if (started_) return;
    started_ = true;
    fabric_.start();
    patchers_.start();
    if (cfg_.collect_interval_us > 0) {
      collector_stop_.store(false, std::memory_order_release);
      collector_ = std::thread([this] {
        while (!collector_stop_.load(std::memory_order_acquire)) {
          epochs_.collect();
          std::this_thread::sleep_for(
              std::chrono::microseconds(cfg_.collect_interval_us));
        }
      });
    }
  }

  void stop() {
    if (!started_) return;
    started_ = false;
    collector_stop_.store(true, std::memory_order_release);
    if (collector_.joinable()) collector_.join();
    patchers_.stop();
    fabric_.stop();
    epochs_.drain_unsafe();
  }

  // Builds the tree and blocks until the final root stitch has landed on
  // the device side.
  void bulk_load(std::span<const Key> keys, std::span<const Value> values) {
    host_.bulk_load(keys, values);
    if (started_) {
      fabric_.wait_drained();
    } else {
      fabric_.drain_inline();
    }
  }

  Response handle(std::uint32_t ctx_id, const Request& req) {
    return nic_.handle(ctx_id, req);
  }

  // Callers must have stopped issuing requests. Blocks until every emitted
  // patch is applied and every stitch has landed.
  void quiesce() {
    patch_queue_.wait_idle();
    if (started_) {
      fabric_.wait_drained();
    } else {
      fabric_.drain_inline();
    }
    // Settle patches emitted by stragglers between the two waits.
    patch_queue_.wait_idle();
    epochs_.collect();
  }

  bool healthy() const {
    return !fabric_.has_fault() && !patchers_.has_fault();
  }
  std::string fault_message() const {
    if (fabric_.has_fault()) return fabric_.fault_message();
    if (patchers_.has_fault()) return patchers_.fault_message();
    return {};
  }

  DeviceTree& device_tree() { return tree_; }
  EpochManager& epochs() { return epochs_; }
  StitchFabric& fabric() { return fabric_; }
  PatchQueue& patch_queue() { return patch_queue_; }
  HostEngine& host() { return host_; }
  NicEngine& nic() { return nic_; }

 private:
  StoreConfig cfg_;
  DeviceTree tree_;
  EpochManager epochs_;
  StitchFabric fabric_;
  PatchQueue patch_queue_;
  HostEngine host_;
  PatcherPool patchers_;
  NicEngine nic_;
  std::thread collector_;
  std::atomic<bool> collector_stop_{true};
  bool started_ = false;
};

}  // namespace nicstore
