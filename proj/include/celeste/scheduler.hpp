#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "celeste/global_array.hpp"

namespace celeste {

/// Half-open task index range [first, last).
struct BatchRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first; }
};

struct SchedConfig {
  std::size_t total_tasks = 0;
  int fanout = 8;                // tree fan-out, >= 2
  double drain_fraction = 0.5;   // alpha in the batch-size law
  std::size_t min_batch = 4;
  std::size_t max_batch = 256;
};

/// Complete fanout-ary tree over ranks, rank 0 at the root.
struct SchedTree {
  int nranks = 0;
  int fanout = 0;
  std::vector<int> parent;                 // parent[0] == -1
  std::vector<std::vector<int>> children;
  int depth = 0;
};

SchedTree build_tree(int nranks, int fanout);

/// Batch-size law: n = clamp(ceil(remaining * alpha / workers), min_batch,
/// max_batch), never exceeding `remaining`; zero only at exhaustion.
std::size_t batch_size(std::size_t remaining, int workers_below,
                       const SchedConfig& cfg);

/// Tree-structured dynamic scheduler issuing shrinking batches of task
/// indices. Workers request from their parent's pool (the root serves
/// itself); empty pools replenish up the tree in parent-level chunks of
/// children * max_batch tasks. The batch-size law sees the global count
/// of not-yet-issued tasks, so batches shrink as the pool drains.
///
/// next_batch is safe for concurrent calls from all ranks; each pool has
/// its own lock and lock acquisition walks strictly rootward.
class Scheduler {
 public:
  Scheduler(const SchedConfig& cfg, int nranks, FabricModel fabric = {});

  /// Next range for `rank`, or nullopt once the pool chain is exhausted
  /// (idempotent afterwards).
  std::optional<BatchRange> next_batch(int rank);

  const SchedTree& tree() const { return tree_; }
  const SchedConfig& config() const { return cfg_; }

  std::size_t remaining() const {
    return unissued_.load(std::memory_order_relaxed);
  }

  struct Stats {
    std::uint64_t requests = 0;         // worker batch requests
    std::uint64_t refills = 0;          // pool replenishments
    double simulated_transfer_time_s = 0.0;
  };
  Stats stats() const;

  /// Test hook: record (pool rank, issued size, global remaining before
  /// issue) for every worker batch.
  void enable_trace();
  struct TraceEntry {
    int pool = 0;
    std::size_t issued = 0;
    std::size_t remaining_before = 0;
  };
  std::vector<TraceEntry> trace() const;

 private:
  struct Pool {
    std::mutex mu;
    std::size_t cur = 0;
    std::size_t end = 0;
    bool upstream_exhausted = false;
  };

  // requires pools_[pool].mu held; pulls a chunk from the parent chain
  void refill_locked(int pool);
  int pool_of(int rank) const;
  int workers_below(int pool) const;

  SchedConfig cfg_;
  SchedTree tree_;
  FabricModel fabric_;
  std::vector<std::unique_ptr<Pool>> pools_;
  std::atomic<std::size_t> unissued_;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> refills_{0};
  std::atomic<double> sim_time_s_{0.0};
  bool trace_enabled_ = false;
  mutable std::mutex trace_mu_;
  std::vector<TraceEntry> trace_;
};

}  // namespace celeste
