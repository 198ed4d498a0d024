#include "celeste/scheduler.hpp"

#include <cmath>
#include <stdexcept>

namespace celeste {

namespace {
// request + reply payload for one scheduler exchange
constexpr std::uint64_t kMessageBytes = 32;
}  // namespace

SchedTree build_tree(int nranks, int fanout) {
  if (nranks < 1) throw std::domain_error("build_tree: nranks must be >= 1");
  if (fanout < 2) throw std::domain_error("build_tree: fanout must be >= 2");
  SchedTree t;
  t.nranks = nranks;
  t.fanout = fanout;
  t.parent.assign(nranks, -1);
  t.children.assign(nranks, {});
  for (int r = 1; r < nranks; ++r) {
    const int p = (r - 1) / fanout;
    t.parent[r] = p;
    t.children[p].push_back(r);
  }
  int depth = 0;
  for (int r = nranks - 1; r > 0; r = t.parent[r]) ++depth;
  t.depth = depth;
  return t;
}

std::size_t batch_size(std::size_t remaining, int workers_below,
                       const SchedConfig& cfg) {
  if (workers_below < 1) {
    throw std::domain_error("batch_size: workers_below must be >= 1");
  }
  if (remaining == 0) return 0;
  const double raw = std::ceil(static_cast<double>(remaining) *
                               cfg.drain_fraction / workers_below);
  auto n = static_cast<std::size_t>(raw);
  n = std::max(n, cfg.min_batch);
  n = std::min(n, cfg.max_batch);
  return std::min(n, remaining);
}

Scheduler::Scheduler(const SchedConfig& cfg, int nranks, FabricModel fabric)
    : cfg_(cfg),
      tree_(build_tree(nranks, cfg.fanout)),
      fabric_(fabric),
      unissued_(cfg.total_tasks) {
  pools_.reserve(nranks);
  for (int r = 0; r < nranks; ++r) {
    pools_.push_back(std::make_unique<Pool>());
  }
  pools_[0]->cur = 0;
  pools_[0]->end = cfg.total_tasks;
}

int Scheduler::pool_of(int rank) const {
  return rank == 0 ? 0 : tree_.parent[rank];
}

int Scheduler::workers_below(int pool) const {
  return static_cast<int>(tree_.children[pool].size()) + (pool == 0 ? 1 : 0);
}

void Scheduler::refill_locked(int pool) {
  // pools_[pool]->mu is held; walk one level rootward
  Pool& self = *pools_[pool];
  const int src = pool_of(pool);
  Pool& parent = *pools_[src];
  std::scoped_lock lock(parent.mu);
  while (parent.cur == parent.end && src != 0 && !parent.upstream_exhausted) {
    refill_locked(src);
  }
  const std::size_t avail = parent.end - parent.cur;
  const std::size_t want = tree_.children[pool].size() * cfg_.max_batch;
  const std::size_t take = std::min(want, avail);
  if (take == 0) {
    self.upstream_exhausted = true;
    return;
  }
  self.cur = parent.cur;
  self.end = parent.cur + take;
  parent.cur += take;
  refills_.fetch_add(1, std::memory_order_relaxed);
  if (fabric_.latency_s > 0.0 || fabric_.bandwidth_bytes_per_s > 0.0) {
    double t = fabric_.latency_s;
    if (fabric_.bandwidth_bytes_per_s > 0.0) {
      t += static_cast<double>(kMessageBytes) / fabric_.bandwidth_bytes_per_s;
    }
    sim_time_s_.fetch_add(t, std::memory_order_relaxed);
  }
}

std::optional<BatchRange> Scheduler::next_batch(int rank) {
  if (rank < 0 || rank >= tree_.nranks) {
    throw std::out_of_range("next_batch: bad rank");
  }
  const int p = pool_of(rank);
  Pool& pool = *pools_[p];
  std::scoped_lock lock(pool.mu);
  requests_.fetch_add(1, std::memory_order_relaxed);
  if (rank != p &&
      (fabric_.latency_s > 0.0 || fabric_.bandwidth_bytes_per_s > 0.0)) {
    double t = fabric_.latency_s;
    if (fabric_.bandwidth_bytes_per_s > 0.0) {
      t += static_cast<double>(kMessageBytes) / fabric_.bandwidth_bytes_per_s;
    }
    sim_time_s_.fetch_add(t, std::memory_order_relaxed);
  }

  while (pool.cur == pool.end) {
    if (p == 0 || pool.upstream_exhausted) return std::nullopt;
    refill_locked(p);
  }

  const std::size_t remaining_before =
      unissued_.load(std::memory_order_relaxed);
  std::size_t n = batch_size(remaining_before, workers_below(p), cfg_);
  n = std::min(n, pool.end - pool.cur);

  BatchRange batch{pool.cur, pool.cur + n};
  pool.cur += n;
  unissued_.fetch_sub(n, std::memory_order_relaxed);

  if (trace_enabled_) {
    std::scoped_lock tlock(trace_mu_);
    trace_.push_back({p, n, remaining_before});
  }
  return batch;
}

Scheduler::Stats Scheduler::stats() const {
  Stats s;
  s.requests = requests_.load(std::memory_order_relaxed);
  s.refills = refills_.load(std::memory_order_relaxed);
  s.simulated_transfer_time_s = sim_time_s_.load(std::memory_order_relaxed);
  return s;
}

void Scheduler::enable_trace() { trace_enabled_ = true; }

std::vector<Scheduler::TraceEntry> Scheduler::trace() const {
  std::scoped_lock lock(trace_mu_);
  return trace_;
}

}  // namespace celeste
