#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace celeste {

/// Simulated interconnect cost: each operation touching a remote chunk
/// pays the latency once per chunk plus bytes/bandwidth. Zero bandwidth
/// means transfers are uncosted; local traffic is always free.
struct FabricModel {
  double latency_s = 0.0;
  double bandwidth_bytes_per_s = 0.0;
};

struct TransferStats {
  std::uint64_t gets = 0;
  std::uint64_t puts = 0;
  std::uint64_t bytes_fetched_local = 0;
  std::uint64_t bytes_fetched_remote = 0;
  double simulated_transfer_time_s = 0.0;
};

/// Block-distributed one-dimensional array of fixed-size records with
/// one-sided get/put. Rank k owns the k-th contiguous chunk; chunk sizes
/// differ by at most one record. All ranks live in this process; the
/// fabric model stands in for the interconnect.
///
/// get/put are safe for concurrent use. Overlapping concurrent writes to
/// the same records are unspecified; a get that begins after a put to the
/// same range completes observes the put.
class GlobalArray {
 public:
  GlobalArray(std::size_t length, std::size_t record_size, int nranks,
              FabricModel fabric = {});

  std::size_t length() const { return length_; }
  std::size_t record_size() const { return record_size_; }
  int nranks() const { return nranks_; }

  struct Location {
    int rank = 0;
    std::size_t offset = 0;  // record offset within the rank's chunk
  };
  Location locate(std::size_t index) const;
  std::size_t chunk_begin(int rank) const;
  std::size_t chunk_size(int rank) const;

  /// Copies records [first, last) into `out` (size (last-first) *
  /// record_size), charging traffic to `caller_rank`.
  void get(std::size_t first, std::size_t last, int caller_rank,
           std::span<std::byte> out) const;
  std::vector<std::byte> get(std::size_t first, std::size_t last,
                             int caller_rank) const;

  /// Writes records [first, last) from `data`.
  void put(std::size_t first, std::size_t last, std::span<const std::byte> data,
           int caller_rank);

  TransferStats stats() const;
  void reset_stats();

  /// Per-rank accounting; fetched = traffic the rank initiated (gets and
  /// puts), served = traffic against chunks the rank owns.
  std::uint64_t bytes_fetched(int rank) const;
  std::uint64_t bytes_served(int rank) const;

 private:
  struct RankCounters {
    std::atomic<std::uint64_t> fetched_local{0};
    std::atomic<std::uint64_t> fetched_remote{0};
    std::atomic<std::uint64_t> served{0};
  };

  void check_range(std::size_t first, std::size_t last) const;
  void charge(int caller_rank, std::uint64_t local_bytes,
              std::uint64_t remote_bytes, int remote_chunks) const;
  template <typename Fn>
  void for_each_chunk(std::size_t first, std::size_t last, Fn&& fn) const;

  std::size_t length_;
  std::size_t record_size_;
  int nranks_;
  FabricModel fabric_;
  std::vector<std::vector<std::byte>> chunks_;
  mutable std::vector<RankCounters> counters_;
  mutable std::atomic<std::uint64_t> gets_{0};
  mutable std::atomic<std::uint64_t> puts_{0};
  mutable std::atomic<double> sim_time_s_{0.0};
};

using GlobalArrayHandle = std::shared_ptr<GlobalArray>;

GlobalArrayHandle create_global_array(std::size_t length,
                                      std::size_t record_size, int nranks,
                                      FabricModel fabric = {});

}  // namespace celeste
