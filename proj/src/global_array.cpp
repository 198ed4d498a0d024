#include "celeste/global_array.hpp"

#include <cstring>
#include <stdexcept>

namespace celeste {

GlobalArray::GlobalArray(std::size_t length, std::size_t record_size,
                         int nranks, FabricModel fabric)
    : length_(length),
      record_size_(record_size),
      nranks_(nranks),
      fabric_(fabric),
      counters_(static_cast<std::size_t>(std::max(nranks, 1))) {
  if (nranks < 1) throw std::domain_error("GlobalArray: nranks must be >= 1");
  if (record_size < 1) {
    throw std::domain_error("GlobalArray: record_size must be >= 1");
  }
  chunks_.resize(nranks);
  for (int r = 0; r < nranks; ++r) {
    chunks_[r].resize(chunk_size(r) * record_size_);
  }
}

std::size_t GlobalArray::chunk_size(int rank) const {
  const std::size_t q = length_ / nranks_;
  const std::size_t rem = length_ % nranks_;
  return q + (static_cast<std::size_t>(rank) < rem ? 1 : 0);
}

std::size_t GlobalArray::chunk_begin(int rank) const {
  const std::size_t q = length_ / nranks_;
  const std::size_t rem = length_ % nranks_;
  const std::size_t r = static_cast<std::size_t>(rank);
  return r < rem ? r * (q + 1) : rem * (q + 1) + (r - rem) * q;
}

GlobalArray::Location GlobalArray::locate(std::size_t index) const {
  if (index >= length_) {
    throw std::out_of_range("GlobalArray::locate: index out of range");
  }
  const std::size_t q = length_ / nranks_;
  const std::size_t rem = length_ % nranks_;
  if (index < rem * (q + 1)) {
    return {static_cast<int>(index / (q + 1)), index % (q + 1)};
  }
  const std::size_t j = index - rem * (q + 1);
  return {static_cast<int>(rem + j / q), j % q};
}

void GlobalArray::check_range(std::size_t first, std::size_t last) const {
  if (first > last || last > length_) {
    throw std::out_of_range("GlobalArray: bad record range");
  }
}

void GlobalArray::charge(int caller_rank, std::uint64_t local_bytes,
                         std::uint64_t remote_bytes, int remote_chunks) const {
  auto& c = counters_[caller_rank];
  c.fetched_local.fetch_add(local_bytes, std::memory_order_relaxed);
  c.fetched_remote.fetch_add(remote_bytes, std::memory_order_relaxed);
  double t = fabric_.latency_s * remote_chunks;
  if (fabric_.bandwidth_bytes_per_s > 0.0) {
    t += static_cast<double>(remote_bytes) / fabric_.bandwidth_bytes_per_s;
  }
  if (t > 0.0) sim_time_s_.fetch_add(t, std::memory_order_relaxed);
}

template <typename Fn>
void GlobalArray::for_each_chunk(std::size_t first, std::size_t last,
                                 Fn&& fn) const {
  // visit (rank, chunk-local byte offset, byte count) pieces in order
  std::size_t index = first;
  while (index < last) {
    const Location loc = locate(index);
    const std::size_t in_chunk = chunk_size(loc.rank) - loc.offset;
    const std::size_t take = std::min(last - index, in_chunk);
    fn(loc.rank, loc.offset * record_size_, take * record_size_);
    index += take;
  }
}

void GlobalArray::get(std::size_t first, std::size_t last, int caller_rank,
                      std::span<std::byte> out) const {
  check_range(first, last);
  if (caller_rank < 0 || caller_rank >= nranks_) {
    throw std::out_of_range("GlobalArray::get: bad caller rank");
  }
  if (out.size() != (last - first) * record_size_) {
    throw std::invalid_argument("GlobalArray::get: output size mismatch");
  }
  std::uint64_t local = 0, remote = 0;
  int remote_chunks = 0;
  std::size_t written = 0;
  for_each_chunk(first, last, [&](int rank, std::size_t off, std::size_t n) {
    std::memcpy(out.data() + written, chunks_[rank].data() + off, n);
    written += n;
    counters_[rank].served.fetch_add(n, std::memory_order_relaxed);
    if (rank == caller_rank) {
      local += n;
    } else {
      remote += n;
      ++remote_chunks;
    }
  });
  charge(caller_rank, local, remote, remote_chunks);
  gets_.fetch_add(1, std::memory_order_relaxed);
}

std::vector<std::byte> GlobalArray::get(std::size_t first, std::size_t last,
                                        int caller_rank) const {
  check_range(first, last);
  std::vector<std::byte> out((last - first) * record_size_);
  get(first, last, caller_rank, out);
  return out;
}

void GlobalArray::put(std::size_t first, std::size_t last,
                      std::span<const std::byte> data, int caller_rank) {
  check_range(first, last);
  if (caller_rank < 0 || caller_rank >= nranks_) {
    throw std::out_of_range("GlobalArray::put: bad caller rank");
  }
  if (data.size() != (last - first) * record_size_) {
    throw std::invalid_argument("GlobalArray::put: record count mismatch");
  }
  std::uint64_t local = 0, remote = 0;
  int remote_chunks = 0;
  std::size_t consumed = 0;
  for_each_chunk(first, last, [&](int rank, std::size_t off, std::size_t n) {
    std::memcpy(chunks_[rank].data() + off, data.data() + consumed, n);
    consumed += n;
    counters_[rank].served.fetch_add(n, std::memory_order_relaxed);
    if (rank == caller_rank) {
      local += n;
    } else {
      remote += n;
      ++remote_chunks;
    }
  });
  charge(caller_rank, local, remote, remote_chunks);
  puts_.fetch_add(1, std::memory_order_relaxed);
}

TransferStats GlobalArray::stats() const {
  TransferStats s;
  s.gets = gets_.load(std::memory_order_relaxed);
  s.puts = puts_.load(std::memory_order_relaxed);
  for (const auto& c : counters_) {
    s.bytes_fetched_local += c.fetched_local.load(std::memory_order_relaxed);
    s.bytes_fetched_remote += c.fetched_remote.load(std::memory_order_relaxed);
  }
  s.simulated_transfer_time_s = sim_time_s_.load(std::memory_order_relaxed);
  return s;
}

void GlobalArray::reset_stats() {
  gets_.store(0);
  puts_.store(0);
  sim_time_s_.store(0.0);
  for (auto& c : counters_) {
    c.fetched_local.store(0);
    c.fetched_remote.store(0);
    c.served.store(0);
  }
}

std::uint64_t GlobalArray::bytes_fetched(int rank) const {
  const auto& c = counters_.at(rank);
  return c.fetched_local.load(std::memory_order_relaxed) +
         c.fetched_remote.load(std::memory_order_relaxed);
}

std::uint64_t GlobalArray::bytes_served(int rank) const {
  return counters_.at(rank).served.load(std::memory_order_relaxed);
}

GlobalArrayHandle create_global_array(std::size_t length,
                                      std::size_t record_size, int nranks,
                                      FabricModel fabric) {
  return std::make_shared<GlobalArray>(length, record_size, nranks, fabric);
}

}  // namespace celeste
