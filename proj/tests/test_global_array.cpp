#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <thread>

#include "celeste/global_array.hpp"
#include "celeste/rng.hpp"

using namespace celeste;

namespace {

std::vector<std::byte> make_payload(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::byte> out(n);
  for (auto& b : out) b = std::byte(rng.next_u64() & 0xff);
  return out;
}

}  // namespace

TEST_CASE("block layout splits evenly and with balanced remainders") {
  GlobalArray even(100, 8, 4);
  for (int r = 0; r < 4; ++r) CHECK(even.chunk_size(r) == 25);

  GlobalArray uneven(10, 8, 4);
  CHECK(uneven.chunk_size(0) == 3);
  CHECK(uneven.chunk_size(1) == 3);
  CHECK(uneven.chunk_size(2) == 2);
  CHECK(uneven.chunk_size(3) == 2);

  const GlobalArray empty(0, 8, 1);
  CHECK(empty.length() == 0);
  CHECK(empty.chunk_size(0) == 0);

  CHECK_THROWS_AS(GlobalArray(10, 8, 0), std::domain_error);
}

TEST_CASE("locate: fixed examples") {
  GlobalArray ga(100, 8, 4);
  CHECK(ga.locate(55).rank == 2);
  CHECK(ga.locate(55).offset == 5);
  CHECK(ga.locate(0).rank == 0);
  CHECK(ga.locate(0).offset == 0);
  CHECK_THROWS_AS(ga.locate(100), std::out_of_range);
}

TEST_CASE("locate agrees with a cumulative-chunk-table oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t length = rng.uniform_below(2000);
    const int nranks = 1 + static_cast<int>(rng.uniform_below(17));
    GlobalArray ga(length, 4, nranks);

    // brute-force table of chunk starts
    std::vector<std::size_t> starts;
    std::size_t acc = 0;
    for (int r = 0; r < nranks; ++r) {
      starts.push_back(acc);
      acc += ga.chunk_size(r);
    }
    CHECK(acc == length);

    int prev_rank = 0;
    for (std::size_t i = 0; i < length; ++i) {
      const auto loc = ga.locate(i);
      int want_rank = nranks - 1;
      for (int r = 0; r < nranks; ++r) {
        if (i < starts[r] + ga.chunk_size(r) && i >= starts[r]) {
          want_rank = r;
          break;
        }
      }
      CHECK(loc.rank == want_rank);
      CHECK(loc.offset == i - starts[want_rank]);
      CHECK(loc.rank >= prev_rank);  // non-decreasing in the index
      prev_rank = loc.rank;
      CHECK(ga.chunk_begin(loc.rank) == starts[loc.rank]);
    }
  }
}

TEST_CASE("get of a local range leaves remote counters untouched") {
  GlobalArray ga(100, 8, 4);
  const auto payload = make_payload(25 * 8, 3);
  ga.put(25, 50, payload, 1);  // rank 1 owns [25, 50)
  ga.reset_stats();
  const auto back = ga.get(25, 50, 1);
  CHECK(std::memcmp(back.data(), payload.data(), payload.size()) == 0);
  const auto stats = ga.stats();
  CHECK(stats.bytes_fetched_remote == 0);
  CHECK(stats.bytes_fetched_local == 25 * 8);
  CHECK(stats.gets == 1);
}

TEST_CASE("put then get round trips bytes") {
  GlobalArray ga(64, 16, 3);
  const auto payload = make_payload(10 * 16, 9);
  ga.put(20, 30, payload, 0);
  CHECK(ga.get(20, 30, 2) == payload);
}

TEST_CASE("range spanning three remote chunks is costed per the model") {
  FabricModel fabric{2e-6, 1e9};
  GlobalArray ga(100, 8, 4, fabric);  // chunks of 25
  ga.reset_stats();
  // rank 3 reads [0, 75): chunks of ranks 0, 1, 2 are all remote
  const auto bytes = ga.get(0, 75, 3);
  CHECK(bytes.size() == 75 * 8);
  const auto stats = ga.stats();
  CHECK(stats.bytes_fetched_remote == 75 * 8);
  CHECK(stats.bytes_fetched_local == 0);
  // 3 latency charges plus bytes over bandwidth
  const double want = 3 * 2e-6 + 75 * 8 / 1e9;
  CHECK(stats.simulated_transfer_time_s == doctest::Approx(want));
}

TEST_CASE("uncosted fabric accumulates no simulated time") {
  GlobalArray ga(100, 8, 4);  // default fabric: free
  ga.get(0, 100, 3);
  CHECK(ga.stats().simulated_transfer_time_s == 0.0);
}

TEST_CASE("disjoint puts are both visible regardless of order") {
  GlobalArray ga(40, 4, 2);
  const auto a = make_payload(10 * 4, 1);
  const auto b = make_payload(10 * 4, 2);
  ga.put(0, 10, a, 0);
  ga.put(30, 40, b, 1);
  CHECK(ga.get(0, 10, 1) == a);
  CHECK(ga.get(30, 40, 0) == b);
}

TEST_CASE("random put/get pairs match a flat reference array") {
  const std::size_t length = 500;
  const std::size_t record = 12;
  GlobalArray ga(length, record, 7);
  std::vector<std::byte> reference(length * record, std::byte{0});
  Rng rng(31);
  for (int op = 0; op < 1000; ++op) {
    std::size_t i = rng.uniform_below(length);
    std::size_t j = i + rng.uniform_below(length - i + 1);
    const int rank = static_cast<int>(rng.uniform_below(7));
    if (rng.uniform() < 0.5) {
      const auto data = make_payload((j - i) * record, 1000 + op);
      ga.put(i, j, data, rank);
      std::memcpy(reference.data() + i * record, data.data(), data.size());
    } else {
      const auto got = ga.get(i, j, rank);
      CHECK(std::memcmp(got.data(), reference.data() + i * record,
                        got.size()) == 0);
    }
  }
}

TEST_CASE("errors: bad ranges and size mismatches") {
  GlobalArray ga(10, 4, 2);
  std::vector<std::byte> buf(4);
  CHECK_THROWS_AS(ga.get(5, 11, 0), std::out_of_range);
  CHECK_THROWS_AS(ga.get(7, 5, 0), std::out_of_range);
  CHECK_THROWS_AS(ga.put(0, 2, buf, 0), std::invalid_argument);
  CHECK_THROWS_AS(ga.get(0, 1, 5, buf), std::out_of_range);
}

TEST_CASE("stats conservation: fetched bytes equal served bytes") {
  GlobalArray ga(200, 8, 5);
  Rng rng(17);
  for (int op = 0; op < 300; ++op) {
    std::size_t i = rng.uniform_below(200);
    std::size_t j = i + rng.uniform_below(200 - i + 1);
    const int rank = static_cast<int>(rng.uniform_below(5));
    if (rng.uniform() < 0.5) {
      ga.put(i, j, make_payload((j - i) * 8, op), rank);
    } else {
      ga.get(i, j, rank);
    }
  }
  std::uint64_t fetched = 0, served = 0;
  for (int r = 0; r < 5; ++r) {
    fetched += ga.bytes_fetched(r);
    served += ga.bytes_served(r);
  }
  CHECK(fetched == served);
  const auto stats = ga.stats();
  CHECK(stats.bytes_fetched_local + stats.bytes_fetched_remote == fetched);
}

TEST_CASE("concurrent disjoint put/get does not tear") {
  GlobalArray ga(64, 64, 4);
  std::vector<std::thread> threads;
  std::atomic<bool> failed{false};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      // each thread owns records [16t, 16t+16)
      const std::size_t base = 16 * t;
      for (int round = 0; round < 200; ++round) {
        const auto data = make_payload(16 * 64, t * 1000 + round);
        ga.put(base, base + 16, data, t);
        const auto back = ga.get(base, base + 16, (t + 1) % 4);
        if (back != data) failed = true;
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK_FALSE(failed.load());
}
