#pragma once

#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "celeste/elbo.hpp"
#include "celeste/global_array.hpp"
#include "celeste/scheduler.hpp"
#include "celeste/sky_model.hpp"
#include "celeste/trust_region.hpp"

namespace celeste {

// ---------------------------------------------------------------------------
// synthetic skies

/// A tiled synthetic survey: tiles_x * tiles_y fields, one image per field
/// per band, all sharing a plate scale and PSF.
struct SyntheticSkySpec {
  Eigen::Vector2d origin = Eigen::Vector2d(15.0, 1.0);  // region corner, deg
  int tiles_x = 1;
  int tiles_y = 1;
  std::vector<int> bands = {0, 1, 2, 3, 4};
  int tile_width = 128;
  int tile_height = 128;
  double arcsec_per_pixel = 0.396;
  double sky_background = 150.0;
  PsfModel psf = default_psf();
  int source_count = 0;
  ClusterConfig clustering;
  Prior prior;
  std::uint64_t seed = 1;
};

RegionRect synthetic_region(const SyntheticSkySpec& spec);

struct SyntheticSky {
  std::vector<Image> images;
  std::vector<SourceParams> truth;
  RegionRect region;
};

SyntheticSky build_synthetic_sky(const SyntheticSkySpec& spec);

/// Degrades a truth catalog into survey-style initial estimates: jittered
/// positions, noisy fluxes and colors, occasional type flips, default
/// shapes.
struct PerturbConfig {
  double position_jitter_arcsec = 0.4;
  double log_flux_sd = 0.2;
  double color_sd = 0.2;
  double type_flip_prob = 0.1;
};
std::vector<SourceParams> perturb_catalog(
    const std::vector<SourceParams>& truth, const PerturbConfig& pc,
    std::uint64_t seed);

// ---------------------------------------------------------------------------
// catalog entries and record codecs

struct CatalogEntry {
  std::uint64_t id = 0;
  SourceParams params;  // initial estimate
  std::uint64_t sort_key = 0;
};

constexpr std::size_t kEntryRecordSize = 112;

std::vector<std::byte> encode_entry_record(const CatalogEntry& e);
CatalogEntry decode_entry_record(std::span<const std::byte> bytes);

std::size_t image_record_size(const Image& img);
void encode_image_record(const Image& img, std::span<std::byte> out);
Image decode_image_record(std::span<const std::byte> bytes);

// ---------------------------------------------------------------------------
// spatial ordering and neighbor lookup

/// Interleaves 16-bit coordinates, x in the even (least significant) bits.
std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y);

/// Morton code of a position quantized to a 2^16 grid over `region`.
std::uint64_t spatial_sort_key(const Eigen::Vector2d& pos,
                               const RegionRect& region);

/// Permutation ordering entries by Morton code over the region (stable for
/// ties).
std::vector<std::size_t> spatial_order(std::span<const CatalogEntry> entries,
                                       const RegionRect& region);

/// Uniform-grid point index over entry positions for radius queries.
class NeighborIndex {
 public:
  NeighborIndex(std::span<const CatalogEntry> entries, double radius_arcsec);

  /// Indices of entries within the radius of entry `i`, excluding `i`,
  /// ascending.
  std::vector<std::size_t> neighbors_of(std::size_t i) const;
  std::vector<std::size_t> query(const Eigen::Vector2d& pos,
                                 std::optional<std::size_t> exclude) const;
  double radius_arcsec() const { return radius_arcsec_; }

 private:
  std::int64_t cell_of(double x, double y) const;
  std::vector<Eigen::Vector2d> positions_;
  double radius_deg_;
  double radius_arcsec_;
  double cell_deg_;
  Eigen::Vector2d origin_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> grid_;
};

// ---------------------------------------------------------------------------
// cache

/// Mutex-guarded LRU cache shared by the workers of one rank.
template <typename K, typename V>
class LruCache {
 public:
  explicit LruCache(std::size_t capacity) : capacity_(capacity) {}

  V get_or_load(const K& key, const std::function<V()>& loader,
                bool* hit = nullptr) {
    std::scoped_lock lock(mu_);
    auto it = map_.find(key);
    if (it != map_.end()) {
      order_.splice(order_.begin(), order_, it->second);
      if (hit) *hit = true;
      return it->second->second;
    }
    if (hit) *hit = false;
    V value = loader();
    order_.emplace_front(key, value);
    map_[key] = order_.begin();
    if (map_.size() > capacity_) {
      map_.erase(order_.back().first);
      order_.pop_back();
    }
    return value;
  }

  std::size_t size() const {
    std::scoped_lock lock(mu_);
    return map_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::list<std::pair<K, V>> order_;
  std::unordered_map<K, typename std::list<std::pair<K, V>>::iterator> map_;
};

// ---------------------------------------------------------------------------
// pipeline

enum class OrderMode { kSpatial, kRandom, kNone };
enum class TaskMode { kOptimize, kSimulatedDurations };

struct PipelineConfig {
  // image source: a directory of FITS files or in-memory images
  std::string image_dir;
  std::vector<Image> images;

  // initial catalog: CSV path or in-memory entries
  std::string init_catalog_csv;
  std::vector<CatalogEntry> init_entries;

  RegionRect region;  // survey region; derived from images when empty

  int nranks = 1;
  int workers_per_rank = 1;
  SchedConfig sched;
  FabricModel fabric;
  std::size_t cache_capacity = 8;
  double neighbor_radius_arcsec = 0.0;  // 0: derived from patch extents
  TrConfig optimizer;
  PatchPolicy patch;
  Prior prior;

  OrderMode order = OrderMode::kSpatial;
  TaskMode mode = TaskMode::kOptimize;
  double sim_duration_median_ms = 2.0;
  double sim_duration_sigma = 1.0;
  std::uint64_t seed = 1;
};

struct RunMetrics {
  double wall_s = 0.0;
  double image_load_s = 0.0;
  double ga_fetch_s = 0.0;         // worker time fetching + decoding records
  double sched_overhead_s = 0.0;   // worker time inside next_batch
  double optimize_s = 0.0;         // context build + optimization
  double imbalance_s = 0.0;        // max - mean worker busy
  double load_imbalance = 0.0;     // (max - mean) / mean worker busy
  double sources_per_second = 0.0;
  std::size_t optimized = 0;
  std::size_t failed = 0;
  std::vector<double> per_rank_busy_s;
  std::vector<double> per_worker_busy_s;
  TransferStats image_transfer;
  TransferStats catalog_transfer;
  Scheduler::Stats sched_stats;
};

struct SourceResult {
  std::uint64_t id = 0;
  VariationalParams vp;
  TrStatus status = TrStatus::kEvalFailure;
  int iterations = 0;
  double value = 0.0;
  double grad_norm = 0.0;
  bool failed = true;
};

struct RunOutput {
  std::vector<SourceResult> results;  // sorted by id
  RunMetrics metrics;
};

RunOutput run(const PipelineConfig& cfg);

/// Metrics CSV row per labeled run: scale, image_load_s, ga_fetch_s,
/// sched_overhead_s, imbalance_s, optimize_s, sources_per_second.
std::string metrics_csv(
    const std::vector<std::pair<std::string, RunMetrics>>& rows);

}  // namespace celeste
