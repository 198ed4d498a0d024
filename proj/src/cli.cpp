#include "celeste/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "celeste/config_io.hpp"
#include "celeste/fits_io.hpp"
#include "celeste/pipeline.hpp"
#include "celeste/priors_fit.hpp"
#include "celeste/validate.hpp"

namespace celeste {

namespace {

namespace fs = std::filesystem;

Prior demo_prior() {
  Prior p;
  p.p_star = 0.5;
  p.star.log_flux_mean = std::log(8000.0);
  p.star.log_flux_var = 0.8;
  p.star.color_mean = Eigen::Vector4d(0.6, 0.4, 0.2, 0.1);
  p.star.color_var = Eigen::Vector4d::Constant(0.09);
  p.galaxy.log_flux_mean = std::log(6000.0);
  p.galaxy.log_flux_var = 0.8;
  p.galaxy.color_mean = Eigen::Vector4d(0.8, 0.5, 0.3, 0.2);
  p.galaxy.color_var = Eigen::Vector4d::Constant(0.09);
  return p;
}

CatalogRow result_row(const SourceResult& r) {
  CatalogRow row;
  row.id = r.id;
  row.p_star = r.vp.p_star;
  const TypeParams& tp = r.vp.p_star > 0.5 ? r.vp.star : r.vp.galaxy;
  const double m = tp.log_flux_loc, v = tp.log_flux_var;
  row.ref_flux = std::exp(m + 0.5 * v);
  row.sd_ref_flux =
      std::sqrt(std::max(0.0, (std::exp(v) - 1.0))) * row.ref_flux;
  row.colors = tp.color_loc;
  row.sd_colors = tp.color_var.cwiseSqrt();
  row.position = r.vp.position;
  row.shape = r.vp.shape;
  return row;
}

std::string catalog_path(const std::string& arg, const std::string& name) {
  if (fs::is_directory(arg)) return (fs::path(arg) / name).string();
  return arg;
}

int worker_cap_from_env(int workers) {
  if (const char* env = std::getenv("CELESTE_MINI_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) return std::min(workers, cap);
  }
  return workers;
}

struct SynthOpts {
  int sources = 200;
  int images = 5;
  std::uint64_t seed = 1;
  std::string out;
  std::string config_file;
  int tile_size = 128;
  double cluster_weight = 0.0;
  int n_clusters = 0;
  double sky_background = 150.0;
};

int cmd_synth(const SynthOpts& opt) {
  SyntheticSkySpec spec;
  spec.prior = demo_prior();
  spec.seed = opt.seed;
  spec.source_count = opt.sources;
  spec.tile_width = spec.tile_height = opt.tile_size;
  spec.sky_background = opt.sky_background;
  spec.clustering.cluster_weight = opt.cluster_weight;
  spec.clustering.n_clusters = opt.n_clusters;

  // --images N: tiles hold five bands each; remainders get fewer bands
  const int tiles = std::max(1, (opt.images + kNumBands - 1) / kNumBands);
  spec.tiles_x = std::max(1, static_cast<int>(std::ceil(std::sqrt(tiles))));
  spec.tiles_y = (tiles + spec.tiles_x - 1) / spec.tiles_x;

  if (!opt.config_file.empty()) {
    const ConfigMap cfg = ConfigMap::load(opt.config_file);
    spec.sky_background = cfg.get_double("sky_background", spec.sky_background);
    spec.arcsec_per_pixel =
        cfg.get_double("arcsec_per_pixel", spec.arcsec_per_pixel);
    spec.tiles_x = static_cast<int>(cfg.get_int("tiles_x", spec.tiles_x));
    spec.tiles_y = static_cast<int>(cfg.get_int("tiles_y", spec.tiles_y));
    spec.tile_width = static_cast<int>(cfg.get_int("tile_width", spec.tile_width));
    spec.tile_height =
        static_cast<int>(cfg.get_int("tile_height", spec.tile_height));
    spec.clustering.cluster_weight =
        cfg.get_double("cluster_weight", spec.clustering.cluster_weight);
    spec.clustering.n_clusters = static_cast<int>(
        cfg.get_int("n_clusters", spec.clustering.n_clusters));
    spec.clustering.cluster_sigma_deg = cfg.get_double(
        "cluster_sigma_deg", spec.clustering.cluster_sigma_deg);
  }

  SyntheticSky sky = build_synthetic_sky(spec);
  fs::create_directories(opt.out);

  int ntiles_written = 0;
  for (std::size_t i = 0; i < sky.images.size(); ++i) {
    if (static_cast<int>(i) >= opt.images) break;  // honor the exact count
    const Image& img = sky.images[i];
    char name[64];
    std::snprintf(name, sizeof(name), "%04d-%d.fits",
                  static_cast<int>(img.meta.id) / kNumBands, img.meta.band);
    const auto bytes = write_image(img);
    write_file_atomic((fs::path(opt.out) / name).string(),
                      std::string(reinterpret_cast<const char*>(bytes.data()),
                                  bytes.size()));
    ++ntiles_written;
  }

  std::vector<CatalogRow> truth_rows;
  for (std::size_t i = 0; i < sky.truth.size(); ++i) {
    truth_rows.push_back(to_catalog_row(i, sky.truth[i]));
  }
  save_catalog_csv((fs::path(opt.out) / "truth.csv").string(), truth_rows);

  const auto init = perturb_catalog(sky.truth, PerturbConfig{}, opt.seed);
  std::vector<CatalogRow> init_rows;
  for (std::size_t i = 0; i < init.size(); ++i) {
    init_rows.push_back(to_catalog_row(i, init[i]));
  }
  save_catalog_csv((fs::path(opt.out) / "init.csv").string(), init_rows);

  ConfigMap sky_cfg;
  sky_cfg.set("region_lo_ra", sky.region.lo.x());
  sky_cfg.set("region_lo_dec", sky.region.lo.y());
  sky_cfg.set("region_hi_ra", sky.region.hi.x());
  sky_cfg.set("region_hi_dec", sky.region.hi.y());
  sky_cfg.set("seed", static_cast<std::int64_t>(opt.seed));
  sky_cfg.set("sources", static_cast<std::int64_t>(opt.sources));
  sky_cfg.save((fs::path(opt.out) / "sky.cfg").string());
  prior_to_config(spec.prior).save((fs::path(opt.out) / "prior.cfg").string());

  std::printf("synth: wrote %d images, %zu sources to %s\n", ntiles_written,
              sky.truth.size(), opt.out.c_str());
  return 0;
}

struct InferOpts {
  std::string in, out;
  int ranks = 1;
  int workers = 1;
  std::size_t cache = 8;
  std::string order = "spatial";
  std::string mode = "optimize";
  std::uint64_t seed = 1;
  double fabric_latency_us = 0.0;
  double fabric_bandwidth_gbps = 0.0;
};

int cmd_infer(const InferOpts& opt) {
  PipelineConfig cfg;
  cfg.image_dir = opt.in;
  cfg.init_catalog_csv = catalog_path(opt.in, "init.csv");
  cfg.nranks = opt.ranks;
  cfg.workers_per_rank = worker_cap_from_env(opt.workers);
  cfg.cache_capacity = opt.cache;
  cfg.seed = opt.seed;
  cfg.fabric.latency_s = opt.fabric_latency_us * 1e-6;
  cfg.fabric.bandwidth_bytes_per_s = opt.fabric_bandwidth_gbps * 1e9 / 8.0;

  const fs::path prior_file = fs::path(opt.in) / "prior.cfg";
  cfg.prior = fs::exists(prior_file)
                  ? prior_from_config(ConfigMap::load(prior_file.string()))
                  : demo_prior();
  const fs::path sky_file = fs::path(opt.in) / "sky.cfg";
  if (fs::exists(sky_file)) {
    const ConfigMap sky_cfg = ConfigMap::load(sky_file.string());
    cfg.region.lo = {sky_cfg.get_double("region_lo_ra", 0.0),
                     sky_cfg.get_double("region_lo_dec", 0.0)};
    cfg.region.hi = {sky_cfg.get_double("region_hi_ra", 0.0),
                     sky_cfg.get_double("region_hi_dec", 0.0)};
  }

  if (opt.order == "spatial") {
    cfg.order = OrderMode::kSpatial;
  } else if (opt.order == "random") {
    cfg.order = OrderMode::kRandom;
  } else if (opt.order == "none") {
    cfg.order = OrderMode::kNone;
  } else {
    std::cerr << "infer: unknown --order " << opt.order << "\n";
    return 2;
  }
  if (opt.mode == "optimize") {
    cfg.mode = TaskMode::kOptimize;
  } else if (opt.mode == "simulated-durations") {
    cfg.mode = TaskMode::kSimulatedDurations;
  } else {
    std::cerr << "infer: unknown --mode " << opt.mode << "\n";
    return 2;
  }

  const RunOutput result = run(cfg);

  fs::create_directories(opt.out);
  std::vector<CatalogRow> rows;
  for (const auto& r : result.results) rows.push_back(result_row(r));
  save_catalog_csv((fs::path(opt.out) / "pred.csv").string(), rows);
  write_file_atomic((fs::path(opt.out) / "metrics.csv").string(),
                    metrics_csv({{std::to_string(opt.ranks) + "x" +
                                      std::to_string(cfg.workers_per_rank),
                                  result.metrics}}));
  std::printf(
      "infer: %zu sources (%zu failed), %.2f sources/s, imbalance %.1f%%\n",
      result.metrics.optimized, result.metrics.failed,
      result.metrics.sources_per_second,
      100.0 * result.metrics.load_imbalance);
  return 0;
}

struct ScoreOpts {
  std::string pred, truth, out;
  double max_dist_px = 2.0;
};

int cmd_score(const ScoreOpts& opt) {
  const auto pred = load_catalog_csv(catalog_path(opt.pred, "pred.csv"));
  const auto truth = load_catalog_csv(catalog_path(opt.truth, "truth.csv"));
  ScoreConfig cfg;
  cfg.max_match_dist_px = opt.max_dist_px;
  const MatchPairing pairing = match_sources(pred, truth, cfg);
  const ScoreReport report = score(pred, truth, pairing, cfg);
  std::cout << score_report_table(report);
  if (!opt.out.empty()) {
    write_file_atomic(opt.out, score_report_csv(report));
  }
  return 0;
}

struct BenchOpts {
  std::string ranks = "1,2,4,8";
  int workers = 4;
  std::string mode = "simulated-durations";
  std::uint64_t seed = 7;
  int sources = 2000;
  int tiles = 8;
  std::string out = "bench.csv";
};

int cmd_bench(const BenchOpts& opt) {
  std::vector<int> rank_counts;
  std::stringstream ss(opt.ranks);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const int r = std::atoi(tok.c_str());
    if (r < 1) {
      std::cerr << "bench: bad rank count '" << tok << "'\n";
      return 2;
    }
    rank_counts.push_back(r);
  }
  if (rank_counts.empty()) {
    std::cerr << "bench: --ranks is empty\n";
    return 2;
  }

  SyntheticSkySpec spec;
  spec.prior = demo_prior();
  spec.seed = opt.seed;
  spec.source_count = opt.sources;
  spec.tiles_x = spec.tiles_y = opt.tiles;
  spec.bands = {kRefBand};
  spec.clustering = {0.7, 12, 0.004};
  SyntheticSky sky = build_synthetic_sky(spec);

  std::vector<CatalogEntry> entries;
  const auto init = perturb_catalog(sky.truth, PerturbConfig{}, opt.seed);
  for (std::size_t i = 0; i < init.size(); ++i) {
    entries.push_back({i, init[i], 0});
  }

  std::vector<std::pair<std::string, RunMetrics>> rows;
  for (int nranks : rank_counts) {
    PipelineConfig cfg;
    cfg.images = sky.images;
    cfg.init_entries = entries;
    cfg.region = sky.region;
    cfg.prior = spec.prior;
    cfg.nranks = nranks;
    cfg.workers_per_rank = worker_cap_from_env(opt.workers);
    cfg.seed = opt.seed;
    cfg.mode = opt.mode == "optimize" ? TaskMode::kOptimize
                                      : TaskMode::kSimulatedDurations;
    const RunOutput result = run(cfg);
    const std::string label =
        std::to_string(nranks) + "x" + std::to_string(cfg.workers_per_rank);
    rows.emplace_back(label, result.metrics);
    std::printf("bench %s: %.2f sources/s\n", label.c_str(),
                result.metrics.sources_per_second);
  }
  write_file_atomic(opt.out, metrics_csv(rows));
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("celeste-mini");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_command(static_cast<int>(argv.size()), argv.data());
}

int run_command(int argc, const char* const* argv) {
  CLI::App app{"variational Bayesian astronomical cataloger"};
  app.require_subcommand(1);

  SynthOpts synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic sky");
  s->add_option("--sources", synth.sources, "number of light sources");
  s->add_option("--images", synth.images, "number of image files");
  s->add_option("--seed", synth.seed, "random seed");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--config", synth.config_file, "key-value config file");
  s->add_option("--tile-size", synth.tile_size, "tile width/height, pixels");
  s->add_option("--cluster-weight", synth.cluster_weight,
                "fraction of sources drawn from clusters");
  s->add_option("--clusters", synth.n_clusters, "number of position clusters");
  s->add_option("--sky", synth.sky_background, "sky background counts/pixel");

  InferOpts infer;
  auto* i = app.add_subcommand("infer", "optimize a catalog from images");
  i->add_option("--in", infer.in, "input directory (FITS + init.csv)")
      ->required()
      ->check(CLI::ExistingDirectory);
  i->add_option("--out", infer.out, "output directory")->required();
  i->add_option("--ranks", infer.ranks, "simulated ranks");
  i->add_option("--workers", infer.workers, "worker threads per rank");
  i->add_option("--cache", infer.cache, "image cache capacity per rank");
  i->add_option("--order", infer.order, "task order: spatial|random|none");
  i->add_option("--mode", infer.mode, "optimize|simulated-durations");
  i->add_option("--seed", infer.seed, "random seed");
  i->add_option("--fabric-latency-us", infer.fabric_latency_us,
                "simulated fabric latency per remote op");
  i->add_option("--fabric-bandwidth-gbps", infer.fabric_bandwidth_gbps,
                "simulated fabric bandwidth (0 = uncosted)");

  ScoreOpts score_opts;
  auto* sc = app.add_subcommand("score", "score predictions against truth");
  sc->add_option("--pred", score_opts.pred, "prediction csv or directory")
      ->required();
  sc->add_option("--truth", score_opts.truth, "truth csv or directory")
      ->required();
  sc->add_option("--out", score_opts.out, "also write the report csv here");
  sc->add_option("--max-dist", score_opts.max_dist_px,
                 "match radius in pixels");

  BenchOpts bench;
  auto* b = app.add_subcommand("bench", "scaling sweep over rank counts");
  b->add_option("--ranks", bench.ranks, "comma-separated rank counts");
  b->add_option("--workers", bench.workers, "workers per rank");
  b->add_option("--mode", bench.mode, "optimize|simulated-durations");
  b->add_option("--seed", bench.seed, "random seed");
  b->add_option("--sources", bench.sources, "number of sources");
  b->add_option("--tiles", bench.tiles, "tile grid side length");
  b->add_option("--out", bench.out, "output csv path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (i->parsed()) return cmd_infer(infer);
    if (sc->parsed()) return cmd_score(score_opts);
    if (b->parsed()) return cmd_bench(bench);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace celeste
