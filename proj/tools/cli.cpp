#include "dsmr/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dsmr/checkpoint.hpp"
#include "dsmr/config.hpp"
#include "dsmr/data.hpp"
#include "dsmr/engine.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/gradcheck.hpp"
#include "dsmr/loss.hpp"
#include "dsmr/model.hpp"
#include "dsmr/raster.hpp"
#include "dsmr/synth.hpp"

namespace fs = std::filesystem;

namespace dsmr {
namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "master seed; every random stream derives from it");
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
}

RunConfig resolve(const Common& c, std::ostream& err, bool log = true) {
  RunConfig cfg;
  if (!c.config.empty()) cfg.apply_file(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  cfg.resolve_seeds();
  cfg.validate();
  if (log) err << "# resolved config\n" << cfg.to_text();
  return cfg;
}

fs::path manifest_path(const fs::path& in) {
  return fs::is_directory(in) ? in / "manifest.tsv" : in;
}

std::optional<FeatureExtractor<float>> make_extractor(const RunConfig& cfg) {
  if (!(cfg.train.loss.feat > 0)) return std::nullopt;
  if (!cfg.extractor_path.empty()) return load_extractor(cfg.extractor_path);
  return random_extractor(cfg.extractor.seed, cfg.extractor);
}

const PatchSet& pick(const Dataset& ds, PatchRole role) {
  switch (role) {
    case PatchRole::kTrain: return ds.train;
    case PatchRole::kVal: return ds.val;
    case PatchRole::kTest: return ds.test;
  }
  return ds.test;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Refine digital surface models with a residual encoder-decoder", "dsmr"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common common;
  int status = kExitOk;

  // synth
  std::size_t count = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate (clean, degraded) synthetic raster pairs");
  add_common(synth, common);
  synth->add_option("--count", count, "number of pairs")->required();
  synth->add_option("--out", synth_out, "output directory")->required();

  // prepare
  std::string prep_in, prep_out;
  auto* prepare = app.add_subcommand("prepare", "split, hole-fill, sample, augment and normalize");
  add_common(prepare, common);
  prepare->add_option("--in", prep_in, "manifest.tsv or the directory holding it")->required();
  prepare->add_option("--out", prep_out, "dataset file to write")->required();

  // init
  std::string init_out, init_data;
  bool init_identity = false;
  double init_std = 0.0;
  auto* init = app.add_subcommand("init", "write a freshly initialized checkpoint");
  add_common(init, common);
  init->add_option("--out", init_out, "checkpoint path")->required();
  init->add_flag("--identity", init_identity, "zero the output layer so the model is the identity");
  init->add_option("--data", init_data, "dataset whose normalization stats to embed")
      ->check(CLI::ExistingFile);
  init->add_option("--std", init_std, "normalization std to embed (when --data is not given)");

  // train
  std::string train_data, train_out;
  auto* trn = app.add_subcommand("train", "train on a prepared dataset");
  add_common(trn, common);
  trn->add_option("--data", train_data, "dataset file")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", train_out, "output directory")->required();

  // eval
  std::string eval_ckpt, eval_data, eval_out, eval_role = "test";
  auto* evl = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  add_common(evl, common);
  evl->add_option("--ckpt", eval_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--data", eval_data, "dataset file")->required()->check(CLI::ExistingFile);
  evl->add_option("--role", eval_role, "split to score")
      ->check(CLI::IsMember({"train", "val", "test"}));
  evl->add_option("--out", eval_out, "machine-readable metrics file");

  // infer
  std::string inf_ckpt, inf_in, inf_out;
  std::optional<std::size_t> inf_tile, inf_overlap;
  auto* inf = app.add_subcommand("infer", "refine a raster of any size by tiled inference");
  add_common(inf, common);
  inf->add_option("--ckpt", inf_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--in", inf_in, "input raster")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", inf_out, "output raster (.asc for ASCII grid)")->required();
  inf->add_option("--tile", inf_tile, "tile size in pixels");
  inf->add_option("--overlap", inf_overlap, "tile overlap in pixels");

  // gradcheck
  std::uint64_t gc_seed = 0;
  bool gc_corrupt = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gc->add_option("--seed", gc_seed, "seed of the random test instances");
  gc->add_flag("--corrupt-conv", gc_corrupt,
               "check a conv2d with a deliberately wrong backward (must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*synth) {
      const auto cfg = resolve(common, err);
      const auto t0 = std::chrono::steady_clock::now();
      const auto samples = write_synth_set(synth_out, cfg.scene, count, cfg.seed, cfg.threads);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "wrote " << samples.size() << " pairs to " << synth_out << " in " << secs << " s\n";
    } else if (*prepare) {
      const auto cfg = resolve(common, err);
      const auto samples = read_manifest(manifest_path(prep_in));
      std::vector<RasterPair> pairs;
      for (const auto& s : samples)
        pairs.push_back(make_pair(read_raster(s.degraded), read_raster(s.clean), cfg.prepare.fill));
      const auto ds = prepare_dataset(pairs, cfg.prepare);
      write_dataset(ds, prep_out);
      out << "train " << ds.train.patches.size() << " val " << ds.val.patches.size() << " test "
          << ds.test.patches.size() << " patches of " << cfg.prepare.patch_size
          << " px, global_std " << ds.stats.global_std << "\n";
    } else if (*init) {
      const auto cfg = resolve(common, err);
      auto model = Model<float>::build(cfg.model);
      if (init_identity) model.zero_head();
      std::optional<NormStats> stats;
      if (!init_data.empty())
        stats = read_dataset(init_data).stats;
      else if (init_std > 0)
        stats = NormStats{init_std};
      save_model(model, init_out, stats);
      out << "wrote " << init_out << " (" << param_count(cfg.model) << " parameters)\n";
    } else if (*trn) {
      const auto cfg = resolve(common, err);
      const auto ds = read_dataset(train_data);
      const auto ext = make_extractor(cfg);
      fs::create_directories(train_out);
      {
        std::ofstream f(fs::path(train_out) / "config.txt");
        f << cfg.to_text();
      }
      const auto model = Model<float>::build(cfg.model);
      const auto res = train(model, ds.train, &ds.val, ds.stats, cfg.train, ext ? &*ext : nullptr,
                             fs::path(train_out));
      out << "best step " << res.best_step << " val L_img " << res.best_val_img << "; wrote "
          << (fs::path(train_out) / "best.ckpt").string() << "\n";
    } else if (*evl) {
      resolve(common, err, false);
      const auto ck = load_model(eval_ckpt);
      const auto ds = read_dataset(eval_data);
      const auto report = evaluate(ck.model, pick(ds, parse_role(eval_role)), ds.stats);
      out << metrics_summary(report);
      if (!eval_out.empty()) write_metrics(report, eval_out);
    } else if (*inf) {
      const auto cfg = resolve(common, err);
      const auto ck = load_model(inf_ckpt);
      if (!ck.stats) throw DataError("checkpoint '" + inf_ckpt + "' carries no normalization stats");
      const std::size_t tile = inf_tile.value_or(cfg.tile), overlap = inf_overlap.value_or(cfg.overlap);
      const auto raster = read_raster(inf_in);
      const auto refined =
          infer_tiled(ck.model, raster, *ck.stats, tile, overlap, cfg.threads, cfg.prepare.fill);
      write_raster(refined, inf_out, format_for_path(inf_out));
      const auto layout = tile_layout(raster.width, raster.height, tile, overlap,
                                      ck.model.config().size_multiple());
      out << "wrote " << inf_out << " (" << refined.width << "x" << refined.height << ", "
          << layout.row_starts.size() * layout.col_starts.size() << " tiles, seam max step "
          << seam_max_step(refined, layout) << " m)\n";
    } else if (*gc) {
      GradcheckOptions opt;
      opt.seed = gc_seed;
      opt.corrupt_conv = gc_corrupt;
      bool ok = true;
      char line[160];
      for (const auto& r : run_gradcheck(opt)) {
        std::snprintf(line, sizeof line, "%-18s max_rel_err %.3e  checked %5zu  skipped %4zu  %s\n",
                      r.op.c_str(), r.max_rel_error, r.checked, r.skipped,
                      r.passed ? "ok" : "FAIL");
        out << line;
        ok = ok && r.passed;
      }
      out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << opt.tolerance
          << ")\n";
      status = ok ? kExitOk : kExitGradcheck;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DimensionError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return status;
}

}  // namespace dsmr
