#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsmr/data.hpp"
#include "dsmr/loss.hpp"
#include "dsmr/model.hpp"
#include "dsmr/norm_stats.hpp"
#include "dsmr/raster.hpp"

namespace dsmr {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// First and second moments per parameter element, plus the step counter.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  long t = 0;
};

/// One Adam step with bias correction over a list of parameters and their
/// gradients. The state is sized on first use; afterwards its shapes must match.
template <typename T>
void step_adam(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               AdamState& state, const AdamConfig& config);

/// Convenience overload: updates every trainable parameter of the model from
/// its gradient buffer.
template <typename T>
void step_adam(Model<T>& model, AdamState& state, const AdamConfig& config);

// ---------------------------------------------------------------------------
// Metrics

struct PatchMetrics {
  std::size_t index;
  std::size_t pixels;
  double acc;
  double mae;
};

struct MetricsReport {
  double acc_at_0_5 = 0.0;  ///< fraction of pixels with |error| < 0.5 m
  double mae = 0.0;         ///< metres
  double medae = 0.0;       ///< metres
  std::size_t pixels = 0;
  std::vector<PatchMetrics> per_patch;
};

inline constexpr double kAccuracyThreshold = 0.5;

/// Fraction of errors strictly below tau.
double accuracy_at(std::span<const double> abs_errors, double tau);
double median(std::vector<double> values);
/// Aggregate metrics of a list of absolute errors (per_patch left empty).
MetricsReport metrics_from_errors(std::span<const double> abs_errors);

struct EvalReport {
  MetricsReport model;
  MetricsReport baseline;  ///< input vs ground truth
  double val_loss_img = 0.0;  ///< mean L_img over patches, normalized units
};

/// Runs the model over every patch and compares against the ground truth in
/// metres, over pixels whose ground truth was valid. Throws DataError on an
/// empty set. Results do not depend on batch_size or patch order.
EvalReport evaluate(const Model<float>& model, const PatchSet& set, const NormStats& stats,
                    std::size_t batch_size = 8);

void write_metrics(const EvalReport& report, const std::filesystem::path& path);
std::string metrics_summary(const EvalReport& report);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t steps = 1000;
  std::string optimizer = "adam";
  AdamConfig adam;
  std::uint64_t seed = 0;
  LossWeights loss;
  std::size_t val_every = 100;         ///< 0 validates only after the last step
  std::size_t checkpoint_every = 0;    ///< 0 writes only the best checkpoint
  std::size_t log_every = 0;           ///< progress lines on stderr; 0 = silent
  bool deterministic = true;

  void validate() const;
};

struct HistoryRow {
  std::size_t step;
  double total, img, weights, activity, feat;
  std::optional<double> val_img, val_mae, val_acc;
};

struct TrainResult {
  Model<float> best;       ///< lowest validation L_img (or the final model without validation)
  Model<float> last;
  std::size_t best_step = 0;
  double best_val_img = 0.0;
  std::vector<HistoryRow> history;
};

/// Adam on minibatches of the training set. The batch order is a seeded
/// shuffle per epoch. Validation runs every val_every steps and after the last
/// one; the model with the lowest mean validation L_img is kept. When out_dir
/// is set, best.ckpt, history.tsv and (at the checkpoint cadence)
/// step_<n>.ckpt are written there. Throws NumericError naming the term and
/// step when a loss term is not finite.
TrainResult train(const Model<float>& init, const PatchSet& train_set, const PatchSet* val_set,
                  const NormStats& stats, const TrainConfig& config,
                  const FeatureExtractor<float>* extractor = nullptr,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

void write_history(std::span<const HistoryRow> history, const std::filesystem::path& path);

/// Stacks the given patches into [count, 1, P, P] (input, target) tensors.
std::pair<Tensor<float>, Tensor<float>> make_batch(const PatchSet& set,
                                                   std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Tiled inference

struct TileLayout {
  std::size_t tile_rows, tile_cols;      ///< tile extents (padded when the raster is smaller)
  std::vector<std::size_t> row_starts;   ///< top edges
  std::vector<std::size_t> col_starts;   ///< left edges
};

/// Tile origins covering a width x height raster with the given overlap; the
/// last tile on each axis is shifted back to end at the border.
TileLayout tile_layout(std::size_t width, std::size_t height, std::size_t tile,
                       std::size_t overlap, std::size_t multiple);

/// Hole-fills the raster, runs the model tile by tile (each tile centred on its
/// own mean), and blends the residuals of overlapping tiles with linear
/// feathering weights. The output has the input's dimensions and no nodata.
/// Tiles run on up to `threads` threads; the result does not depend on it.
Raster infer_tiled(const Model<float>& model, const Raster& raster, const NormStats& stats,
                   std::size_t tile = 512, std::size_t overlap = 64, std::size_t threads = 1,
                   const FillOptions& fill = {});

/// Largest height step between neighbouring pixels that straddle an internal
/// tile edge.
double seam_max_step(const Raster& raster, const TileLayout& layout);

}  // namespace dsmr
