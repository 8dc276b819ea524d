#include "dsmr/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "dsmr/checkpoint.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/format.hpp"
#include "dsmr/random.hpp"

namespace dsmr {

// ---------------------------------------------------------------------------
// Optimizer

void AdamConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
}

template <typename T>
void step_adam(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               AdamState& state, const AdamConfig& config) {
  if (params.size() != grads.size())
    throw ContractError("step_adam: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  if (state.m.empty() && state.t == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("step_adam: optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].size() != params[i].size() || state.m[i].size() != params[i].size() ||
        state.v[i].size() != params[i].size())
      throw ContractError("step_adam: size mismatch in parameter " + std::to_string(i));

  ++state.t;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, double(state.t));
  const double c2 = 1.0 - std::pow(b2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double delta = config.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config.eps);
      if (delta != 0.0) p[j] = static_cast<T>(double(p[j]) - delta);
    }
  }
}

template <typename T>
void step_adam(Model<T>& model, AdamState& state, const AdamConfig& config) {
  std::vector<std::span<T>> params;
  std::vector<std::span<const T>> grads;
  for (auto& p : model.parameters()) {
    if (!p.tensor.requires_grad()) continue;
    grads.push_back(p.tensor.grad());
    params.push_back(p.tensor.data());
  }
  step_adam<T>(params, grads, state, config);
}

template void step_adam<float>(std::span<const std::span<float>>,
                               std::span<const std::span<const float>>, AdamState&,
                               const AdamConfig&);
template void step_adam<double>(std::span<const std::span<double>>,
                                std::span<const std::span<const double>>, AdamState&,
                                const AdamConfig&);
template void step_adam<float>(Model<float>&, AdamState&, const AdamConfig&);
template void step_adam<double>(Model<double>&, AdamState&, const AdamConfig&);

// ---------------------------------------------------------------------------
// Metrics

double accuracy_at(std::span<const double> abs_errors, double tau) {
  if (abs_errors.empty()) throw DataError("no pixels to score");
  std::size_t hits = 0;
  for (double e : abs_errors) hits += e < tau;
  return double(hits) / double(abs_errors.size());
}

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of an empty list");
  const std::size_t n = values.size(), mid = n / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double hi = values[mid];
  if (n % 2) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lo + hi);
}

MetricsReport metrics_from_errors(std::span<const double> abs_errors) {
  if (abs_errors.empty()) throw DataError("no pixels to score");
  // Summing in sorted order makes the mean independent of pixel order.
  std::vector<double> sorted(abs_errors.begin(), abs_errors.end());
  std::sort(sorted.begin(), sorted.end());
  MetricsReport r;
  r.pixels = sorted.size();
  r.acc_at_0_5 = accuracy_at(sorted, kAccuracyThreshold);
  r.mae = std::accumulate(sorted.begin(), sorted.end(), 0.0) / double(sorted.size());
  const std::size_t n = sorted.size();
  r.medae = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return r;
}

std::pair<Tensor<float>, Tensor<float>> make_batch(const PatchSet& set,
                                                   std::span<const std::size_t> indices) {
  const std::size_t p = set.patch_size, px = p * p;
  Tensor<float> x(Shape{indices.size(), 1, p, p});
  Tensor<float> y(Shape{indices.size(), 1, p, p});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& patch = set.patches.at(indices[b]);
    if (patch.input.size() != px || patch.target.size() != px)
      throw DimensionError("patch " + std::to_string(indices[b]) + " does not match patch size " +
                           std::to_string(p));
    std::copy(patch.input.begin(), patch.input.end(), x.ptr() + b * px);
    std::copy(patch.target.begin(), patch.target.end(), y.ptr() + b * px);
  }
  return {x, y};
}

EvalReport evaluate(const Model<float>& model, const PatchSet& set, const NormStats& stats,
                    std::size_t batch_size) {
  if (set.patches.empty()) throw DataError("evaluation set is empty");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  const double scale = set.normalized ? stats.global_std : 1.0;
  const std::size_t px = set.patch_size * set.patch_size;

  std::vector<double> err_model, err_base;
  EvalReport report;
  std::vector<double> loss_per_patch(set.patches.size());
  for (std::size_t first = 0; first < set.patches.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, set.patches.size() - first);
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    auto [x, y] = make_batch(set, idx);
    auto g = Graph<float>::inference();
    const auto out = model.forward_residual(g, x);
    for (std::size_t b = 0; b < count; ++b) {
      const auto& patch = set.patches[first + b];
      const float* pred = out.refined.ptr() + b * px;
      double l1 = 0.0, sum = 0.0;
      std::size_t hits = 0, n = 0;
      for (std::size_t i = 0; i < px; ++i) {
        const double t = patch.target[i];
        l1 += std::abs(double(pred[i]) - t);
        if (!patch.target_valid.empty() && !patch.target_valid[i]) continue;
        const double em = std::abs(double(pred[i]) - t) * scale;
        const double eb = std::abs(double(patch.input[i]) - t) * scale;
        err_model.push_back(em);
        err_base.push_back(eb);
        sum += em;
        hits += em < kAccuracyThreshold;
        ++n;
      }
      loss_per_patch[first + b] = l1 / double(px);
      report.model.per_patch.push_back(
          {first + b, n, n ? double(hits) / double(n) : 0.0, n ? sum / double(n) : 0.0});
    }
  }
  if (err_model.empty()) throw DataError("evaluation set has no valid ground-truth pixels");
  auto per_patch = std::move(report.model.per_patch);
  report.model = metrics_from_errors(err_model);
  report.model.per_patch = std::move(per_patch);
  report.baseline = metrics_from_errors(err_base);
  std::sort(loss_per_patch.begin(), loss_per_patch.end());
  report.val_loss_img = std::accumulate(loss_per_patch.begin(), loss_per_patch.end(), 0.0) /
                        double(loss_per_patch.size());
  return report;
}

void write_metrics(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics to '" + path.string() + "'");
  const auto put = [&](const std::string& prefix, const MetricsReport& m) {
    out << prefix << ".acc_at_0_5=" << format_double(m.acc_at_0_5) << '\n'
        << prefix << ".mae=" << format_double(m.mae) << '\n'
        << prefix << ".medae=" << format_double(m.medae) << '\n'
        << prefix << ".pixels=" << m.pixels << '\n';
  };
  put("model", report.model);
  put("baseline", report.baseline);
  out << "loss_img=" << format_double(report.val_loss_img) << '\n';
  for (const auto& p : report.model.per_patch)
    out << "patch." << p.index << "=" << p.pixels << "," << format_double(p.acc) << ","
        << format_double(p.mae) << '\n';
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string metrics_summary(const EvalReport& report) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "pixels        %zu\n"
                "              refined   baseline\n"
                "acc@0.5m      %7.2f%%  %7.2f%%\n"
                "MAE [m]       %8.4f  %8.4f\n"
                "median AE [m] %8.4f  %8.4f\n",
                report.model.pixels, 100.0 * report.model.acc_at_0_5,
                100.0 * report.baseline.acc_at_0_5, report.model.mae, report.baseline.mae,
                report.model.medae, report.baseline.medae);
  return buf;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (optimizer != "adam") throw ConfigError("unsupported optimizer '" + optimizer + "'");
  adam.validate();
  if (!(adam.lr > 0)) throw ConfigError("learning rate must be positive");
  loss.validate();
}

void write_history(std::span<const HistoryRow> history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history to '" + path.string() + "'");
  out << "step\ttotal\timg\tweights\tactivity\tfeat\tval_img\tval_mae\tval_acc\n";
  const auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : "-"; };
  for (const auto& r : history)
    out << r.step << '\t' << format_double(r.total) << '\t' << format_double(r.img) << '\t'
        << format_double(r.weights) << '\t' << format_double(r.activity) << '\t'
        << format_double(r.feat) << '\t' << opt(r.val_img) << '\t' << opt(r.val_mae) << '\t'
        << opt(r.val_acc) << '\n';
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

namespace {

double value_of(const Tensor<float>& t) { return t.defined() ? double(t.item()) : 0.0; }

void check_finite(const LossTerms<float>& terms, std::size_t step) {
  const std::pair<const char*, const Tensor<float>*> named[] = {
      {"img", &terms.img},           {"weights", &terms.weights}, {"activity", &terms.activity},
      {"feat", &terms.feat},         {"total", &terms.total}};
  for (const auto& [name, t] : named) {
    const double v = value_of(*t);
    if (!std::isfinite(v))
      throw NumericError(name, long(step),
                         std::string("non-finite loss term '") + name + "' at step " +
                             std::to_string(step) + " (value " + format_double(v) + ")");
  }
}

/// Batch order: a fresh seeded permutation of the training set every epoch.
class BatchOrder {
 public:
  BatchOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == perm_.size()) {
        ++epoch_;
        reshuffle();
      }
      out.push_back(perm_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    perm_.resize(n_);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    CounterRng rng(derive_seed(seed_, epoch_));
    for (std::size_t i = n_; i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
    pos_ = 0;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> perm_;
};

}  // namespace

TrainResult train(const Model<float>& init, const PatchSet& train_set, const PatchSet* val_set,
                  const NormStats& stats, const TrainConfig& config,
                  const FeatureExtractor<float>* extractor,
                  const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (train_set.patches.empty()) throw DataError("training set is empty");
  if (!train_set.normalized) throw ContractError("training patches must be normalized");
  if (val_set && val_set->patches.empty()) val_set = nullptr;
  if (config.loss.feat > 0 && !extractor)
    throw ConfigError("feature loss weight is positive but no extractor was given");
  if (train_set.patch_size % init.config().size_multiple())
    throw DimensionError("patch size " + std::to_string(train_set.patch_size) +
                         " is not a multiple of " + std::to_string(init.config().size_multiple()));
  if (out_dir) std::filesystem::create_directories(*out_dir);

  TrainResult result;
  Model<float> model = init.clone();
  model.set_trainable(true);
  AdamState adam;
  BatchOrder order(train_set.patches.size(), derive_seed(config.seed, 0xBA7C4ULL));
  bool have_best = false;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto idx = order.next(config.batch_size);
    auto [x, y] = make_batch(train_set, idx);
    Graph<float> g;
    const auto out = model.forward_residual(g, x);
    const auto terms = loss_total(g, out.refined, y, out.residual, model, config.loss, extractor);
    check_finite(terms, step);
    auto total = terms.total;
    model.zero_grad();
    g.backward(total);
    step_adam(model, adam, config.adam);

    HistoryRow row{step,
                   value_of(terms.total),
                   value_of(terms.img),
                   value_of(terms.weights),
                   value_of(terms.activity),
                   value_of(terms.feat),
                   {},
                   {},
                   {}};
    const bool validate_now =
        val_set && ((config.val_every && step % config.val_every == 0) || step == config.steps);
    if (validate_now) {
      const auto rep = evaluate(model, *val_set, stats);
      row.val_img = rep.val_loss_img;
      row.val_mae = rep.model.mae;
      row.val_acc = rep.model.acc_at_0_5;
      if (!have_best || rep.val_loss_img < result.best_val_img) {
        have_best = true;
        result.best = model.clone();
        result.best_step = step;
        result.best_val_img = rep.val_loss_img;
      }
    }
    result.history.push_back(row);
    if (config.log_every && (step % config.log_every == 0 || step == config.steps)) {
      std::fprintf(stderr, "step %zu total %.6g img %.6g", step, row.total, row.img);
      if (row.val_img) std::fprintf(stderr, " val_img %.6g val_mae %.4f", *row.val_img, *row.val_mae);
      std::fprintf(stderr, "\n");
    }
    if (out_dir && config.checkpoint_every && step % config.checkpoint_every == 0)
      save_model(model, *out_dir / ("step_" + std::to_string(step) + ".ckpt"), stats);
  }

  result.last = model.clone();
  if (!have_best) {
    result.best = model.clone();
    result.best_step = config.steps;
    result.best_val_img = result.history.back().img;
  }
  for (auto* m : {&result.best, &result.last}) {
    m->set_trainable(false);
    for (auto& p : m->parameters()) p.tensor.drop_grad();
  }
  if (out_dir) {
    save_model(result.best, *out_dir / "best.ckpt", stats);
    write_history(result.history, *out_dir / "history.tsv");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Tiled inference

namespace {

std::vector<std::size_t> axis_starts(std::size_t length, std::size_t extent, std::size_t overlap) {
  if (length <= extent) return {0};
  std::vector<std::size_t> starts;
  const std::size_t stride = extent - overlap;
  std::size_t s = 0;
  for (; s + extent < length; s += stride) starts.push_back(s);
  starts.push_back(length - extent);
  return starts;
}

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

/// Feathering weight of position d in a tile of the given extent.
double ramp(std::size_t d, std::size_t extent, bool before, bool after, std::size_t overlap) {
  double w = 1.0;
  if (overlap == 0) return w;
  if (before && d < overlap) w = std::min(w, (double(d) + 0.5) / double(overlap));
  const std::size_t back = extent - 1 - d;
  if (after && back < overlap) w = std::min(w, (double(back) + 0.5) / double(overlap));
  return w;
}

}  // namespace

TileLayout tile_layout(std::size_t width, std::size_t height, std::size_t tile,
                       std::size_t overlap, std::size_t multiple) {
  if (tile == 0 || multiple == 0 || tile % multiple)
    throw ConfigError("tile size " + std::to_string(tile) + " must be a positive multiple of " +
                      std::to_string(multiple));
  if (2 * overlap >= tile)
    throw ConfigError("overlap " + std::to_string(overlap) + " must be less than half the tile");
  if (width == 0 || height == 0) throw DimensionError("cannot tile an empty raster");
  TileLayout layout;
  layout.tile_rows = std::min(tile, round_up(height, multiple));
  layout.tile_cols = std::min(tile, round_up(width, multiple));
  layout.row_starts = axis_starts(height, layout.tile_rows, overlap);
  layout.col_starts = axis_starts(width, layout.tile_cols, overlap);
  return layout;
}

Raster infer_tiled(const Model<float>& model, const Raster& raster, const NormStats& stats,
                   std::size_t tile, std::size_t overlap, std::size_t threads,
                   const FillOptions& fill) {
  raster.validate();
  if (!(stats.global_std > 0)) throw ConfigError("normalization std must be positive");
  const std::size_t w = raster.width, h = raster.height;
  const TileLayout layout = tile_layout(w, h, tile, overlap, model.config().size_multiple());
  const Raster filled = fill_holes(raster, fill);
  const std::size_t th = layout.tile_rows, tw = layout.tile_cols;

  struct Job {
    std::size_t r0, c0;
    std::vector<double> residual;  // metres, th x tw
  };
  std::vector<Job> jobs;
  for (auto r0 : layout.row_starts)
    for (auto c0 : layout.col_starts) jobs.push_back({r0, c0, {}});

  const auto run = [&](Job& job) {
    // Real pixels of this tile; anything beyond the raster edge is padding.
    const std::size_t rows = std::min(th, h - job.r0), cols = std::min(tw, w - job.c0);
    double sum = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) sum += filled.heights[(job.r0 + r) * w + job.c0 + c];
    const double center = sum / double(rows * cols);
    Tensor<float> x(Shape{1, 1, th, tw});
    for (std::size_t r = 0; r < th; ++r)
      for (std::size_t c = 0; c < tw; ++c) {
        const std::size_t sr = job.r0 + std::min(r, rows - 1), sc = job.c0 + std::min(c, cols - 1);
        x[r * tw + c] = static_cast<float>((filled.heights[sr * w + sc] - center) / stats.global_std);
      }
    auto g = Graph<float>::inference();
    const auto out = model.forward_residual(g, x);
    job.residual.resize(th * tw);
    for (std::size_t i = 0; i < th * tw; ++i)
      job.residual[i] = double(out.residual[i]) * stats.global_std;
  };

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  const auto worker = [&] {
    for (std::size_t k; !failed && (k = next++) < jobs.size();) {
      try {
        run(jobs[k]);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(std::max<std::size_t>(1, threads), jobs.size()); ++t)
    pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  // Deterministic reduction in tile order.
  std::vector<double> wsum(w * h, 0.0), rsum(w * h, 0.0);
  for (const auto& job : jobs) {
    const std::size_t rows = std::min(th, h - job.r0), cols = std::min(tw, w - job.c0);
    const bool up = job.r0 > 0, down = job.r0 + th < h;
    const bool left = job.c0 > 0, right = job.c0 + tw < w;
    for (std::size_t r = 0; r < rows; ++r) {
      const double wr = ramp(r, th, up, down, overlap);
      for (std::size_t c = 0; c < cols; ++c) {
        const double wt = wr * ramp(c, tw, left, right, overlap);
        const std::size_t i = (job.r0 + r) * w + job.c0 + c;
        wsum[i] += wt;
        rsum[i] += wt * job.residual[r * tw + c];
      }
    }
  }
  Raster out = filled;
  for (std::size_t i = 0; i < w * h; ++i)
    out.heights[i] = static_cast<float>(double(filled.heights[i]) + rsum[i] / wsum[i]);
  return out;
}

double seam_max_step(const Raster& raster, const TileLayout& layout) {
  const std::size_t w = raster.width, h = raster.height;
  std::vector<std::size_t> row_edges, col_edges;
  for (auto s : layout.row_starts) {
    if (s > 0) row_edges.push_back(s);
    if (s + layout.tile_rows < h) row_edges.push_back(s + layout.tile_rows);
  }
  for (auto s : layout.col_starts) {
    if (s > 0) col_edges.push_back(s);
    if (s + layout.tile_cols < w) col_edges.push_back(s + layout.tile_cols);
  }
  double worst = 0.0;
  for (auto e : row_edges)
    for (std::size_t c = 0; c < w; ++c)
      worst = std::max(worst, std::abs(double(raster.heights[e * w + c]) -
                                       double(raster.heights[(e - 1) * w + c])));
  for (auto e : col_edges)
    for (std::size_t r = 0; r < h; ++r)
      worst = std::max(worst, std::abs(double(raster.heights[r * w + e]) -
                                       double(raster.heights[r * w + e - 1])));
  return worst;
}

}  // namespace dsmr
