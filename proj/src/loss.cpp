#include "dsmr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dsmr/format.hpp"
#include "dsmr/random.hpp"

namespace dsmr {

void LossWeights::validate() const {
  const double all[] = {img, weights, activity, feat};
  for (double v : all)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
  for (double v : feat_taps)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ConfigError("feature tap weights must be finite and >= 0");
  if (std::none_of(std::begin(all), std::end(all), [](double v) { return v > 0.0; }))
    throw ConfigError("at least one loss weight must be positive");
}

std::size_t ExtractorConfig::conv_count() const {
  std::size_t n = 0;
  for (auto c : convs_per_block) n += c;
  return n;
}

std::vector<std::size_t> ExtractorConfig::resolved_taps() const {
  if (!taps.empty()) return taps;
  std::vector<std::size_t> out;
  std::size_t idx = 0;
  for (auto c : convs_per_block) {
    idx += c;
    out.push_back(idx - 1);
  }
  return out;
}

void ExtractorConfig::validate() const {
  if (convs_per_block.empty() || convs_per_block.size() != widths.size())
    throw ConfigError("extractor needs one width per block");
  for (auto c : convs_per_block)
    if (c == 0) throw ConfigError("extractor blocks need at least one conv");
  for (auto w : widths)
    if (w == 0) throw ConfigError("extractor widths must be positive");
  if (in_channels == 0) throw ConfigError("extractor in_channels must be positive");
  const auto t = resolved_taps();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] >= conv_count()) throw ConfigError("extractor tap index out of range");
    if (i && t[i] <= t[i - 1]) throw ConfigError("extractor taps must be distinct and increasing");
  }
}

std::size_t ExtractorConfig::min_input_size() const {
  const auto t = resolved_taps();
  std::size_t last = t.empty() ? 0 : t.back();
  std::size_t pools = 0, idx = 0;
  for (auto c : convs_per_block) {
    if (last < idx + c) break;
    idx += c;
    ++pools;
  }
  return std::size_t{1} << pools;
}

template <typename T>
FeatureExtractor<T> FeatureExtractor<T>::random(const ExtractorConfig& config) {
  config.validate();
  FeatureExtractor e;
  e.config_ = config;
  std::size_t cin = config.in_channels;
  std::uint64_t stream = 0;
  for (std::size_t b = 0; b < config.widths.size(); ++b) {
    for (std::size_t j = 0; j < config.convs_per_block[b]; ++j) {
      const std::size_t cout = config.widths[b];
      const double stddev = std::sqrt(2.0 / static_cast<double>(cin * 9));
      CounterRng rng(derive_seed(config.seed, stream++));
      Tensor<T> w(Shape{cout, cin, 3, 3});
      for (auto& v : w.data()) v = static_cast<T>(stddev * rng.normal());
      Tensor<T> bias(Shape{cout});
      for (auto& v : bias.data()) v = static_cast<T>(0.01 * rng.normal());
      const std::string prefix = "block" + std::to_string(b) + ".conv" + std::to_string(j);
      e.params_.push_back({prefix + ".weight", w});
      e.params_.push_back({prefix + ".bias", bias});
      cin = cout;
    }
  }
  return e;
}

template <typename T>
FeatureExtractor<T> FeatureExtractor<T>::from_container(const Container& c) {
  ExtractorConfig cfg;
  try {
    cfg.convs_per_block = parse_size_list(c.get("extractor.blocks"));
    cfg.widths = parse_size_list(c.get("extractor.widths"));
    cfg.taps = parse_size_list(c.get("extractor.taps"));
    cfg.in_channels = parse_number<std::size_t>(c.get("extractor.in_channels"));
    cfg.seed = parse_number<std::uint64_t>(c.get("extractor.seed"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid extractor manifest: ") + e.what());
  }
  // Expected layout, as produced by random().
  const auto reference = FeatureExtractor<float>::random(cfg);
  if (reference.params_.size() != c.tensors.size())
    throw ShapeMismatchError("extractor file has " + std::to_string(c.tensors.size()) +
                             " tensors, layout needs " + std::to_string(reference.params_.size()));
  FeatureExtractor e;
  e.config_ = cfg;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& ref = reference.params_[i];
    const auto& got = c.tensors[i];
    if (ref.name != got.name || ref.tensor.shape() != got.tensor.shape())
      throw ShapeMismatchError("extractor tensor '" + got.name + "' " +
                               to_string(got.tensor.shape()) + " does not match layout entry '" +
                               ref.name + "' " + to_string(ref.tensor.shape()));
    std::vector<T> values(got.tensor.data().begin(), got.tensor.data().end());
    e.params_.push_back({got.name, Tensor<T>(got.tensor.shape(), std::move(values))});
  }
  return e;
}

template <typename T>
Container FeatureExtractor<T>::to_container() const {
  Container c;
  c.magic = kExtractorMagic;
  c.set("kind", "extractor");
  c.set("extractor.blocks", join_list(config_.convs_per_block));
  c.set("extractor.widths", join_list(config_.widths));
  c.set("extractor.taps", join_list(config_.resolved_taps()));
  c.set("extractor.in_channels", std::to_string(config_.in_channels));
  c.set("extractor.seed", std::to_string(config_.seed));
  for (const auto& p : params_) {
    std::vector<float> values(p.tensor.data().begin(), p.tensor.data().end());
    c.tensors.push_back({p.name, Tensor<float>(p.tensor.shape(), std::move(values))});
  }
  return c;
}

template <typename T>
std::vector<Tensor<T>> FeatureExtractor<T>::forward(Graph<T>& g, const Tensor<T>& input) const {
  if (input.rank() != 4 || input.dim(1) != config_.in_channels)
    throw DimensionError("extractor expects [N," + std::to_string(config_.in_channels) +
                         ",H,W], got " + to_string(input.shape()));
  const std::size_t m = config_.min_input_size();
  if (input.dim(2) < m || input.dim(3) < m || input.dim(2) % m || input.dim(3) % m)
    throw DimensionError("feature taps need height and width to be positive multiples of " +
                         std::to_string(m) + ", got " + std::to_string(input.dim(2)) + "x" +
                         std::to_string(input.dim(3)));
  const auto taps = config_.resolved_taps();
  std::vector<Tensor<T>> out;
  Tensor<T> h = input;
  std::size_t layer = 0, p = 0;
  for (std::size_t b = 0; b < config_.widths.size() && out.size() < taps.size(); ++b) {
    if (b > 0) h = ops::maxpool2(g, h);
    for (std::size_t j = 0; j < config_.convs_per_block[b] && out.size() < taps.size(); ++j) {
      h = ops::relu(g, ops::conv2d(g, h, params_[p].tensor, params_[p + 1].tensor,
                                   Padding::same3()));
      p += 2;
      if (layer == taps[out.size()]) out.push_back(h);
      ++layer;
    }
  }
  return out;
}

template <typename T>
std::vector<std::size_t> FeatureExtractor<T>::feature_counts(std::size_t height,
                                                             std::size_t width) const {
  std::vector<std::size_t> counts;
  for (auto tap : config_.resolved_taps()) {
    std::size_t idx = 0, b = 0;
    while (tap >= idx + config_.convs_per_block[b]) idx += config_.convs_per_block[b++];
    counts.push_back(config_.widths[b] * (height >> b) * (width >> b));
  }
  return counts;
}

template <typename T>
std::uint64_t FeatureExtractor<T>::checksum() const {
  std::uint64_t h = 0;
  for (const auto& p : params_)
    for (T v : p.tensor.data()) {
      const double d = static_cast<double>(v);
      std::uint64_t bits;
      std::memcpy(&bits, &d, sizeof bits);
      h = mix64(h ^ bits);
    }
  return h;
}

FeatureExtractor<float> random_extractor(std::uint64_t seed, ExtractorConfig config) {
  config.seed = seed;
  return FeatureExtractor<float>::random(config);
}

void save_extractor(const FeatureExtractor<float>& extractor, const std::filesystem::path& path) {
  write_container(extractor.to_container(), path);
}

FeatureExtractor<float> load_extractor(const std::filesystem::path& path) {
  return FeatureExtractor<float>::from_container(read_container(path, kExtractorMagic));
}

template <typename T>
Tensor<T> loss_img(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target, double lambda) {
  if (pred.shape() != target.shape())
    throw DimensionError("loss_img: prediction " + to_string(pred.shape()) + " vs target " +
                         to_string(target.shape()));
  const double n_img = static_cast<double>(pred.size());
  return ops::scale(g, ops::l1_norm(g, ops::sub(g, pred, target)), static_cast<T>(lambda / n_img));
}

template <typename T>
Tensor<T> loss_weights(Graph<T>& g, const Model<T>& model, double lambda) {
  Tensor<T> sum;
  for (const auto& k : model.kernels()) {
    Tensor<T> term = ops::l1_norm(g, k);
    sum = sum.defined() ? ops::add(g, sum, term) : term;
  }
  return ops::scale(g, sum, static_cast<T>(lambda));
}

template <typename T>
Tensor<T> loss_activity(Graph<T>& g, const Tensor<T>& residual, double lambda) {
  return ops::scale(g, ops::l1_norm(g, residual), static_cast<T>(lambda));
}

template <typename T>
Tensor<T> loss_feat(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target,
                    const FeatureExtractor<T>& extractor, double lambda_feat,
                    std::span<const double> lambda_taps) {
  if (pred.shape() != target.shape())
    throw DimensionError("loss_feat: prediction " + to_string(pred.shape()) + " vs target " +
                         to_string(target.shape()));
  const auto taps = extractor.config().resolved_taps();
  if (lambda_taps.size() != taps.size())
    throw ConfigError("loss_feat: " + std::to_string(lambda_taps.size()) +
                      " tap weights for " + std::to_string(taps.size()) + " taps");
  const std::size_t ch = extractor.config().in_channels;
  const auto lift = [&](const Tensor<T>& x) {
    return ch == 1 ? x : ops::repeat_channels(g, x, ch);
  };
  const auto fp = extractor.forward(g, lift(pred));
  const auto ft = extractor.forward(g, lift(target));

  Tensor<T> sum = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (lambda_taps[i] == 0.0) continue;
    const double n_i = static_cast<double>(fp[i].size());
    Tensor<T> term = ops::scale(g, ops::l1_norm(g, ops::sub(g, fp[i], ft[i])),
                                static_cast<T>(lambda_taps[i] / n_i));
    sum = ops::add(g, sum, term);
  }
  return ops::scale(g, sum, static_cast<T>(lambda_feat));
}

template <typename T>
LossTerms<T> loss_total(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target,
                        const Tensor<T>& residual, const Model<T>& model,
                        const LossWeights& weights, const FeatureExtractor<T>* extractor) {
  const auto zero = [] { return Tensor<T>::scalar(T(0)); };
  LossTerms<T> t;
  t.img = weights.img != 0.0 ? loss_img(g, pred, target, weights.img) : zero();
  t.weights = weights.weights != 0.0 ? loss_weights(g, model, weights.weights) : zero();
  t.activity = weights.activity != 0.0 ? loss_activity(g, residual, weights.activity) : zero();
  if (weights.feat != 0.0) {
    if (!extractor) throw ContractError("loss_total: feature term enabled without an extractor");
    t.feat = loss_feat(g, pred, target, *extractor, weights.feat, weights.feat_taps);
  } else {
    t.feat = zero();
  }
  t.total = ops::add(g, ops::add(g, ops::add(g, t.img, t.weights), t.activity), t.feat);
  return t;
}

#define DSMR_INSTANTIATE_LOSS(T)                                                               \
  template class FeatureExtractor<T>;                                                          \
  template Tensor<T> loss_img(Graph<T>&, const Tensor<T>&, const Tensor<T>&, double);          \
  template Tensor<T> loss_weights(Graph<T>&, const Model<T>&, double);                         \
  template Tensor<T> loss_activity(Graph<T>&, const Tensor<T>&, double);                       \
  template Tensor<T> loss_feat(Graph<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                               const FeatureExtractor<T>&, double, std::span<const double>);   \
  template LossTerms<T> loss_total(Graph<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                   const Tensor<T>&, const Model<T>&, const LossWeights&,      \
                                   const FeatureExtractor<T>*);

DSMR_INSTANTIATE_LOSS(float)
DSMR_INSTANTIATE_LOSS(double)

}  // namespace dsmr
