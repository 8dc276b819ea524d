#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dsmr/checkpoint.hpp"
#include "dsmr/model.hpp"
#include "dsmr/tensor.hpp"

namespace dsmr {

/// Scaling factors of the four loss terms plus one factor per feature tap.
struct LossWeights {
  double img = 1.0;
  double weights = 1e-6;
  double activity = 1e-5;
  double feat = 0.0;
  std::vector<double> feat_taps{1.0, 1.0, 1.0, 1.0, 1.0};

  void validate() const;
};

/// Layout of the fixed feature network: blocks of 3x3 conv + ReLU, each block
/// followed by 2x2 max pooling. Defaults to the VGG16 convolutional stack.
struct ExtractorConfig {
  std::vector<std::size_t> convs_per_block{2, 2, 3, 3, 3};
  std::vector<std::size_t> widths{64, 128, 256, 512, 512};
  /// Indices of tapped ReLU layers, counted over the whole stack from 0.
  /// Empty means the last ReLU of every block.
  std::vector<std::size_t> taps;
  std::size_t in_channels = 3;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::size_t> resolved_taps() const;
  std::size_t conv_count() const;
  /// Smallest input side that reaches the deepest tap with integral extents.
  std::size_t min_input_size() const;
  bool operator==(const ExtractorConfig&) const = default;
};

/// Fixed (never trained) convolutional feature network.
template <typename T>
class FeatureExtractor {
 public:
  /// He-initialized weights drawn from a seeded stream; deterministic per seed.
  static FeatureExtractor random(const ExtractorConfig& config);
  static FeatureExtractor from_container(const Container& c);

  Container to_container() const;

  const ExtractorConfig& config() const { return config_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }

  /// Activations at every tap for an [N, in_channels, H, W] input.
  std::vector<Tensor<T>> forward(Graph<T>& g, const Tensor<T>& input) const;

  /// Number of feature values (C*H*W) at each tap for one H x W input.
  std::vector<std::size_t> feature_counts(std::size_t height, std::size_t width) const;

  /// Order-sensitive hash of all weights.
  std::uint64_t checksum() const;

  template <typename U>
  FeatureExtractor<U> cast() const {
    FeatureExtractor<U> out;
    out.config_ = config_;
    for (const auto& p : params_) {
      std::vector<U> values(p.tensor.data().begin(), p.tensor.data().end());
      out.params_.push_back({p.name, Tensor<U>(p.tensor.shape(), std::move(values))});
    }
    return out;
  }

 private:
  template <typename>
  friend class FeatureExtractor;

  ExtractorConfig config_;
  std::vector<NamedTensor<T>> params_;
};

FeatureExtractor<float> random_extractor(std::uint64_t seed,
                                         ExtractorConfig config = ExtractorConfig{});
void save_extractor(const FeatureExtractor<float>& extractor, const std::filesystem::path& path);
FeatureExtractor<float> load_extractor(const std::filesystem::path& path);

/// (lambda / N_img) * ||pred - target||_1 with N_img the number of pixels.
template <typename T>
Tensor<T> loss_img(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target, double lambda);

/// lambda * sum of |w| over all convolution kernels (biases and slopes excluded).
template <typename T>
Tensor<T> loss_weights(Graph<T>& g, const Model<T>& model, double lambda);

/// lambda * ||residual||_1.
template <typename T>
Tensor<T> loss_activity(Graph<T>& g, const Tensor<T>& residual, double lambda);

/// lambda_feat * sum_i (lambda_i / N_i) * ||phi_i(pred) - phi_i(target)||_1.
///
/// Single-band inputs are replicated to the extractor's channel count. N_i
/// counts every value of tap i across the batch. Only pred receives gradients.
template <typename T>
Tensor<T> loss_feat(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target,
                    const FeatureExtractor<T>& extractor, double lambda_feat,
                    std::span<const double> lambda_taps);

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> img;       ///< already scaled by its lambda
  Tensor<T> weights;
  Tensor<T> activity;
  Tensor<T> feat;
};

/// Sum of the four weighted terms. Terms whose lambda is zero are not evaluated
/// and contribute an exact zero. extractor may be null when weights.feat == 0.
template <typename T>
LossTerms<T> loss_total(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target,
                        const Tensor<T>& residual, const Model<T>& model,
                        const LossWeights& weights, const FeatureExtractor<T>* extractor);

}  // namespace dsmr
