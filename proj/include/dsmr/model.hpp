#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dsmr/tensor.hpp"

namespace dsmr {

/// Encoder-decoder layout. channels[k] is the width of encoder level k for
/// k < depth; channels[depth] is the bottleneck width.
struct ModelConfig {
  std::size_t depth = 5;
  std::vector<std::size_t> channels{64, 128, 256, 512, 1024, 1024};
  std::size_t in_channels = 1;
  double prelu_init = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
  /// Input height and width must be multiples of this.
  std::size_t size_multiple() const { return std::size_t{1} << depth; }
  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form number of trainable scalars: Cin*Cout*16 + Cout per conv plus
/// one slope per PReLU channel.
std::size_t param_count(const ModelConfig& config);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ResidualOutput {
  Tensor<T> refined;   ///< X + f(X)
  Tensor<T> residual;  ///< f(X), the decoder output
};

/// Residual encoder-decoder.
///
/// Encoder level k: conv4x4 + PReLU (kept as the skip source), then 2x2 max
/// pool. Bottleneck: conv4x4 + PReLU. Decoder level k (deepest first):
/// upsample2, conv4x4 + ReLU, then add the level-k skip. Head: linear conv4x4
/// to one channel. The head output is the residual added to the input.
template <typename T>
class Model {
 public:
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }

  Tensor<T>& param(std::string_view name);
  const Tensor<T>& param(std::string_view name) const;

  /// Convolution kernels only (no biases or slopes); the weight regularizer's w.
  std::vector<Tensor<T>> kernels() const;

  ResidualOutput<T> forward_residual(Graph<T>& g, const Tensor<T>& input) const;

  void zero_grad();
  void set_trainable(bool on);
  /// Zeroes the head kernel and bias so that forward_residual is the identity.
  void zero_head();

  /// Deep copy, converting the scalar type.
  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.config_ = config_;
    for (const auto& p : params_) {
      std::vector<U> values(p.tensor.data().begin(), p.tensor.data().end());
      out.params_.push_back({p.name, Tensor<U>(p.tensor.shape(), std::move(values),
                                               p.tensor.requires_grad())});
    }
    return out;
  }

  Model clone() const { return cast<T>(); }

  /// Assembles a model from named tensors, validating names and shapes against
  /// the layout implied by the config.
  static Model from_parameters(const ModelConfig& config, std::vector<NamedTensor<T>> params);

 private:
  template <typename>
  friend class Model;

  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
};

/// Names and shapes of every parameter, in canonical order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

}  // namespace dsmr
