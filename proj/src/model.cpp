#include "dsmr/model.hpp"

#include <cmath>

#include "dsmr/random.hpp"

namespace dsmr {
namespace {

constexpr std::size_t kKernel = 4;

enum class Activation { kPrelu, kRelu, kLinear };

struct ConvSpec {
  std::string prefix;
  std::size_t cin;
  std::size_t cout;
  Activation act;
};

std::vector<ConvSpec> conv_specs(const ModelConfig& c) {
  std::vector<ConvSpec> specs;
  for (std::size_t k = 0; k < c.depth; ++k)
    specs.push_back({"enc" + std::to_string(k), k == 0 ? c.in_channels : c.channels[k - 1],
                     c.channels[k], Activation::kPrelu});
  specs.push_back({"bottleneck", c.channels[c.depth - 1], c.channels[c.depth], Activation::kPrelu});
  for (std::size_t k = c.depth; k-- > 0;)
    specs.push_back({"dec" + std::to_string(k), c.channels[k + 1],
                     c.channels[k], Activation::kRelu});
  specs.push_back({"head", c.channels[0], 1, Activation::kLinear});
  return specs;
}

}  // namespace

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError("model depth must be at least 1");
  if (channels.size() != depth + 1)
    throw ConfigError("model needs depth + 1 = " + std::to_string(depth + 1) +
                      " channel widths, got " + std::to_string(channels.size()));
  for (auto c : channels)
    if (c < 1) throw ConfigError("channel widths must be positive");
  if (in_channels != 1) throw ConfigError("residual model takes single-band input (in_channels = 1)");
  if (!std::isfinite(prelu_init)) throw ConfigError("prelu_init must be finite");
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> layout;
  for (const auto& s : conv_specs(config)) {
    layout.emplace_back(s.prefix + ".conv.weight", Shape{s.cout, s.cin, kKernel, kKernel});
    layout.emplace_back(s.prefix + ".conv.bias", Shape{s.cout});
    if (s.act == Activation::kPrelu) layout.emplace_back(s.prefix + ".prelu.slope", Shape{s.cout});
  }
  return layout;
}

std::size_t param_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& s : conv_specs((config.validate(), config))) {
    total += s.cin * s.cout * kKernel * kKernel + s.cout;
    if (s.act == Activation::kPrelu) total += s.cout;
  }
  return total;
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  std::uint64_t stream = 0;
  for (const auto& s : conv_specs(config)) {
    const double fan_in = static_cast<double>(s.cin * kKernel * kKernel);
    double gain = 2.0;
    if (s.act == Activation::kPrelu) gain = 2.0 / (1.0 + config.prelu_init * config.prelu_init);
    if (s.act == Activation::kLinear) gain = 1.0;
    const double stddev = std::sqrt(gain / fan_in);

    Tensor<T> w(Shape{s.cout, s.cin, kKernel, kKernel}, T(0), true);
    CounterRng rng(derive_seed(config.seed, stream++));
    for (auto& v : w.data()) v = static_cast<T>(stddev * rng.normal());
    m.params_.push_back({s.prefix + ".conv.weight", w});
    m.params_.push_back({s.prefix + ".conv.bias", Tensor<T>(Shape{s.cout}, T(0), true)});
    if (s.act == Activation::kPrelu)
      m.params_.push_back({s.prefix + ".prelu.slope",
                           Tensor<T>(Shape{s.cout}, static_cast<T>(config.prelu_init), true)});
  }
  return m;
}

template <typename T>
Model<T> Model<T>::from_parameters(const ModelConfig& config, std::vector<NamedTensor<T>> params) {
  const auto layout = parameter_layout(config);
  if (params.size() != layout.size())
    throw ShapeMismatchError("config implies " + std::to_string(layout.size()) +
                             " parameter tensors, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (params[i].name != layout[i].first)
      throw ShapeMismatchError("expected parameter '" + layout[i].first + "', got '" +
                               params[i].name + "'");
    if (params[i].tensor.shape() != layout[i].second)
      throw ShapeMismatchError("parameter '" + params[i].name + "' has shape " +
                               to_string(params[i].tensor.shape()) + ", config implies " +
                               to_string(layout[i].second));
    params[i].tensor.set_requires_grad(true);
  }
  Model m;
  m.config_ = config;
  m.params_ = std::move(params);
  return m;
}

template <typename T>
Tensor<T>& Model<T>::param(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Tensor<T>& Model<T>::param(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::vector<Tensor<T>> Model<T>::kernels() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_)
    if (p.name.ends_with(".conv.weight")) out.push_back(p.tensor);
  return out;
}

template <typename T>
ResidualOutput<T> Model<T>::forward_residual(Graph<T>& g, const Tensor<T>& input) const {
  if (input.rank() != 4 || input.dim(1) != config_.in_channels)
    throw DimensionError("forward_residual expects [N," + std::to_string(config_.in_channels) +
                         ",H,W], got " + to_string(input.shape()));
  const std::size_t multiple = config_.size_multiple();
  if (input.dim(2) % multiple || input.dim(3) % multiple)
    throw DimensionError("input height and width must be multiples of " + std::to_string(multiple) +
                         " for depth " + std::to_string(config_.depth) + ", got " +
                         std::to_string(input.dim(2)) + "x" + std::to_string(input.dim(3)));

  const auto conv = [&](const std::string& prefix, const Tensor<T>& x) {
    return ops::conv2d(g, x, param(prefix + ".conv.weight"), param(prefix + ".conv.bias"),
                       Padding::same4());
  };

  std::vector<Tensor<T>> skips;
  Tensor<T> h = input;
  for (std::size_t k = 0; k < config_.depth; ++k) {
    const std::string prefix = "enc" + std::to_string(k);
    Tensor<T> e = ops::prelu(g, conv(prefix, h), param(prefix + ".prelu.slope"));
    skips.push_back(e);
    h = ops::maxpool2(g, e);
  }
  h = ops::prelu(g, conv("bottleneck", h), param("bottleneck.prelu.slope"));
  for (std::size_t k = config_.depth; k-- > 0;) {
    h = ops::upsample2(g, h);
    h = ops::relu(g, conv("dec" + std::to_string(k), h));
    h = ops::add(g, h, skips[k]);
  }
  Tensor<T> residual = conv("head", h);
  return {ops::add(g, input, residual), residual};
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void Model<T>::set_trainable(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

template <typename T>
void Model<T>::zero_head() {
  for (auto* name : {"head.conv.weight", "head.conv.bias"})
    for (auto& v : param(name).data()) v = T(0);
}

template class Model<float>;
template class Model<double>;

}  // namespace dsmr
