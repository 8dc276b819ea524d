#include "dsmr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "dsmr/random.hpp"

namespace dsmr {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : s_(std::make_shared<Storage>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  s_->data.assign(numel(shape), fill);
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  if (numel(shape) != values.size())
    throw DimensionError("shape " + to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  s_->shape = std::move(shape);
  s_->data.assign(values.begin(), values.end());
  s_->requires_grad = requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return s_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
  return s_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  s_->grad.assign(s_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out;
  out.s_ = std::make_shared<Storage>();
  out.s_->shape = s_->shape;
  out.s_->data = s_->data;
  out.s_->requires_grad = s_->requires_grad;
  return out;
}

template <typename T>
bool Graph<T>::wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
void Graph<T>::record(std::string_view op, Tensor<T> out, std::function<void()> backward) {
  out.set_requires_grad(true);
  nodes_.push_back(Node{op, std::move(out), std::move(backward)});
}

template <typename T>
void Graph<T>::mix_branch(std::uint64_t bits) {
  signature_ = mix64(signature_ ^ (bits + 0x9E3779B97F4A7C15ULL + (signature_ << 6)));
}

template <typename T>
void Graph<T>::backward(Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  for (auto& node : nodes_) node.out.zero_grad();
  loss.grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

namespace ops {
namespace {

constexpr std::uint64_t kFnvPrime = 0x100000001B3ULL;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4)
    throw DimensionError(std::string(op) + ": expected NCHW tensor, got " + to_string(s));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
}

struct ConvGeometry {
  std::size_t cin, h, w, kh, kw, ho, wo;
  Padding pad;
};

// col[(ci*kh+u)*kw+v, i*wo+j] = in[ci, i+u-top, j+v-left], zero outside.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* plane = in + ci * g.h * g.w;
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        T* row = col + ((ci * g.kh + u) * g.kw + v) * p;
        // Valid output columns j satisfy 0 <= j + v - left < w.
        const long off = static_cast<long>(v) - static_cast<long>(g.pad.left);
        const long j0 = std::max<long>(0, -off);
        const long j1 = std::min<long>(static_cast<long>(g.wo), static_cast<long>(g.w) - off);
        for (std::size_t i = 0; i < g.ho; ++i) {
          T* dst = row + i * g.wo;
          const long si = static_cast<long>(i + u) - static_cast<long>(g.pad.top);
          if (si < 0 || si >= static_cast<long>(g.h) || j1 <= j0) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          std::fill(dst, dst + j0, T(0));
          std::copy(plane + si * g.w + (j0 + off), plane + si * g.w + (j1 + off), dst + j0);
          std::fill(dst + j1, dst + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* in_grad) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* plane = in_grad + ci * g.h * g.w;
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const T* row = col + ((ci * g.kh + u) * g.kw + v) * p;
        const long off = static_cast<long>(v) - static_cast<long>(g.pad.left);
        const long j0 = std::max<long>(0, -off);
        const long j1 = std::min<long>(static_cast<long>(g.wo), static_cast<long>(g.w) - off);
        if (j1 <= j0) continue;
        for (std::size_t i = 0; i < g.ho; ++i) {
          const long si = static_cast<long>(i + u) - static_cast<long>(g.pad.top);
          if (si < 0 || si >= static_cast<long>(g.h)) continue;
          const T* src = row + i * g.wo;
          T* dst = plane + si * g.w + off;
          for (long j = j0; j < j1; ++j) dst[j] += src[j];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, Padding pad) {
  require_rank4(input.shape(), "conv2d input");
  require_rank4(kernel.shape(), "conv2d kernel");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin)
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
  if (bias.size() != cout)
    throw DimensionError("conv2d: bias has " + std::to_string(bias.size()) + " entries, expected " +
                         std::to_string(cout));
  if (h + pad.top + pad.bottom < kh || w + pad.left + pad.right < kw)
    throw DimensionError("conv2d: padded input smaller than kernel");
  const ConvGeometry geo{cin, h, w, kh, kw, h + pad.top + pad.bottom - kh + 1,
                         w + pad.left + pad.right - kw + 1, pad};
  const std::size_t k = cin * kh * kw, p = geo.ho * geo.wo;

  Tensor<T> out(Shape{n, cout, geo.ho, geo.wo});
  AlignedVector<T> col(k * p);
  ConstMatMap<T> wmat(kernel.ptr(), cout, k);
  for (std::size_t s = 0; s < n; ++s) {
    im2col(input.ptr() + s * cin * h * w, geo, col.data());
    MatMap<T> o(out.ptr() + s * cout * p, cout, p);
    o.noalias() = wmat * ConstMatMap<T>(col.data(), k, p);
    for (std::size_t co = 0; co < cout; ++co) o.row(co).array() += bias[co];
  }

  if (g.wants_grad({&input, &kernel, &bias})) {
    g.record("conv2d", out, [input = input, kernel = kernel, bias = bias, out, geo, n]() mutable {
      const std::size_t cin = geo.cin, cout = kernel.dim(0);
      const std::size_t k = cin * geo.kh * geo.kw, p = geo.ho * geo.wo;
      const std::size_t in_plane = cin * geo.h * geo.w;
      AlignedVector<T> col(k * p);
      AlignedVector<T> dcol(input.requires_grad() ? k * p : 0);
      ConstMatMap<T> wmat(kernel.ptr(), cout, k);
      auto dout = out.grad();
      for (std::size_t s = 0; s < n; ++s) {
        ConstMatMap<T> dy(dout.data() + s * cout * p, cout, p);
        if (kernel.requires_grad()) {
          im2col(input.ptr() + s * in_plane, geo, col.data());
          MatMap<T> dw(kernel.grad().data(), cout, k);
          dw.noalias() += dy * ConstMatMap<T>(col.data(), k, p).transpose();
        }
        if (bias.requires_grad()) {
          auto db = bias.grad();
          for (std::size_t co = 0; co < cout; ++co) db[co] += dy.row(co).sum();
        }
        if (input.requires_grad()) {
          MatMap<T>(dcol.data(), k, p).noalias() = wmat.transpose() * dy;
          col2im_add(dcol.data(), geo, input.grad().data() + s * in_plane);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2(Graph<T>& g, const Tensor<T>& input, std::vector<std::size_t>* argmax_out) {
  require_rank4(input.shape(), "maxpool2");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2)
    throw DimensionError("maxpool2: height and width must be even, got " + to_string(input.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const T* in = input.ptr();
  const bool track = g.track_branches();
  std::uint64_t sig = 0;
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j, ++o) {
        std::size_t best = base + 2 * i * w + 2 * j;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t q : cand)
          if (in[q] > in[best]) best = q;
        argmax[o] = best;
        out[o] = in[best];
        if (track) sig = (sig ^ (best - (base + 2 * i * w + 2 * j))) * kFnvPrime;
      }
    }
  }
  if (track) g.mix_branch(sig);
  if (argmax_out) *argmax_out = argmax;
  if (g.wants_grad({&input})) {
    g.record("maxpool2", out, [input = input, out, argmax = std::move(argmax)]() mutable {
      auto dx = input.grad();
      auto dy = out.grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample2(Graph<T>& g, const Tensor<T>& input) {
  require_rank4(input.shape(), "upsample2");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
  const T* in = input.ptr();
  T* dst = out.ptr();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      const T* src = in + (plane * h + i / 2) * w;
      T* row = dst + (plane * 2 * h + i) * 2 * w;
      for (std::size_t j = 0; j < w; ++j) row[2 * j] = row[2 * j + 1] = src[j];
    }
  }
  if (g.wants_grad({&input})) {
    g.record("upsample2", out, [input = input, out, n, c, h, w]() mutable {
      auto dx = input.grad();
      auto dy = out.grad();
      for (std::size_t plane = 0; plane < n * c; ++plane)
        for (std::size_t i = 0; i < 2 * h; ++i) {
          const T* row = dy.data() + (plane * 2 * h + i) * 2 * w;
          T* dst = dx.data() + (plane * h + i / 2) * w;
          for (std::size_t j = 0; j < w; ++j) dst[j] += row[2 * j] + row[2 * j + 1];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> prelu(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& slope) {
  require_rank4(input.shape(), "prelu");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (slope.size() != c)
    throw DimensionError("prelu: slope has " + std::to_string(slope.size()) +
                         " entries for " + std::to_string(c) + " channels");
  Tensor<T> out(input.shape());
  const bool track = g.track_branches();
  std::uint64_t sig = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * hw;
      const T a = slope[ch];
      for (std::size_t q = base; q < base + hw; ++q) {
        const T x = input[q];
        out[q] = x >= T(0) ? x : a * x;
        if (track) sig = (sig ^ (x > T(0))) * kFnvPrime;
      }
    }
  if (track) g.mix_branch(sig);
  if (g.wants_grad({&input, &slope})) {
    g.record("prelu", out, [input = input, slope = slope, out, n, c, hw]() mutable {
      auto dy = out.grad();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (s * c + ch) * hw;
          const T a = slope[ch];
          if (input.requires_grad()) {
            auto dx = input.grad();
            for (std::size_t q = base; q < base + hw; ++q) {
              const T x = input[q];
              dx[q] += x > T(0) ? dy[q] : (x < T(0) ? a * dy[q] : T(0));
            }
          }
          if (slope.requires_grad()) {
            T acc = 0;
            for (std::size_t q = base; q < base + hw; ++q)
              if (input[q] < T(0)) acc += input[q] * dy[q];
            slope.grad()[ch] += acc;
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const bool track = g.track_branches();
  std::uint64_t sig = 0;
  for (std::size_t q = 0; q < input.size(); ++q) {
    out[q] = input[q] > T(0) ? input[q] : T(0);
    if (track) sig = (sig ^ (input[q] > T(0))) * kFnvPrime;
  }
  if (track) g.mix_branch(sig);
  if (g.wants_grad({&input})) {
    g.record("relu", out, [input = input, out]() mutable {
      auto dx = input.grad();
      auto dy = out.grad();
      for (std::size_t q = 0; q < dx.size(); ++q)
        if (input[q] > T(0)) dx[q] += dy[q];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = a[q] + b[q];
  if (g.wants_grad({&a, &b})) {
    g.record("add", out, [a = a, b = b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t q = 0; q < dy.size(); ++q) da[q] += dy[q];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t q = 0; q < dy.size(); ++q) db[q] += dy[q];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = a[q] - b[q];
  if (g.wants_grad({&a, &b})) {
    g.record("sub", out, [a = a, b = b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t q = 0; q < dy.size(); ++q) da[q] += dy[q];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t q = 0; q < dy.size(); ++q) db[q] -= dy[q];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T k) {
  Tensor<T> out(a.shape());
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = k * a[q];
  if (g.wants_grad({&a})) {
    g.record("scale", out, [a = a, out, k]() mutable {
      auto da = a.grad();
      auto dy = out.grad();
      for (std::size_t q = 0; q < dy.size(); ++q) da[q] += k * dy[q];
    });
  }
  return out;
}

template <typename T>
Tensor<T> l1_norm(Graph<T>& g, const Tensor<T>& a) {
  // Accumulate in double so single-precision sums over large patches stay exact enough.
  double acc = 0;
  const bool track = g.track_branches();
  std::uint64_t sig = 0;
  for (std::size_t q = 0; q < a.size(); ++q) {
    acc += std::abs(static_cast<double>(a[q]));
    if (track) sig = (sig ^ (a[q] > T(0) ? 2u : (a[q] < T(0) ? 1u : 0u))) * kFnvPrime;
  }
  if (track) g.mix_branch(sig);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (g.wants_grad({&a})) {
    g.record("l1_norm", out, [a = a, out]() mutable {
      auto da = a.grad();
      const T dy = out.grad()[0];
      for (std::size_t q = 0; q < da.size(); ++q)
        if (a[q] > T(0))
          da[q] += dy;
        else if (a[q] < T(0))
          da[q] -= dy;
    });
  }
  return out;
}

template <typename T>
Tensor<T> repeat_channels(Graph<T>& g, const Tensor<T>& input, std::size_t copies) {
  require_rank4(input.shape(), "repeat_channels");
  if (input.dim(1) != 1)
    throw DimensionError("repeat_channels: expected a single channel, got " +
                         to_string(input.shape()));
  if (copies == 0) throw DimensionError("repeat_channels: copies must be positive");
  const std::size_t n = input.dim(0), hw = input.dim(2) * input.dim(3);
  Tensor<T> out(Shape{n, copies, input.dim(2), input.dim(3)});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t c = 0; c < copies; ++c)
      std::copy_n(input.ptr() + s * hw, hw, out.ptr() + (s * copies + c) * hw);
  if (g.wants_grad({&input})) {
    g.record("repeat_channels", out, [input = input, out, n, copies, hw]() mutable {
      auto dx = input.grad();
      auto dy = out.grad();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t c = 0; c < copies; ++c) {
          const T* src = dy.data() + (s * copies + c) * hw;
          T* dst = dx.data() + s * hw;
          for (std::size_t q = 0; q < hw; ++q) dst[q] += src[q];
        }
    });
  }
  return out;
}

#define DSMR_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                            Padding);                                                        \
  template Tensor<T> maxpool2(Graph<T>&, const Tensor<T>&, std::vector<std::size_t>*);       \
  template Tensor<T> upsample2(Graph<T>&, const Tensor<T>&);                                 \
  template Tensor<T> prelu(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> relu(Graph<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> sub(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> scale(Graph<T>&, const Tensor<T>&, T);                                  \
  template Tensor<T> l1_norm(Graph<T>&, const Tensor<T>&);                                   \
  template Tensor<T> repeat_channels(Graph<T>&, const Tensor<T>&, std::size_t);

DSMR_INSTANTIATE_OPS(float)
DSMR_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace dsmr
