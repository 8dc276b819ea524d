#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dsmr/errors.hpp"

namespace dsmr {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);

/// Allocator with a fixed 64-byte alignment. Vectorized reductions split work
/// by address alignment, so a fixed alignment keeps results reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;
std::string to_string(const Shape& shape);

/// Dense row-major array with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, which is how the graph refers to
/// the tensors it recorded. Use clone() for an independent copy. Image tensors
/// use the (batch, channels, height, width) convention.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  /// Value of a single-element tensor.
  T item() const;

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    const auto& sh = s_->shape;
    return s_->data[((n * sh[1] + c) * sh[2] + h) * sh[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& sh = s_->shape;
    return s_->data[((n * sh[1] + c) * sh[2] + h) * sh[3] + w];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> grad();
  std::span<const T> grad() const { return s_->grad; }
  void zero_grad();
  void drop_grad() { s_->grad.clear(); s_->grad.shrink_to_fit(); }

  Tensor clone() const;
  bool is_same(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    AlignedVector<T> data;
    AlignedVector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered tape of executed operations.
///
/// Each differentiable op appends one node holding its output and a closure
/// that propagates the output's adjoint to its inputs. backward() replays the
/// closures once each, newest first. A non-recording graph (inference) keeps no
/// nodes at all.
template <typename T>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  static Graph inference() { return Graph(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_.at(i).op; }

  /// True when the op producing an output from these inputs must be recorded.
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const;

  void record(std::string_view op, Tensor<T> out, std::function<void()> backward);

  /// Reverse-mode sweep from a scalar loss. Intermediate adjoints are reset at
  /// the start of every call; gradients of leaf tensors accumulate.
  void backward(Tensor<T>& loss);

  void clear() { nodes_.clear(); }

  /// Running hash of the branch decisions (activation signs, pooling argmax)
  /// taken by recorded ops. Finite-difference checks compare signatures to
  /// detect when a perturbation crosses a kink.
  std::uint64_t branch_signature() const { return signature_; }
  void mix_branch(std::uint64_t bits);
  void set_track_branches(bool on) { track_branches_ = on; }
  bool track_branches() const { return track_branches_; }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> out;
    std::function<void()> backward;
  };
  bool recording_;
  bool track_branches_ = false;
  std::uint64_t signature_ = 0;
  std::vector<Node> nodes_;
};

/// Zero-padding amounts for conv2d.
struct Padding {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t bottom = 0;
  std::size_t right = 0;

  /// Same-size output for the 4x4 kernel: one row/column before, two after.
  static constexpr Padding same4() { return {1, 1, 2, 2}; }
  static constexpr Padding same3() { return {1, 1, 1, 1}; }
};

namespace ops {

/// Stride-1 cross-correlation: out[n,co,i,j] = bias[co] +
/// sum_{ci,u,v} padded[n,ci,i+u,j+v] * kernel[co,ci,u,v].
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, Padding pad);

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order. If argmax is given it receives, per output element,
/// the flat input index that was selected.
template <typename T>
Tensor<T> maxpool2(Graph<T>& g, const Tensor<T>& input,
                   std::vector<std::size_t>* argmax = nullptr);

/// Nearest-neighbour 2x upsampling by pixel repetition.
template <typename T>
Tensor<T> upsample2(Graph<T>& g, const Tensor<T>& input);

/// Per-channel parametric ReLU on an NCHW tensor.
template <typename T>
Tensor<T> prelu(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& slope);

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& input);

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T k);

/// sum_i |a_i| as a scalar tensor; subgradient 0 at 0.
template <typename T>
Tensor<T> l1_norm(Graph<T>& g, const Tensor<T>& a);

/// [N,1,H,W] -> [N,copies,H,W] by replicating the single channel.
template <typename T>
Tensor<T> repeat_channels(Graph<T>& g, const Tensor<T>& input, std::size_t copies);

}  // namespace ops
}  // namespace dsmr
