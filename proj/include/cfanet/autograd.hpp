#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cfanet/tensor.hpp"

namespace cfanet {

template <class T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  size_t id = 0;

  const Shape& shape() const;
  const std::vector<T>& data() const;
  T item() const;
};

/// Define-by-run recording of differentiable ops. Nodes are appended in
/// execution order so parents always precede children.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var<T> constant(Tensor<T> value);
  Var<T> constant(Shape shape, T fill);
  /// Leaf bound to an external tensor. If `t.requires_grad`, backward()
  /// accumulates into `t.grad`. The tensor must outlive backward().
  Var<T> leaf(Tensor<T>& t);
  /// Leaf owned by the tape that still records a gradient (read via grad()).
  Var<T> variable(Tensor<T> value);

  Var<T> record(Shape shape, std::vector<T> value,
                std::initializer_list<Var<T>> parents, BackwardFn fn);

  /// Reverse sweep from a scalar loss. Node gradients are recomputed from
  /// scratch; bound leaf gradients accumulate across calls.
  void backward(Var<T> loss);

  const Shape& shape(size_t id) const { return nodes_[id].shape; }
  const std::vector<T>& value(size_t id) const { return nodes_[id].value; }
  const std::vector<T>& grad(Var<T> v) const { return nodes_[v.id].grad; }
  bool needs_grad(size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer of a node, allocated on first use. Backward rules add
  /// into it.
  std::vector<T>& grad_buffer(size_t id);
  Tensor<T> tensor(Var<T> v) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Tensor<T>* bound = nullptr;
  };
  std::vector<Node> nodes_;
};

// ---- differentiable ops ----------------------------------------------------

/// Same-size or stride-1 dilated convolution; bias may be a null Var
/// (tape == nullptr) for no bias.
template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, const ConvSpec& spec);

/// Bilinear upsampling by an integer factor with half-pixel centers:
/// src = (dst + 0.5) / factor - 0.5, clamped to the valid range.
template <class T>
Var<T> upsample_bilinear(Var<T> input, int64_t factor);
template <class T>
Var<T> upsample_bilinear2x(Var<T> input) {
  return upsample_bilinear(input, 2);
}

/// 2x2 mean pooling. Odd sizes replicate the last row/column first.
template <class T>
Var<T> avgpool2(Var<T> input);

/// Valid-region filtering of every channel with the separable kernel
/// taps (outer) taps, i.e. a vertical then a horizontal 1-D pass.
template <class T>
Var<T> separable_filter(Var<T> input, std::span<const T> taps);

/// 2x2 max pooling over even-sized maps; gradient routes to the first
/// maximum of each block.
template <class T>
Var<T> maxpool2(Var<T> input);

template <class T>
Var<T> relu(Var<T> a);
template <class T>
Var<T> sigmoid(Var<T> a);
template <class T>
Var<T> square(Var<T> a);
template <class T>
Var<T> scale(Var<T> a, T s);
template <class T>
Var<T> add_scalar(Var<T> a, T s);

// Binary ops accept equal shapes, or `b` with one channel broadcast over
// the channels of `a`.
template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
template <class T>
Var<T> div(Var<T> a, Var<T> b);

template <class T>
Var<T> sum(Var<T> a);
template <class T>
Var<T> mean(Var<T> a);

/// Softmax over channels at every pixel.
template <class T>
Var<T> channel_softmax(Var<T> logits);
/// Per-pixel sum_c w[c] * x[c]; output has one channel.
template <class T>
Var<T> channel_weighted_sum(Var<T> x, std::span<const T> weights);

/// Mean binary cross-entropy of sigmoid(logits) against a {0,1} target.
template <class T>
Var<T> bce_with_logits(Var<T> logits, const std::vector<uint8_t>& target);
/// Mean k-class cross-entropy of softmax(logits) against class indices.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits,
                             const std::vector<uint8_t>& classes);

}  // namespace cfanet
