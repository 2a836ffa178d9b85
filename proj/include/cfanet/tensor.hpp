#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfanet {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for malformed files (bad magic, truncation, unsupported version).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values in a loss, gradient or parameter.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  int64_t n = 0;
  int64_t c = 0;
  int64_t h = 0;
  int64_t w = 0;

  size_t numel() const {
    return static_cast<size_t>(n * c * h * w);
  }
  size_t plane() const { return static_cast<size_t>(h * w); }
  bool is_scalar() const { return n == 1 && c == 1 && h == 1 && w == 1; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense NCHW array. `grad` stays empty until a backward pass populates it.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.numel(), fill) {}
  Tensor(Shape s, std::vector<T> values);

  size_t numel() const { return data.size(); }

  T& at(int64_t n, int64_t c, int64_t y, int64_t x) {
    return data[index(n, c, y, x)];
  }
  const T& at(int64_t n, int64_t c, int64_t y, int64_t x) const {
    return data[index(n, c, y, x)];
  }
  size_t index(int64_t n, int64_t c, int64_t y, int64_t x) const {
    return static_cast<size_t>(((n * shape.c + c) * shape.h + y) * shape.w + x);
  }

  void zero_grad() { grad.assign(data.size(), T(0)); }
  T sum() const;

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

/// Convolution geometry. Stride is always 1.
struct ConvSpec {
  int64_t out_channels = 1;
  int64_t kernel = 3;
  int64_t dilation = 1;
  int64_t padding = 1;

  /// Padding that keeps the spatial size unchanged for odd kernels.
  static ConvSpec same(int64_t out_channels, int64_t kernel,
                       int64_t dilation = 1) {
    return {out_channels, kernel, dilation, dilation * (kernel - 1) / 2};
  }
};

}  // namespace cfanet
