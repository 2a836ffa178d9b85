#include "cfanet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace cfanet {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// ---- Var / Tape ------------------------------------------------------------

template <class T>
const Shape& Var<T>::shape() const {
  return tape->shape(id);
}

template <class T>
const std::vector<T>& Var<T>::data() const {
  return tape->value(id);
}

template <class T>
T Var<T>::item() const {
  if (!shape().is_scalar()) {
    throw InvalidArgument("item() on non-scalar " + shape().str());
  }
  return data()[0];
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.shape = value.shape;
  node.value = std::move(value.data);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Tape<T>::constant(Shape shape, T fill) {
  return constant(Tensor<T>(shape, fill));
}

template <class T>
Var<T> Tape<T>::leaf(Tensor<T>& t) {
  Node node;
  node.shape = t.shape;
  node.value = t.data;
  node.needs_grad = t.requires_grad;
  node.bound = &t;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node node;
  node.shape = value.shape;
  node.value = std::move(value.data);
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Tape<T>::record(Shape shape, std::vector<T> value,
                       std::initializer_list<Var<T>> parents, BackwardFn fn) {
  Node node;
  node.shape = shape;
  node.value = std::move(value);
  for (const auto& p : parents) {
    if (p.tape == nullptr) continue;
    if (p.tape != this) throw InvalidArgument("operands live on different tapes");
    node.needs_grad = node.needs_grad || nodes_[p.id].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <class T>
std::vector<T>& Tape<T>::grad_buffer(size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <class T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw InvalidArgument("loss is not on this tape");
  if (!nodes_[loss.id].shape.is_scalar()) {
    throw InvalidArgument("backward() needs a scalar loss, got " +
                          nodes_[loss.id].shape.str());
  }
  for (auto& node : nodes_) {
    node.grad.clear();
  }
  if (!nodes_[loss.id].needs_grad) return;
  grad_buffer(loss.id)[0] = T(1);
  for (size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.needs_grad || node.grad.empty()) continue;
    if (node.backward) node.backward(*this, i);
  }
  for (auto& node : nodes_) {
    if (node.bound == nullptr || !node.bound->requires_grad) continue;
    auto& dst = node.bound->grad;
    if (dst.size() != node.value.size()) dst.assign(node.value.size(), T(0));
    if (node.grad.empty()) continue;
    for (size_t j = 0; j < dst.size(); ++j) dst[j] += node.grad[j];
  }
}

template <class T>
Tensor<T> Tape<T>::tensor(Var<T> v) const {
  return Tensor<T>(nodes_[v.id].shape, nodes_[v.id].value);
}

// ---- helpers ---------------------------------------------------------------

namespace {

template <class T>
bool wants(const Var<T>& v) {
  return v.tape != nullptr && v.tape->needs_grad(v.id);
}

// Broadcast rule for binary ops: equal shapes, or b has a single channel.
void check_binary(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return;
  if (b.c == 1 && a.n == b.n && a.h == b.h && a.w == b.w) return;
  throw InvalidArgument(std::string(op) + ": incompatible shapes " + a.str() +
                        " and " + b.str());
}

// Calls f(i, j) for every element i of `a` and its broadcast partner j in b.
template <class F>
void for_broadcast(const Shape& a, const Shape& b, F&& f) {
  if (a == b) {
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) f(i, i);
    return;
  }
  const size_t plane = a.plane();
  for (int64_t n = 0; n < a.n; ++n) {
    for (int64_t c = 0; c < a.c; ++c) {
      const size_t base_a = static_cast<size_t>(n * a.c + c) * plane;
      const size_t base_b = static_cast<size_t>(n) * plane;
      for (size_t p = 0; p < plane; ++p) f(base_a + p, base_b + p);
    }
  }
}

template <class T>
T sigmoid_scalar(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <class T>
void im2col(const T* img, int64_t channels, int64_t h, int64_t w, int64_t k,
            int64_t dil, int64_t pad, int64_t oh, int64_t ow, T* cols) {
  for (int64_t c = 0; c < channels; ++c) {
    const T* plane = img + c * h * w;
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * oh * ow;
        const int64_t x_off = kx * dil - pad;
        const int64_t ox_lo = std::clamp<int64_t>(-x_off, 0, ow);
        const int64_t ox_hi = std::clamp<int64_t>(w - x_off, 0, ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          T* dst = row + oy * ow;
          const int64_t iy = oy + ky * dil - pad;
          if (iy < 0 || iy >= h || ox_lo >= ox_hi) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          std::fill(dst, dst + ox_lo, T(0));
          std::memcpy(dst + ox_lo, plane + iy * w + ox_lo + x_off,
                      sizeof(T) * static_cast<size_t>(ox_hi - ox_lo));
          std::fill(dst + ox_hi, dst + ow, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, int64_t channels, int64_t h, int64_t w, int64_t k,
                int64_t dil, int64_t pad, int64_t oh, int64_t ow, T* img) {
  for (int64_t c = 0; c < channels; ++c) {
    T* plane = img + c * h * w;
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * oh * ow;
        const int64_t x_off = kx * dil - pad;
        const int64_t ox_lo = std::clamp<int64_t>(-x_off, 0, ow);
        const int64_t ox_hi = std::clamp<int64_t>(w - x_off, 0, ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy + ky * dil - pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * ow;
          T* dst = plane + iy * w;
          for (int64_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox + x_off] += src[ox];
        }
      }
    }
  }
}

// Per-axis interpolation table for half-pixel-center bilinear resampling.
struct AxisTaps {
  std::vector<int64_t> lo, hi;
  std::vector<double> frac;
};

AxisTaps axis_taps(int64_t in, int64_t factor) {
  AxisTaps t;
  const int64_t out = in * factor;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<int64_t>(std::floor(src));
    t.lo[d] = i0;
    t.hi[d] = std::min(i0 + 1, in - 1);
    t.frac[d] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace

// ---- convolution -----------------------------------------------------------

template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, const ConvSpec& spec) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  const int64_t k = spec.kernel;
  if (spec.dilation < 1 || k < 1 || spec.padding < 0) {
    throw InvalidArgument("conv2d: invalid ConvSpec");
  }
  if (ws.n != spec.out_channels || ws.c != is.c || ws.h != k || ws.w != k) {
    throw InvalidArgument("conv2d: weight " + ws.str() + " does not fit input " +
                          is.str() + " and spec");
  }
  if (bias.tape != nullptr && bias.shape().numel() != static_cast<size_t>(ws.n)) {
    throw InvalidArgument("conv2d: bias length mismatch");
  }
  const int64_t oh = is.h + 2 * spec.padding - spec.dilation * (k - 1);
  const int64_t ow = is.w + 2 * spec.padding - spec.dilation * (k - 1);
  if (oh <= 0 || ow <= 0) {
    throw InvalidArgument("conv2d: zero-sized output for input " + is.str());
  }
  const int64_t oc = ws.n;
  const int64_t ckk = is.c * k * k;
  const int64_t ohw = oh * ow;
  const bool direct = (k == 1 && spec.padding == 0);

  const Shape out_shape{is.n, oc, oh, ow};
  std::vector<T> out(out_shape.numel());
  // GEMM operands live in Eigen-owned (aligned) storage: Eigen's vectorized
  // paths pick their summation order from pointer alignment, which would make
  // results vary between runs.
  RowMat<T> cols(ckk, ohw);
  RowMat<T> y(oc, ohw);
  const T* x = input.data().data();
  const RowMat<T> wmat = ConstMatMap<T>(weight.data().data(), oc, ckk);
  for (int64_t n = 0; n < is.n; ++n) {
    const T* img = x + n * is.c * is.h * is.w;
    if (direct) {
      cols = ConstMatMap<T>(img, ckk, ohw);
    } else {
      im2col(img, is.c, is.h, is.w, k, spec.dilation, spec.padding, oh, ow, cols.data());
    }
    y.noalias() = wmat * cols;
    if (bias.tape != nullptr) {
      const auto& b = bias.data();
      for (int64_t o = 0; o < oc; ++o) y.row(o).array() += b[o];
    }
    std::copy(y.data(), y.data() + oc * ohw, out.data() + n * oc * ohw);
  }

  auto fn = [input, weight, bias, spec, is, oc, oh, ow, ckk, ohw, k, direct](
                Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    const bool need_x = wants(input);
    const bool need_w = wants(weight);
    const bool need_b = wants(bias);
    RowMat<T> cols(need_w ? ckk : 0, need_w ? ohw : 0);
    RowMat<T> dcols(need_x ? ckk : 0, need_x ? ohw : 0);
    RowMat<T> gw_n(need_w ? oc : 0, need_w ? ckk : 0);
    RowMat<T> gy(oc, ohw);
    const T* x = input.data().data();
    const RowMat<T> wmat = ConstMatMap<T>(weight.data().data(), oc, ckk);
    for (int64_t n = 0; n < is.n; ++n) {
      const T* g_n = g.data() + n * oc * ohw;
      std::copy(g_n, g_n + oc * ohw, gy.data());
      const T* img = x + n * is.c * is.h * is.w;
      if (need_w) {
        if (direct) {
          cols = ConstMatMap<T>(img, ckk, ohw);
        } else {
          im2col(img, is.c, is.h, is.w, k, spec.dilation, spec.padding, oh, ow, cols.data());
        }
        gw_n.noalias() = gy * cols.transpose();
        T* gw = tape.grad_buffer(weight.id).data();
        for (int64_t i = 0; i < oc * ckk; ++i) gw[i] += gw_n.data()[i];
      }
      if (need_b) {
        auto& gb = tape.grad_buffer(bias.id);
        for (int64_t o = 0; o < oc; ++o) {
          T s = T(0);
          for (int64_t i = 0; i < ohw; ++i) s += g_n[o * ohw + i];
          gb[o] += s;
        }
      }
      if (need_x) {
        T* gx = tape.grad_buffer(input.id).data() + n * is.c * is.h * is.w;
        dcols.noalias() = wmat.transpose() * gy;
        if (direct) {
          for (int64_t i = 0; i < ckk * ohw; ++i) gx[i] += dcols.data()[i];
        } else {
          col2im_add(dcols.data(), is.c, is.h, is.w, k, spec.dilation, spec.padding, oh, ow,
                     gx);
        }
      }
    }
  };
  return input.tape->record(out_shape, std::move(out), {input, weight, bias},
                            std::move(fn));
}

// ---- resampling ------------------------------------------------------------

template <class T>
Var<T> upsample_bilinear(Var<T> input, int64_t factor) {
  const Shape is = input.shape();
  if (is.h < 1 || is.w < 1 || factor < 1) {
    throw InvalidArgument("upsample_bilinear: empty input " + is.str());
  }
  const Shape os{is.n, is.c, is.h * factor, is.w * factor};
  const AxisTaps ty = axis_taps(is.h, factor);
  const AxisTaps tx = axis_taps(is.w, factor);
  std::vector<T> out(os.numel());
  const auto& x = input.data();
  for (int64_t p = 0; p < is.n * is.c; ++p) {
    const T* src = x.data() + p * is.h * is.w;
    T* dst = out.data() + p * os.h * os.w;
    for (int64_t oy = 0; oy < os.h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = src + ty.lo[oy] * is.w;
      const T* r1 = src + ty.hi[oy] * is.w;
      for (int64_t ox = 0; ox < os.w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T top = r0[tx.lo[ox]] + fx * (r0[tx.hi[ox]] - r0[tx.lo[ox]]);
        const T bot = r1[tx.lo[ox]] + fx * (r1[tx.hi[ox]] - r1[tx.lo[ox]]);
        dst[oy * os.w + ox] = top + fy * (bot - top);
      }
    }
  }
  auto fn = [input, is, os, ty, tx](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(input.id);
    for (int64_t p = 0; p < is.n * is.c; ++p) {
      const T* gsrc = g.data() + p * os.h * os.w;
      T* gdst = gx.data() + p * is.h * is.w;
      for (int64_t oy = 0; oy < os.h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        T* r0 = gdst + ty.lo[oy] * is.w;
        T* r1 = gdst + ty.hi[oy] * is.w;
        for (int64_t ox = 0; ox < os.w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T v = gsrc[oy * os.w + ox];
          const T top = v * (T(1) - fy);
          const T bot = v * fy;
          r0[tx.lo[ox]] += top * (T(1) - fx);
          r0[tx.hi[ox]] += top * fx;
          r1[tx.lo[ox]] += bot * (T(1) - fx);
          r1[tx.hi[ox]] += bot * fx;
        }
      }
    }
  };
  return input.tape->record(os, std::move(out), {input}, std::move(fn));
}

template <class T>
Var<T> avgpool2(Var<T> input) {
  const Shape is = input.shape();
  if (is.h < 1 || is.w < 1) {
    throw InvalidArgument("avgpool2: empty input " + is.str());
  }
  const Shape os{is.n, is.c, (is.h + 1) / 2, (is.w + 1) / 2};
  std::vector<T> out(os.numel());
  const auto& x = input.data();
  auto src_row = [is](int64_t r) { return std::min(r, is.h - 1); };
  auto src_col = [is](int64_t c) { return std::min(c, is.w - 1); };
  for (int64_t p = 0; p < is.n * is.c; ++p) {
    const T* src = x.data() + p * is.h * is.w;
    T* dst = out.data() + p * os.h * os.w;
    for (int64_t oy = 0; oy < os.h; ++oy) {
      const T* r0 = src + src_row(2 * oy) * is.w;
      const T* r1 = src + src_row(2 * oy + 1) * is.w;
      for (int64_t ox = 0; ox < os.w; ++ox) {
        const int64_t c0 = src_col(2 * ox);
        const int64_t c1 = src_col(2 * ox + 1);
        dst[oy * os.w + ox] = (r0[c0] + r0[c1] + r1[c0] + r1[c1]) * T(0.25);
      }
    }
  }
  auto fn = [input, is, os, src_row, src_col](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(input.id);
    for (int64_t p = 0; p < is.n * is.c; ++p) {
      const T* gsrc = g.data() + p * os.h * os.w;
      T* gdst = gx.data() + p * is.h * is.w;
      for (int64_t oy = 0; oy < os.h; ++oy) {
        T* r0 = gdst + src_row(2 * oy) * is.w;
        T* r1 = gdst + src_row(2 * oy + 1) * is.w;
        for (int64_t ox = 0; ox < os.w; ++ox) {
          const T v = gsrc[oy * os.w + ox] * T(0.25);
          const int64_t c0 = src_col(2 * ox);
          const int64_t c1 = src_col(2 * ox + 1);
          r0[c0] += v;
          r0[c1] += v;
          r1[c0] += v;
          r1[c1] += v;
        }
      }
    }
  };
  return input.tape->record(os, std::move(out), {input}, std::move(fn));
}

template <class T>
Var<T> separable_filter(Var<T> input, std::span<const T> taps) {
  const Shape is = input.shape();
  const auto n = static_cast<int64_t>(taps.size());
  if (n < 1 || is.h < n || is.w < n) {
    throw InvalidArgument("separable_filter: " + std::to_string(n) + "-tap kernel on " +
                          is.str());
  }
  const int64_t oh = is.h - n + 1;
  const int64_t ow = is.w - n + 1;
  const Shape os{is.n, is.c, oh, ow};
  std::vector<T> k(taps.begin(), taps.end());
  std::vector<T> out(os.numel());
  const auto& x = input.data();
  std::vector<T> rows(static_cast<size_t>(oh * is.w));
  for (int64_t p = 0; p < is.n * is.c; ++p) {
    const T* src = x.data() + p * is.h * is.w;
    T* dst = out.data() + p * oh * ow;
    std::fill(rows.begin(), rows.end(), T(0));
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t t = 0; t < n; ++t) {
        const T* s = src + (y + t) * is.w;
        T* r = rows.data() + y * is.w;
        for (int64_t x0 = 0; x0 < is.w; ++x0) r[x0] += k[t] * s[x0];
      }
    for (int64_t y = 0; y < oh; ++y) {
      const T* r = rows.data() + y * is.w;
      for (int64_t x0 = 0; x0 < ow; ++x0) {
        T acc = T(0);
        for (int64_t t = 0; t < n; ++t) acc += k[t] * r[x0 + t];
        dst[y * ow + x0] = acc;
      }
    }
  }
  auto fn = [input, is, os, k](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(input.id);
    const auto taps = static_cast<int64_t>(k.size());
    std::vector<T> rows(static_cast<size_t>(os.h * is.w));
    for (int64_t p = 0; p < is.n * is.c; ++p) {
      const T* gs = g.data() + p * os.h * os.w;
      T* gd = gx.data() + p * is.h * is.w;
      std::fill(rows.begin(), rows.end(), T(0));
      for (int64_t y = 0; y < os.h; ++y) {
        T* r = rows.data() + y * is.w;
        for (int64_t x0 = 0; x0 < os.w; ++x0) {
          const T v = gs[y * os.w + x0];
          for (int64_t t = 0; t < taps; ++t) r[x0 + t] += k[t] * v;
        }
      }
      for (int64_t y = 0; y < os.h; ++y)
        for (int64_t t = 0; t < taps; ++t) {
          const T* r = rows.data() + y * is.w;
          T* d = gd + (y + t) * is.w;
          for (int64_t x0 = 0; x0 < is.w; ++x0) d[x0] += k[t] * r[x0];
        }
    }
  };
  return input.tape->record(os, std::move(out), {input}, std::move(fn));
}

template <class T>
Var<T> maxpool2(Var<T> input) {
  const Shape is = input.shape();
  if (is.h < 2 || is.w < 2 || is.h % 2 != 0 || is.w % 2 != 0) {
    throw InvalidArgument("maxpool2: needs even spatial size, got " + is.str());
  }
  const Shape os{is.n, is.c, is.h / 2, is.w / 2};
  std::vector<T> out(os.numel());
  std::vector<uint32_t> argmax(os.numel());
  const auto& x = input.data();
  for (int64_t p = 0; p < is.n * is.c; ++p) {
    const size_t base = static_cast<size_t>(p * is.h * is.w);
    for (int64_t oy = 0; oy < os.h; ++oy) {
      for (int64_t ox = 0; ox < os.w; ++ox) {
        size_t best = base + (2 * oy) * is.w + 2 * ox;
        for (int64_t dy = 0; dy < 2; ++dy) {
          for (int64_t dx = 0; dx < 2; ++dx) {
            const size_t i = base + (2 * oy + dy) * is.w + 2 * ox + dx;
            if (x[i] > x[best]) best = i;
          }
        }
        const size_t o = static_cast<size_t>((p * os.h + oy) * os.w + ox);
        out[o] = x[best];
        argmax[o] = static_cast<uint32_t>(best);
      }
    }
  }
  auto fn = [input, argmax = std::move(argmax)](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(input.id);
    for (size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
  };
  return input.tape->record(os, std::move(out), {input}, std::move(fn));
}

// ---- elementwise -----------------------------------------------------------

namespace {

// Unary op with derivative expressed through (input, output).
template <class T, class F, class D>
Var<T> unary(Var<T> a, F f, D dfdx) {
  const auto& x = a.data();
  std::vector<T> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  auto fn = [a, dfdx](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    const auto& xv = a.data();
    const auto& yv = tape.value(self);
    auto& gx = tape.grad_buffer(a.id);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  };
  return a.tape->record(a.shape(), std::move(y), {a}, std::move(fn));
}

}  // namespace

template <class T>
Var<T> relu(Var<T> a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return unary(
      a, [](T x) { return sigmoid_scalar(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> square(Var<T> a) {
  return unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return unary(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary(
      a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

namespace {

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <class T>
Var<T> binary(Var<T> a, Var<T> b, BinOp op, const char* name) {
  if (a.tape != b.tape) throw InvalidArgument(std::string(name) + ": tape mismatch");
  const Shape as = a.shape();
  const Shape bs = b.shape();
  check_binary(as, bs, name);
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<T> out(as.numel());
  switch (op) {
    case BinOp::kAdd:
      for_broadcast(as, bs, [&](size_t i, size_t j) { out[i] = x[i] + y[j]; });
      break;
    case BinOp::kSub:
      for_broadcast(as, bs, [&](size_t i, size_t j) { out[i] = x[i] - y[j]; });
      break;
    case BinOp::kMul:
      for_broadcast(as, bs, [&](size_t i, size_t j) { out[i] = x[i] * y[j]; });
      break;
    case BinOp::kDiv:
      for_broadcast(as, bs, [&](size_t i, size_t j) { out[i] = x[i] / y[j]; });
      break;
  }
  auto fn = [a, b, as, bs, op](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    const auto& xv = a.data();
    const auto& yv = b.data();
    if (wants(a)) {
      auto& ga = tape.grad_buffer(a.id);
      switch (op) {
        case BinOp::kAdd:
        case BinOp::kSub:
          for_broadcast(as, bs, [&](size_t i, size_t) { ga[i] += g[i]; });
          break;
        case BinOp::kMul:
          for_broadcast(as, bs, [&](size_t i, size_t j) { ga[i] += g[i] * yv[j]; });
          break;
        case BinOp::kDiv:
          for_broadcast(as, bs, [&](size_t i, size_t j) { ga[i] += g[i] / yv[j]; });
          break;
      }
    }
    if (wants(b)) {
      auto& gb = tape.grad_buffer(b.id);
      switch (op) {
        case BinOp::kAdd:
          for_broadcast(as, bs, [&](size_t i, size_t j) { gb[j] += g[i]; });
          break;
        case BinOp::kSub:
          for_broadcast(as, bs, [&](size_t i, size_t j) { gb[j] -= g[i]; });
          break;
        case BinOp::kMul:
          for_broadcast(as, bs, [&](size_t i, size_t j) { gb[j] += g[i] * xv[i]; });
          break;
        case BinOp::kDiv:
          for_broadcast(as, bs, [&](size_t i, size_t j) {
            gb[j] -= g[i] * xv[i] / (yv[j] * yv[j]);
          });
          break;
      }
    }
  };
  return a.tape->record(as, std::move(out), {a, b}, std::move(fn));
}

}  // namespace

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, BinOp::kAdd, "add");
}
template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, BinOp::kSub, "sub");
}
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, BinOp::kMul, "mul");
}
template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary(a, b, BinOp::kDiv, "div");
}

// ---- reductions ------------------------------------------------------------

template <class T>
Var<T> sum(Var<T> a) {
  const auto& x = a.data();
  double acc = 0.0;
  for (const T v : x) acc += static_cast<double>(v);
  auto fn = [a](Tape<T>& tape, size_t self) {
    const T g = tape.grad_buffer(self)[0];
    for (auto& v : tape.grad_buffer(a.id)) v += g;
  };
  return a.tape->record(Shape{1, 1, 1, 1}, {static_cast<T>(acc)}, {a},
                        std::move(fn));
}

template <class T>
Var<T> mean(Var<T> a) {
  const size_t n = a.shape().numel();
  if (n == 0) throw InvalidArgument("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

// ---- channel ops -----------------------------------------------------------

template <class T>
Var<T> channel_softmax(Var<T> logits) {
  const Shape s = logits.shape();
  if (s.c < 2) throw InvalidArgument("channel_softmax needs at least 2 channels");
  const size_t plane = s.plane();
  const auto& x = logits.data();
  std::vector<T> y(x.size());
  for (int64_t n = 0; n < s.n; ++n) {
    const size_t base = static_cast<size_t>(n * s.c) * plane;
    for (size_t p = 0; p < plane; ++p) {
      T mx = x[base + p];
      for (int64_t c = 1; c < s.c; ++c) mx = std::max(mx, x[base + c * plane + p]);
      T total = 0;
      for (int64_t c = 0; c < s.c; ++c) {
        const size_t i = base + c * plane + p;
        y[i] = std::exp(x[i] - mx);
        total += y[i];
      }
      for (int64_t c = 0; c < s.c; ++c) y[base + c * plane + p] /= total;
    }
  }
  auto fn = [logits, s, plane](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    const auto& y = tape.value(self);
    auto& gx = tape.grad_buffer(logits.id);
    for (int64_t n = 0; n < s.n; ++n) {
      const size_t base = static_cast<size_t>(n * s.c) * plane;
      for (size_t p = 0; p < plane; ++p) {
        T dot = 0;
        for (int64_t c = 0; c < s.c; ++c) {
          const size_t i = base + c * plane + p;
          dot += g[i] * y[i];
        }
        for (int64_t c = 0; c < s.c; ++c) {
          const size_t i = base + c * plane + p;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  };
  return logits.tape->record(s, std::move(y), {logits}, std::move(fn));
}

template <class T>
Var<T> channel_weighted_sum(Var<T> x, std::span<const T> weights) {
  const Shape s = x.shape();
  if (weights.size() != static_cast<size_t>(s.c)) {
    throw InvalidArgument("channel_weighted_sum: expected " + std::to_string(s.c) +
                          " weights");
  }
  const size_t plane = s.plane();
  const Shape os{s.n, 1, s.h, s.w};
  std::vector<T> w(weights.begin(), weights.end());
  std::vector<T> out(os.numel(), T(0));
  const auto& xv = x.data();
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t c = 0; c < s.c; ++c) {
      const T* src = xv.data() + (n * s.c + c) * plane;
      T* dst = out.data() + n * plane;
      for (size_t p = 0; p < plane; ++p) dst[p] += w[c] * src[p];
    }
  }
  auto fn = [x, s, plane, w](Tape<T>& tape, size_t self) {
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(x.id);
    for (int64_t n = 0; n < s.n; ++n) {
      for (int64_t c = 0; c < s.c; ++c) {
        T* dst = gx.data() + (n * s.c + c) * plane;
        const T* src = g.data() + n * plane;
        for (size_t p = 0; p < plane; ++p) dst[p] += w[c] * src[p];
      }
    }
  };
  return x.tape->record(os, std::move(out), {x}, std::move(fn));
}

// ---- classification losses -------------------------------------------------

template <class T>
Var<T> bce_with_logits(Var<T> logits, const std::vector<uint8_t>& target) {
  const Shape s = logits.shape();
  if (s.c != 1 || target.size() != s.numel()) {
    throw InvalidArgument("bce_with_logits: target does not match logits " +
                          s.str());
  }
  const auto& z = logits.data();
  double acc = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    if (target[i] > 1) throw InvalidArgument("bce_with_logits: non-binary target");
    const double zi = static_cast<double>(z[i]);
    acc += std::max(zi, 0.0) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const T inv_n = T(1) / static_cast<T>(z.size());
  auto fn = [logits, target, inv_n](Tape<T>& tape, size_t self) {
    const T g = tape.grad_buffer(self)[0] * inv_n;
    const auto& zv = logits.data();
    auto& gz = tape.grad_buffer(logits.id);
    for (size_t i = 0; i < zv.size(); ++i) {
      gz[i] += g * (sigmoid_scalar(zv[i]) - static_cast<T>(target[i]));
    }
  };
  return logits.tape->record(Shape{1, 1, 1, 1},
                             {static_cast<T>(acc / static_cast<double>(z.size()))},
                             {logits}, std::move(fn));
}

template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<uint8_t>& classes) {
  const Shape s = logits.shape();
  const size_t plane = s.plane();
  if (classes.size() != static_cast<size_t>(s.n) * plane) {
    throw InvalidArgument("softmax_cross_entropy: class map does not match " +
                          s.str());
  }
  for (const uint8_t c : classes) {
    if (c >= s.c) {
      throw InvalidArgument("softmax_cross_entropy: class " + std::to_string(c) +
                            " out of range for k=" + std::to_string(s.c));
    }
  }
  const auto& z = logits.data();
  std::vector<T> prob(z.size());
  double acc = 0.0;
  for (int64_t n = 0; n < s.n; ++n) {
    const size_t base = static_cast<size_t>(n * s.c) * plane;
    for (size_t p = 0; p < plane; ++p) {
      double mx = z[base + p];
      for (int64_t c = 1; c < s.c; ++c) mx = std::max(mx, double(z[base + c * plane + p]));
      double total = 0.0;
      for (int64_t c = 0; c < s.c; ++c) total += std::exp(z[base + c * plane + p] - mx);
      const double lse = mx + std::log(total);
      for (int64_t c = 0; c < s.c; ++c) {
        const size_t i = base + c * plane + p;
        prob[i] = static_cast<T>(std::exp(z[i] - lse));
      }
      const size_t t = base + classes[n * plane + p] * plane + p;
      acc += lse - z[t];
    }
  }
  const size_t pixels = static_cast<size_t>(s.n) * plane;
  const T inv_n = T(1) / static_cast<T>(pixels);
  auto fn = [logits, classes, s, plane, inv_n, prob = std::move(prob)](
                Tape<T>& tape, size_t self) {
    const T g = tape.grad_buffer(self)[0] * inv_n;
    auto& gz = tape.grad_buffer(logits.id);
    for (size_t i = 0; i < prob.size(); ++i) gz[i] += g * prob[i];
    for (int64_t n = 0; n < s.n; ++n) {
      for (size_t p = 0; p < plane; ++p) {
        gz[(n * s.c + classes[n * plane + p]) * plane + p] -= g;
      }
    }
  };
  return logits.tape->record(Shape{1, 1, 1, 1},
                             {static_cast<T>(acc / static_cast<double>(pixels))},
                             {logits}, std::move(fn));
}

// ---- instantiations --------------------------------------------------------

#define CFANET_INSTANTIATE(T)                                                  \
  template struct Var<T>;                                                      \
  template class Tape<T>;                                                      \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, const ConvSpec&);             \
  template Var<T> upsample_bilinear(Var<T>, int64_t);                          \
  template Var<T> avgpool2(Var<T>);                                            \
  template Var<T> maxpool2(Var<T>);                                            \
  template Var<T> separable_filter(Var<T>, std::span<const T>);                \
  template Var<T> relu(Var<T>);                                                \
  template Var<T> sigmoid(Var<T>);                                             \
  template Var<T> square(Var<T>);                                              \
  template Var<T> scale(Var<T>, T);                                            \
  template Var<T> add_scalar(Var<T>, T);                                       \
  template Var<T> add(Var<T>, Var<T>);                                         \
  template Var<T> sub(Var<T>, Var<T>);                                         \
  template Var<T> mul(Var<T>, Var<T>);                                         \
  template Var<T> div(Var<T>, Var<T>);                                         \
  template Var<T> sum(Var<T>);                                                 \
  template Var<T> mean(Var<T>);                                                \
  template Var<T> channel_softmax(Var<T>);                                     \
  template Var<T> channel_weighted_sum(Var<T>, std::span<const T>);            \
  template Var<T> bce_with_logits(Var<T>, const std::vector<uint8_t>&);        \
  template Var<T> softmax_cross_entropy(Var<T>, const std::vector<uint8_t>&);

CFANET_INSTANTIATE(float)
CFANET_INSTANTIATE(double)

#undef CFANET_INSTANTIATE

}  // namespace cfanet
