#include "cfanet/losses.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>

namespace cfanet {

namespace {

std::vector<double> gaussian_taps(const SsimConstants& consts) {
  const int64_t n = consts.window;
  std::vector<double> g(static_cast<size_t>(n));
  const double center = static_cast<double>(n - 1) / 2.0;
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - center;
    g[i] = std::exp(-d * d / (2.0 * consts.sigma * consts.sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

}  // namespace

template <class T>
Tensor<T> ssim_window(const SsimConstants& consts) {
  const int64_t n = consts.window;
  const std::vector<double> g = gaussian_taps(consts);
  Tensor<T> w(Shape{1, 1, n, n});
  for (int64_t y = 0; y < n; ++y) {
    for (int64_t x = 0; x < n; ++x) w.at(0, 0, y, x) = static_cast<T>(g[y] * g[x]);
  }
  return w;
}

template <class T>
Var<T> ssim(Var<T> x, Var<T> y, const SsimConstants& consts) {
  const Shape s = x.shape();
  if (!(s == y.shape())) {
    throw InvalidArgument("ssim: shape mismatch " + s.str() + " vs " + y.shape().str());
  }
  if (s.c != 1) throw InvalidArgument("ssim: expects single-channel maps");
  if (s.h < consts.window || s.w < consts.window) {
    throw InvalidArgument("ssim: map " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                          " is smaller than the " + std::to_string(consts.window) +
                          "x" + std::to_string(consts.window) + " window");
  }
  std::vector<T> taps;
  for (const double g : gaussian_taps(consts)) taps.push_back(static_cast<T>(g));
  auto filt = [&](Var<T> v) { return separable_filter<T>(v, taps); };
  const T c1 = static_cast<T>(consts.c1);
  const T c2 = static_cast<T>(consts.c2);

  const Var<T> mu_x = filt(x);
  const Var<T> mu_y = filt(y);
  const Var<T> mu_xx = square(mu_x);
  const Var<T> mu_yy = square(mu_y);
  const Var<T> mu_xy = mul(mu_x, mu_y);
  const Var<T> var_x = sub(filt(square(x)), mu_xx);
  const Var<T> var_y = sub(filt(square(y)), mu_yy);
  const Var<T> cov = sub(filt(mul(x, y)), mu_xy);

  const Var<T> num = mul(add_scalar(scale(mu_xy, T(2)), c1), add_scalar(scale(cov, T(2)), c2));
  const Var<T> den =
      mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(var_x, var_y), c2));
  return mean(div(num, den));
}

int valid_ssim_scales(int64_t h, int64_t w, const SsimConstants& consts) {
  int valid = 0;
  for (int j = 0; j < consts.scales; ++j) {
    if (h < consts.window || w < consts.window) break;
    ++valid;
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  return valid;
}

namespace {

std::atomic<bool> g_scale_warning_issued{false};

}  // namespace

template <class T>
Var<T> structural_loss(Var<T> est, Var<T> gt, const SsimConstants& consts) {
  const Shape s = est.shape();
  const int valid = valid_ssim_scales(s.h, s.w, consts);
  if (valid == 0) return ssim_loss(est, gt, consts);  // throws: too small
  if (valid < consts.scales && !g_scale_warning_issued.exchange(true)) {
    std::cerr << "warning: structural loss on " << s.h << "x" << s.w << " maps uses "
              << valid << " of " << consts.scales << " scales\n";
  }
  Var<T> a = est;
  Var<T> b = gt;
  Var<T> total{};
  for (int j = 0; j < valid; ++j) {
    if (j > 0) {
      a = avgpool2(a);
      b = avgpool2(b);
    }
    const Var<T> term = ssim(a, b, consts);
    total = total.tape == nullptr ? term : add(total, term);
  }
  // (1/K) * sum (1 - ssim_j) = 1 - mean_j ssim_j
  return add_scalar(scale(total, T(-1) / static_cast<T>(valid)), T(1));
}

template <class T>
Var<T> background_loss(Var<T> est, const std::vector<uint8_t>& bg_mask) {
  const Shape s = est.shape();
  if (bg_mask.size() != s.numel()) {
    throw InvalidArgument("background_loss: mask size does not match " + s.str());
  }
  Tape<T>& tape = *est.tape;
  double mass = 0.0;
  for (const T v : est.data()) mass += static_cast<double>(v);
  if (mass < 1e-8) return tape.constant(Shape{1, 1, 1, 1}, T(0));
  Tensor<T> mask(s);
  for (size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = bg_mask[i] ? T(1) : T(0);
  const Var<T> bg = sum(mul(est, tape.constant(std::move(mask))));
  return div(bg, sum(est));
}

template <class T>
Var<T> mse_loss(Var<T> est, Var<T> gt) {
  if (!(est.shape() == gt.shape())) {
    throw InvalidArgument("mse_loss: shape mismatch");
  }
  return mean(square(sub(est, gt)));
}

template <class T>
Var<T> ssim_loss(Var<T> est, Var<T> gt, const SsimConstants& consts) {
  return add_scalar(scale(ssim(est, gt, consts), T(-1)), T(1));
}

LossWeights weight_schedule(int epoch, int total_epochs) {
  if (total_epochs <= 0 || epoch < 0 || epoch >= total_epochs) {
    throw InvalidArgument("weight_schedule: epoch " + std::to_string(epoch) +
                          " outside [0, " + std::to_string(total_epochs) + ")");
  }
  const double progress =
      std::min(1.0, static_cast<double>(epoch) / (0.6 * static_cast<double>(total_epochs)));
  LossWeights w;
  w.lambda = 1.0 - 0.9 * progress;
  w.mu = w.lambda;
  w.epoch = epoch;
  return w;
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kBsl: return "bsl";
    case LossKind::kSlOnly: return "sl_only";
    case LossKind::kMse: return "mse";
    case LossKind::kSsimOnly: return "ssim_only";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "bsl") return LossKind::kBsl;
  if (s == "sl_only") return LossKind::kSlOnly;
  if (s == "mse") return LossKind::kMse;
  if (s == "ssim_only") return LossKind::kSsimOnly;
  throw InvalidArgument("unknown loss kind '" + s +
                        "' (expected bsl, sl_only, mse or ssim_only)");
}

LossTerms& LossTerms::operator+=(const LossTerms& o) {
  sl += o.sl;
  bl += o.bl;
  mse += o.mse;
  ssim += o.ssim;
  cam += o.cam;
  fam += o.fam;
  total += o.total;
  return *this;
}

LossTerms LossTerms::scaled(double s) const {
  LossTerms t = *this;
  t.sl *= s;
  t.bl *= s;
  t.mse *= s;
  t.ssim *= s;
  t.cam *= s;
  t.fam *= s;
  t.total *= s;
  return t;
}

template <class T>
LossResult<T> total_loss(const ModelOutputs<T>& outputs, Var<T> density_target,
                         const LossTargets& targets, const LossWeights& weights,
                         const LossOptions& options) {
  if (std::none_of(options.supervision.begin(), options.supervision.end(),
                   [](bool b) { return b; })) {
    throw InvalidArgument("total_loss: no supervision stage enabled");
  }
  LossResult<T> result;
  Var<T> total{};
  auto accumulate = [&](Var<T> term, double weight) {
    if (weight == 0.0) return;
    const Var<T> w = weight == 1.0 ? term : scale(term, static_cast<T>(weight));
    total = total.tape == nullptr ? w : add(total, w);
  };

  for (int s = 0; s < 4; ++s) {
    if (!options.supervision[s]) continue;
    const Var<T> est = outputs.density[s];
    Var<T> density_term{};
    switch (options.kind) {
      case LossKind::kBsl:
      case LossKind::kSlOnly: {
        density_term = structural_loss(est, density_target, options.consts);
        result.terms.sl += density_term.item();
        if (options.kind == LossKind::kBsl && options.enable_bl) {
          const Var<T> bl = background_loss(est, targets.bg_mask);
          result.terms.bl += bl.item();
          density_term = add(density_term, bl);
        }
        break;
      }
      case LossKind::kMse:
        density_term = mse_loss(est, density_target);
        result.terms.mse += density_term.item();
        break;
      case LossKind::kSsimOnly:
        density_term = ssim_loss(est, density_target, options.consts);
        result.terms.ssim += density_term.item();
        break;
    }
    accumulate(density_term, weights.w_density);

    if (outputs.has_cam) {
      const Var<T> ce = cam_cross_entropy(outputs.cam_logits[s], targets.cam);
      result.terms.cam += ce.item();
      accumulate(ce, weights.lambda);
    }
    if (outputs.has_fam) {
      const Var<T> ce = fam_cross_entropy(outputs.fam_logits[s], targets.fam);
      result.terms.fam += ce.item();
      accumulate(ce, weights.mu);
    }
  }
  if (total.tape == nullptr) {
    total = density_target.tape->constant(Shape{1, 1, 1, 1}, T(0));
  }
  result.total = total;
  result.terms.total = total.item();
  return result;
}

#define CFANET_INSTANTIATE(T)                                                       \
  template Tensor<T> ssim_window<T>(const SsimConstants&);                          \
  template Var<T> ssim(Var<T>, Var<T>, const SsimConstants&);                       \
  template Var<T> structural_loss(Var<T>, Var<T>, const SsimConstants&);            \
  template Var<T> background_loss(Var<T>, const std::vector<uint8_t>&);             \
  template Var<T> mse_loss(Var<T>, Var<T>);                                         \
  template Var<T> ssim_loss(Var<T>, Var<T>, const SsimConstants&);                  \
  template LossResult<T> total_loss(const ModelOutputs<T>&, Var<T>, const LossTargets&, \
                                    const LossWeights&, const LossOptions&);

CFANET_INSTANTIATE(float)
CFANET_INSTANTIATE(double)

#undef CFANET_INSTANTIATE

}  // namespace cfanet
