#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cfanet/autograd.hpp"
#include "cfanet/model.hpp"

namespace cfanet {

struct SsimConstants {
  double c1 = 0.01;
  double c2 = 0.03;
  int64_t window = 11;
  double sigma = 1.5;
  int scales = 3;
};

/// Normalized (1, 1, window, window) Gaussian filter.
template <class T>
Tensor<T> ssim_window(const SsimConstants& consts);

/// Mean SSIM index over the valid (unpadded) region of two single-channel
/// maps, with local statistics from the Gaussian window.
template <class T>
Var<T> ssim(Var<T> x, Var<T> y, const SsimConstants& consts = {});

/// Number of pyramid levels whose size still fits the SSIM window.
int valid_ssim_scales(int64_t h, int64_t w, const SsimConstants& consts);

/// Mean of (1 - SSIM) over an average-pooled pyramid. Levels smaller than
/// the window are dropped (with a one-time warning) and the mean is taken
/// over the remaining levels.
template <class T>
Var<T> structural_loss(Var<T> est, Var<T> gt, const SsimConstants& consts = {});

/// Share of the predicted mass that falls on background pixels (mask == 1).
/// Returns a constant 0 when the predicted mass is below 1e-8.
template <class T>
Var<T> background_loss(Var<T> est, const std::vector<uint8_t>& bg_mask);

template <class T>
Var<T> cam_cross_entropy(Var<T> cam_logits, const std::vector<uint8_t>& cam_target) {
  return bce_with_logits(cam_logits, cam_target);
}

template <class T>
Var<T> fam_cross_entropy(Var<T> fam_logits, const std::vector<uint8_t>& fam_target) {
  return softmax_cross_entropy(fam_logits, fam_target);
}

template <class T>
Var<T> mse_loss(Var<T> est, Var<T> gt);

/// 1 - SSIM at full resolution.
template <class T>
Var<T> ssim_loss(Var<T> est, Var<T> gt, const SsimConstants& consts = {});

struct LossWeights {
  double w_density = 1.0;
  double lambda = 1.0;
  double mu = 1.0;
  int epoch = 0;
};

/// Classification weights start at 1 and fall linearly to 0.1 at 60% of
/// training, then stay there.
LossWeights weight_schedule(int epoch, int total_epochs);

enum class LossKind { kBsl, kSlOnly, kMse, kSsimOnly };

std::string to_string(LossKind k);
LossKind parse_loss_kind(const std::string& s);

struct LossOptions {
  LossKind kind = LossKind::kBsl;
  bool enable_bl = true;
  std::array<bool, 4> supervision{true, true, true, true};
  SsimConstants consts;
};

/// Full-resolution training targets for one batch.
struct LossTargets {
  std::vector<uint8_t> cam;      // 1 = crowd
  std::vector<uint8_t> bg_mask;  // 1 = background (complement of cam)
  std::vector<uint8_t> fam;
};

struct LossTerms {
  double sl = 0.0;
  double bl = 0.0;
  double mse = 0.0;
  double ssim = 0.0;  // 1 - SSIM term of the ssim_only kind
  double cam = 0.0;
  double fam = 0.0;
  double total = 0.0;

  LossTerms& operator+=(const LossTerms& o);
  LossTerms scaled(double s) const;
};

template <class T>
struct LossResult {
  Var<T> total;
  LossTerms terms;
};

/// Sum over enabled supervision stages of
///   w_density * density_term + lambda * CE_cam + mu * CE_fam,
/// where density_term is SL + BL for BSL (BL only if enabled), SL, MSE or
/// 1 - SSIM. `density_target` is already multiplied by the expansion factor.
template <class T>
LossResult<T> total_loss(const ModelOutputs<T>& outputs, Var<T> density_target,
                         const LossTargets& targets, const LossWeights& weights,
                         const LossOptions& options);

}  // namespace cfanet
