#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cfanet/groundtruth.hpp"
#include "cfanet/model.hpp"
#include "cfanet/synth.hpp"

namespace cfanet {

/// PSNR reported for identical maps.
inline constexpr double kPsnrCap = 99.0;

struct EvalRecord {
  std::string image_id;
  double count_est = 0.0;
  double count_gt = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;  // NaN when the groundtruth map is empty
  double bg_mass = 0.0;
  double total_mass = 0.0;

  double bg_ratio() const;
};

double mae(std::span<const EvalRecord> records);
double rmse(std::span<const EvalRecord> records);

/// Both maps scaled by max(gt); -10 log10(MSE). Identical maps give kPsnrCap.
/// Throws NumericalError when gt has no positive value.
double psnr(std::span<const float> est, std::span<const float> gt);

/// Predicted mass on background pixels over total predicted mass; 0 when the
/// total is below 1e-8.
double bg_ratio(std::span<const float> est, std::span<const uint8_t> bg_mask);

/// Full-resolution SSIM of two maps, 11x11 Gaussian window, double precision.
double map_ssim(const DensityMap& est, const DensityMap& gt);

struct EvalSummary {
  double mae = 0.0;
  double rmse = 0.0;
  double mean_ssim = 0.0;
  double mean_psnr = 0.0;  // over images with a defined PSNR
  double mean_bg_ratio = 0.0;
  int n_images = 0;
};

EvalSummary summarize(std::span<const EvalRecord> records);

/// Maps an image whose sides are multiples of 8 to a predicted density raster
/// of the same size, still multiplied by the expansion factor.
using Predictor = std::function<DensityMap(const Tensor<float>& image)>;

/// Mirror-pads the bottom and right edges up to the next multiple of `multiple`.
Tensor<float> reflect_pad(const Tensor<float>& image, int64_t multiple);

struct Evaluation {
  std::vector<EvalRecord> records;
  EvalSummary summary;
};

/// Runs `predict` on every full image (no augmentation), divides by
/// `expansion`, and scores against the adaptive-kernel groundtruth.
Evaluation evaluate(const Predictor& predict, std::span<const Sample> samples,
                    double expansion);

/// Predictor backed by the network's final density head.
Predictor model_predictor(const ModelConfig& config, const Parameters<float>& params);

std::string to_json(const EvalSummary& s);
std::string to_json_line(const EvalRecord& r);

}  // namespace cfanet
