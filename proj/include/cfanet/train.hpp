#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfanet/groundtruth.hpp"
#include "cfanet/losses.hpp"
#include "cfanet/model.hpp"
#include "cfanet/synth.hpp"

namespace cfanet {

struct TrainConfig {
  int epochs = 500;
  double lr0 = 2e-5;
  int lr_halving_period = 100;
  double expansion = 50.0;
  double crop_fraction = 0.5;
  double flip_prob = 0.5;
  int batch_size = 1;
  uint64_t seed = 0;
  std::array<bool, 4> supervision{true, true, true, true};
  bool enable_bl = true;
  LossKind loss_kind = LossKind::kBsl;

  void validate() const;
  LossOptions loss_options() const;
};

/// lr0 * 0.5^floor(epoch / lr_halving_period).
double lr_at_epoch(const TrainConfig& config, int epoch);

/// A training image with its per-head sigmas, fixed once on the full image.
struct TrainingSample {
  Tensor<float> image;
  PointAnnotation annotation;
  std::vector<double> sigmas;
};

struct TrainingSet {
  std::vector<TrainingSample> samples;
  std::vector<float> thresholds;  // global density-level cutoffs
  int k = 0;
};

/// Computes sigmas per image and the dataset-wide class thresholds.
TrainingSet prepare_training_set(std::span<const Sample> samples, int k);

struct CropWindow {
  int64_t x0 = 0;
  int64_t y0 = 0;
  int64_t width = 0;
  int64_t height = 0;
  bool flip = false;
};

/// Crop size for an image: crop_fraction of each side, rounded down to a
/// multiple of 8 (at least 8).
std::pair<int64_t, int64_t> crop_size(int64_t height, int64_t width, double crop_fraction);

/// Draws a uniform crop offset and a flip decision.
CropWindow draw_crop(int64_t height, int64_t width, const TrainConfig& config,
                     std::mt19937_64& rng);

/// Cuts the window out of the image, drops heads outside it and mirrors the
/// result horizontally when window.flip is set. Sigmas follow their heads.
TrainingSample apply_crop(const TrainingSample& sample, const CropWindow& window);

TrainingSample augment(const TrainingSample& sample, const TrainConfig& config,
                       std::mt19937_64& rng);

/// Density raster and attention targets regenerated from the sample's heads.
struct SampleTargets {
  DensityMap density;
  LossTargets loss;
};

SampleTargets make_sample_targets(const TrainingSample& sample,
                                  std::span<const float> thresholds, int k);

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  static OptimizerState for_parameters(const Parameters<float>& params);
};

/// Bias-corrected Adam update from each parameter's .grad. Throws
/// NumericalError naming the parameter if a gradient is not finite.
void adam_step(Parameters<float>& params, OptimizerState& state, double lr);

struct EpochReport {
  int epoch = 0;
  double lr = 0.0;
  LossTerms mean;  // per-sample mean of every loss term
  int samples = 0;
};

/// One pass over the shuffled training set: augment, forward, loss, backward,
/// and one Adam step per batch (gradients averaged over the batch).
EpochReport train_epoch(const ModelConfig& model, Parameters<float>& params,
                        const TrainingSet& data, const TrainConfig& config, int epoch,
                        OptimizerState& state, std::mt19937_64& rng);

/// One log line: epoch, lr and the loss terms active under the configuration.
std::string format_report(const EpochReport& r, const ModelConfig& model,
                          const TrainConfig& config);

struct TrainRun {
  Parameters<float> params;
  OptimizerState state;
  std::vector<EpochReport> history;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Initializes from config.seed and trains for config.epochs epochs.
TrainRun train(const ModelConfig& model, const TrainingSet& data, const TrainConfig& config,
               const EpochCallback& on_epoch = {});

// ---- checkpoints ("CFCK") --------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
  uint64_t step = 0;
  // Adam moments, when saved with optimizer state.
  std::optional<OptimizerState> state;
};

std::string model_config_json(const ModelConfig& config);
ModelConfig parse_model_config_json(const std::string& text);

std::vector<uint8_t> encode_checkpoint(const ModelConfig& config,
                                       const Parameters<float>& params,
                                       const OptimizerState* state);
Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const Parameters<float>& params, const OptimizerState* state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cfanet
