#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cfanet/metrics.hpp"
#include "cfanet/train.hpp"

namespace cfanet {

enum class AblationAxis { kBranches, kSupervision, kK, kLoss, kBl };

std::string to_string(AblationAxis a);
AblationAxis parse_axis(const std::string& s);

struct Arm {
  std::string label;
  ModelConfig model;
  TrainConfig train;
};

/// Configurations compared along one axis, derived from a base configuration:
///   branches:    baseline, +CRR, +DLE, +CRR+DLE
///   supervision: {4}, {3-4}, {2-4}, {1-4}
///   k:           4, 6, 8, 10
///   loss:        mse, ssim_only, sl_only, bsl
///   bl:          BL off, BL on
std::vector<Arm> ablation_arms(AblationAxis axis, const ModelConfig& model,
                               const TrainConfig& train);

struct SeedRun {
  uint64_t seed = 0;
  double final_loss = 0.0;
  EvalSummary train_eval;    // on the full training images
  EvalSummary heldout_eval;  // n_images == 0 without a held-out set
  double seconds = 0.0;
};

struct ArmResult {
  std::string label;
  std::vector<SeedRun> runs;  // in seed order

  double mean_train_mae() const;
  double mean_heldout_mae() const;
  double mean_heldout_bg_ratio() const;
  double mean_heldout_ssim() const;
};

struct AblationResult {
  std::string axis;
  std::vector<ArmResult> arms;
};

using RunCallback = std::function<void(const Arm&, const SeedRun&)>;

/// Trains every arm once per seed (model init and training rng both from the
/// seed, so arms are paired) and evaluates each run. Jobs are spread over
/// `threads` workers; results do not depend on the thread count.
AblationResult run_ablation(const std::string& axis, const std::vector<Arm>& arms,
                            std::span<const Sample> train_set, std::span<const Sample> heldout,
                            std::span<const uint64_t> seeds, int threads,
                            const RunCallback& on_run = {});

std::string to_json(const AblationResult& r);
/// Aligned plain-text table, one row per arm.
std::string to_table(const AblationResult& r);

/// Worker count: CFANET_THREADS if set and positive, else the hardware count.
int default_threads();

}  // namespace cfanet
