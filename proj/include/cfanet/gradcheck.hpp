#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cfanet/autograd.hpp"

namespace cfanet {

using GraphBuilder =
    std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradcheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so entries whose true gradient
  // is ~0 are judged on absolute error instead.
  double floor = 1e-6;
  // Entries probed per input; 0 probes every entry.
  size_t max_entries = 0;
  uint64_t seed = 0;
  // When > 0, entries whose central differences at step and step/2 disagree
  // by more than this (relative) straddle a relu/max kink; they are skipped
  // and counted. Too many skips fail the check.
  double kink_gap = 0.0;
  double max_skipped_fraction = 0.1;
};

struct GradcheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool passed = false;
  size_t probed = 0;
  size_t skipped = 0;
  // "input <i> entry <j>" of the worst entry, or of the first non-finite value.
  std::string location;
  std::string failure;
};

/// Compares reverse-mode gradients of a scalar graph against central finite
/// differences. `build` must be deterministic; it is re-run twice per probed
/// entry.
GradcheckReport gradcheck(const std::string& name, const GraphBuilder& build,
                          std::vector<Tensor<double>> inputs, double tol,
                          const GradcheckOptions& options = {});

struct GradcheckCase {
  std::string name;
  GraphBuilder build;
  std::vector<Tensor<double>> inputs;
  GradcheckOptions options;
};

/// One case per differentiable op plus the whole BSL objective of a 16x16
/// tiny model. Inputs are random, drawn from `seed`.
std::vector<GradcheckCase> registered_gradchecks(uint64_t seed);

std::vector<GradcheckReport> run_gradchecks(const std::vector<GradcheckCase>& cases, double tol);

}  // namespace cfanet
