#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfanet/autograd.hpp"

namespace cfanet {

/// Which attention branches feed the density decoder.
enum class Branches { kBaseline, kCrr, kDle, kCrrDle };

enum class InitScheme {
  kGaussian,  // N(0, init_std^2) everywhere
  // N(0, 2 / fan_in) for hidden layers; density heads start at zero weights
  // and a small positive bias. Used for from-scratch desk-scale runs.
  kHe,
};

inline constexpr double kDensityHeadBias = 0.01;

/// True for the four layers whose output is rectified into a density map.
bool is_density_head(const std::string& layer_name);

std::string to_string(Branches b);
Branches parse_branches(const std::string& s);
std::string to_string(InitScheme s);
InitScheme parse_init(const std::string& s);

struct ModelConfig {
  int k = 6;
  double width_mult = 1.0;
  int input_channels = 3;
  int dilation = 2;
  double init_std = 0.01;
  InitScheme init = InitScheme::kGaussian;
  Branches branches = Branches::kCrrDle;

  void validate() const;
  /// Channel count for a full-width layer of `base` channels.
  int64_t channels(int64_t base) const;
  bool has_crr() const {
    return branches == Branches::kCrr || branches == Branches::kCrrDle;
  }
  bool has_dle() const {
    return branches == Branches::kDle || branches == Branches::kCrrDle;
  }
};

struct LayerSpec {
  std::string name;
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kernel = 3;
  int64_t dilation = 1;

  ConvSpec conv() const { return ConvSpec::same(out_channels, kernel, dilation); }
};

/// Every convolution of the network in a fixed order. Each layer owns a
/// "<name>.weight" and a "<name>.bias" parameter, in that order.
std::vector<LayerSpec> layer_specs(const ModelConfig& config);

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Named parameter set in manifest order (layer order, weight before bias).
template <class T>
struct Parameters {
  std::vector<NamedTensor<T>> entries;

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  size_t size() const { return entries.size(); }
  size_t scalar_count() const;
  void zero_grad();

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& e : entries) out.entries.push_back({e.name, e.value.template cast<U>()});
    return out;
  }
};

/// Gaussian weights, zero biases; deterministic for a fixed seed.
template <class T>
Parameters<T> build_parameters(const ModelConfig& config, uint64_t seed);

/// Per-class attention weights: 0 for background, c / (k - 1) otherwise.
template <class T>
std::vector<T> attention_class_weights(int k);

/// A = sum_c softmax(fam)_c * w(c) + sigmoid(cam). Either input may be
/// absent (tape == nullptr) for single-branch ablations.
template <class T>
Var<T> refine_attention(Var<T> fam_logits, Var<T> cam_logits, int k);

/// fm + attention * fm, attention broadcast over channels.
template <class T>
Var<T> fuse(Var<T> fm, Var<T> attention);

struct ForwardOptions {
  // Diagnostic hook: replaces every attention map by zeros.
  bool zero_attention = false;
};

template <class T>
struct ModelOutputs {
  // Present only when the corresponding branch is enabled.
  std::array<Var<T>, 4> cam_logits;
  std::array<Var<T>, 4> fam_logits;
  std::array<Var<T>, 4> density;
  // Stage-resolution attention maps and gated density features.
  std::array<Var<T>, 4> attention;
  std::array<Var<T>, 4> dme_features;
  std::array<Var<T>, 4> fused_features;
  bool has_cam = false;
  bool has_fam = false;

  Var<T> final_density() const { return density[3]; }
};

/// Runs the network with parameters already on the tape, in manifest order.
template <class T>
ModelOutputs<T> forward(const ModelConfig& config, std::span<const Var<T>> params,
                        Var<T> image, const ForwardOptions& options = {});

/// Binds `params` as tape leaves and runs the network.
template <class T>
ModelOutputs<T> forward(const ModelConfig& config, Parameters<T>& params,
                        Var<T> image, const ForwardOptions& options = {});

}  // namespace cfanet
