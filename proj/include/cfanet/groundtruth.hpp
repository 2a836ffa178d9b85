#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cfanet {

/// Density at or above this value marks a crowd pixel.
inline constexpr float kCrowdThreshold = 1e-5f;
/// Sigma used when an image has fewer than four heads.
inline constexpr double kFallbackSigma = 15.0;
inline constexpr double kMinSigma = 1.0;
/// Gaussian kernels are cut off at this many sigmas from the head.
inline constexpr double kKernelTruncation = 4.0;

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct PointAnnotation {
  std::string image_id;
  int64_t width = 0;
  int64_t height = 0;
  std::vector<Point> points;

  /// Throws InvalidArgument naming the image if a point is out of bounds.
  void validate() const;
};

struct DensityMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> raster;  // row-major, people per pixel

  double count() const;
};

struct AttentionTargets {
  std::vector<uint8_t> cam;  // 1 where density >= kCrowdThreshold
  std::vector<uint8_t> fam;  // class index in [0, k)
  int k = 0;
  std::vector<float> thresholds;  // k-1 cutoffs, descending
};

/// Per-head sigma: mean distance to the 3 nearest other heads, clamped to
/// [1, 0.25 * min(width, height)]. Fewer than four heads use kFallbackSigma.
std::vector<double> adaptive_sigmas(std::span<const Point> points, int64_t width,
                                    int64_t height);

/// Sum of truncated isotropic Gaussians, each renormalized over its in-bounds
/// pixels so that every head contributes exactly one person.
DensityMap render_density(const PointAnnotation& annotation,
                          std::span<const double> sigmas);

std::vector<uint8_t> make_cam(const DensityMap& dm);

/// Global density-level cutoffs: the k-1 lower class boundaries that split
/// all crowd pixels of the training split into equal-count groups.
std::vector<float> compute_class_thresholds(std::span<const DensityMap> dataset,
                                            int k);

/// Class 0 below kCrowdThreshold, otherwise the number of cutoffs <= value,
/// clamped to [1, k-1]. A value equal to a cutoff joins the denser class.
std::vector<uint8_t> make_fam(const DensityMap& dm, std::span<const float> thresholds,
                              int k);

AttentionTargets make_targets(const DensityMap& dm, std::span<const float> thresholds,
                              int k);

}  // namespace cfanet
