#include "cfanet/groundtruth.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "cfanet/tensor.hpp"

namespace cfanet {

void PointAnnotation::validate() const {
  if (width < 0 || height < 0) {
    throw InvalidArgument("image '" + image_id + "' has negative size");
  }
  for (size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.x >= 0.0 && p.x < static_cast<double>(width) && p.y >= 0.0 &&
          p.y < static_cast<double>(height))) {
      throw InvalidArgument("image '" + image_id + "': point " + std::to_string(i) +
                            " (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                            ") lies outside " + std::to_string(width) + "x" +
                            std::to_string(height));
    }
  }
}

double DensityMap::count() const {
  double total = 0.0;
  for (const float v : raster) total += v;
  return total;
}

std::vector<double> adaptive_sigmas(std::span<const Point> points, int64_t width,
                                    int64_t height) {
  const double cap =
      std::max(kMinSigma, 0.25 * static_cast<double>(std::min(width, height)));
  auto clamp = [cap](double s) { return std::clamp(s, kMinSigma, cap); };
  std::vector<double> sigmas(points.size(), clamp(kFallbackSigma));
  if (points.size() < 4) return sigmas;

  std::vector<double> dist;
  dist.reserve(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    dist.clear();
    for (size_t j = 0; j < points.size(); ++j) {
      if (j == i) continue;
      const double dx = points[j].x - points[i].x;
      const double dy = points[j].y - points[i].y;
      dist.push_back(std::sqrt(dx * dx + dy * dy));
    }
    std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
    sigmas[i] = clamp((dist[0] + dist[1] + dist[2]) / 3.0);
  }
  return sigmas;
}

DensityMap render_density(const PointAnnotation& annotation,
                          std::span<const double> sigmas) {
  if (sigmas.size() != annotation.points.size()) {
    throw InvalidArgument("render_density: " + std::to_string(sigmas.size()) +
                          " sigmas for " + std::to_string(annotation.points.size()) +
                          " points");
  }
  const int64_t h = annotation.height;
  const int64_t w = annotation.width;
  std::vector<double> acc(static_cast<size_t>(h * w), 0.0);
  std::vector<double> kernel;
  for (size_t i = 0; i < annotation.points.size(); ++i) {
    const Point p = annotation.points[i];
    const double sigma = sigmas[i];
    const double reach = kKernelTruncation * sigma;
    // Pixel (x, y) has its center at (x + 0.5, y + 0.5).
    const auto x0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(p.x - reach - 0.5)));
    const auto x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::floor(p.x + reach - 0.5)));
    const auto y0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(p.y - reach - 0.5)));
    const auto y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::floor(p.y + reach - 0.5)));
    const int64_t kw = x1 - x0 + 1;
    const int64_t kh = y1 - y0 + 1;
    if (kw <= 0 || kh <= 0) continue;
    kernel.assign(static_cast<size_t>(kw * kh), 0.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    double total = 0.0;
    for (int64_t y = y0; y <= y1; ++y) {
      const double dy = static_cast<double>(y) + 0.5 - p.y;
      for (int64_t x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - p.x;
        const double v = std::exp(-(dx * dx + dy * dy) * inv);
        kernel[(y - y0) * kw + (x - x0)] = v;
        total += v;
      }
    }
    for (int64_t y = y0; y <= y1; ++y) {
      for (int64_t x = x0; x <= x1; ++x) {
        acc[y * w + x] += kernel[(y - y0) * kw + (x - x0)] / total;
      }
    }
  }
  DensityMap dm;
  dm.height = h;
  dm.width = w;
  dm.raster.assign(acc.begin(), acc.end());
  return dm;
}

std::vector<uint8_t> make_cam(const DensityMap& dm) {
  std::vector<uint8_t> mask(dm.raster.size());
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = dm.raster[i] >= kCrowdThreshold ? 1 : 0;
  }
  return mask;
}

std::vector<float> compute_class_thresholds(std::span<const DensityMap> dataset,
                                            int k) {
  if (k < 2) throw InvalidArgument("class count k must be at least 2");
  if (dataset.empty()) throw InvalidArgument("no density maps to take statistics from");
  std::vector<float> crowd;
  for (const auto& dm : dataset) {
    for (const float v : dm.raster) {
      if (v >= kCrowdThreshold) crowd.push_back(v);
    }
  }
  if (crowd.empty()) throw InvalidArgument("empty crowd support");
  std::sort(crowd.begin(), crowd.end());
  const size_t levels = static_cast<size_t>(k - 1);
  std::vector<float> cutoffs(levels);
  for (size_t c = 0; c < levels; ++c) {
    cutoffs[c] = crowd[c * crowd.size() / levels];
  }
  std::sort(cutoffs.begin(), cutoffs.end(), std::greater<>());
  return cutoffs;
}

std::vector<uint8_t> make_fam(const DensityMap& dm, std::span<const float> thresholds,
                              int k) {
  if (k < 2 || thresholds.size() != static_cast<size_t>(k - 1)) {
    throw InvalidArgument("make_fam: need k-1 thresholds");
  }
  // Ascending copy so the class is an upper_bound position.
  std::vector<float> asc(thresholds.rbegin(), thresholds.rend());
  if (!std::is_sorted(asc.begin(), asc.end())) {
    throw InvalidArgument("make_fam: thresholds must be descending");
  }
  std::vector<uint8_t> fam(dm.raster.size(), 0);
  for (size_t i = 0; i < fam.size(); ++i) {
    const float v = dm.raster[i];
    if (v < kCrowdThreshold) continue;
    const auto at_or_below =
        static_cast<int>(std::upper_bound(asc.begin(), asc.end(), v) - asc.begin());
    fam[i] = static_cast<uint8_t>(std::clamp(at_or_below, 1, k - 1));
  }
  return fam;
}

AttentionTargets make_targets(const DensityMap& dm, std::span<const float> thresholds,
                              int k) {
  AttentionTargets t;
  t.cam = make_cam(dm);
  t.fam = make_fam(dm, thresholds, k);
  t.k = k;
  t.thresholds.assign(thresholds.begin(), thresholds.end());
  return t;
}

}  // namespace cfanet
