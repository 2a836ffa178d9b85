#include "cfanet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>

#include "cfanet/losses.hpp"

namespace cfanet {

double EvalRecord::bg_ratio() const {
  return total_mass < 1e-8 ? 0.0 : bg_mass / total_mass;
}

namespace {

void require_records(std::span<const EvalRecord> records, const char* what) {
  if (records.empty()) throw InvalidArgument(std::string(what) + ": empty record set");
}

}  // namespace

double mae(std::span<const EvalRecord> records) {
  require_records(records, "mae");
  double s = 0.0;
  for (const auto& r : records) s += std::abs(r.count_est - r.count_gt);
  return s / static_cast<double>(records.size());
}

double rmse(std::span<const EvalRecord> records) {
  require_records(records, "rmse");
  double s = 0.0;
  for (const auto& r : records) {
    const double e = r.count_est - r.count_gt;
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(records.size()));
}

double psnr(std::span<const float> est, std::span<const float> gt) {
  if (est.size() != gt.size()) throw InvalidArgument("psnr: size mismatch");
  double peak = 0.0;
  for (const float v : gt) peak = std::max(peak, static_cast<double>(v));
  if (!(peak > 0.0)) throw NumericalError("psnr: groundtruth map is all zero");
  double se = 0.0;
  for (size_t i = 0; i < gt.size(); ++i) {
    const double d = (static_cast<double>(est[i]) - static_cast<double>(gt[i])) / peak;
    se += d * d;
  }
  const double mse = se / static_cast<double>(gt.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double bg_ratio(std::span<const float> est, std::span<const uint8_t> bg_mask) {
  if (est.size() != bg_mask.size()) throw InvalidArgument("bg_ratio: size mismatch");
  double bg = 0.0;
  double total = 0.0;
  for (size_t i = 0; i < est.size(); ++i) {
    total += est[i];
    if (bg_mask[i]) bg += est[i];
  }
  return total < 1e-8 ? 0.0 : bg / total;
}

double map_ssim(const DensityMap& est, const DensityMap& gt) {
  if (est.height != gt.height || est.width != gt.width) {
    throw InvalidArgument("map_ssim: size mismatch");
  }
  const Shape s{1, 1, gt.height, gt.width};
  auto to_tensor = [&](const DensityMap& m) {
    Tensor<double> t(s);
    std::copy(m.raster.begin(), m.raster.end(), t.data.begin());
    return t;
  };
  Tape<double> tape;
  return ssim(tape.constant(to_tensor(est)), tape.constant(to_tensor(gt))).item();
}

EvalSummary summarize(std::span<const EvalRecord> records) {
  EvalSummary s;
  s.n_images = static_cast<int>(records.size());
  if (records.empty()) return s;
  s.mae = mae(records);
  s.rmse = rmse(records);
  int n_psnr = 0;
  for (const auto& r : records) {
    s.mean_ssim += r.ssim;
    s.mean_bg_ratio += r.bg_ratio();
    if (std::isfinite(r.psnr)) {
      s.mean_psnr += r.psnr;
      ++n_psnr;
    }
  }
  const auto n = static_cast<double>(records.size());
  s.mean_ssim /= n;
  s.mean_bg_ratio /= n;
  s.mean_psnr = n_psnr > 0 ? s.mean_psnr / n_psnr : std::numeric_limits<double>::quiet_NaN();
  return s;
}

namespace {

int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor<float> reflect_pad(const Tensor<float>& image, int64_t multiple) {
  const Shape s = image.shape;
  const int64_t h = (s.h + multiple - 1) / multiple * multiple;
  const int64_t w = (s.w + multiple - 1) / multiple * multiple;
  if (h == s.h && w == s.w) return image;
  Tensor<float> out(Shape{s.n, s.c, h, w});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          out.at(n, c, y, x) = image.at(n, c, reflect_index(y, s.h), reflect_index(x, s.w));
  return out;
}

Evaluation evaluate(const Predictor& predict, std::span<const Sample> samples,
                    double expansion) {
  if (!(expansion > 0.0)) throw InvalidArgument("evaluate: expansion must be positive");
  Evaluation ev;
  for (const auto& sample : samples) {
    const auto& ann = sample.annotation;
    const int64_t h = sample.image.shape.h;
    const int64_t w = sample.image.shape.w;
    const DensityMap raw = predict(reflect_pad(sample.image, 8));
    if (raw.height < h || raw.width < w) {
      throw InvalidArgument("evaluate: prediction smaller than the image");
    }
    DensityMap est;
    est.height = h;
    est.width = w;
    est.raster.resize(static_cast<size_t>(h * w));
    const DensityMap gt = render_density(ann, adaptive_sigmas(ann.points, w, h));
    std::vector<uint8_t> bg = make_cam(gt);
    for (auto& v : bg) v = v ? 0 : 1;

    EvalRecord r;
    r.image_id = ann.image_id;
    r.count_gt = static_cast<double>(ann.points.size());
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const double v = static_cast<double>(raw.raster[y * raw.width + x]) / expansion;
        est.raster[y * w + x] = static_cast<float>(v);
        r.total_mass += v;
        if (bg[y * w + x]) r.bg_mass += v;
      }
    }
    r.count_est = r.total_mass;
    r.ssim = map_ssim(est, gt);
    r.psnr = ann.points.empty() ? std::numeric_limits<double>::quiet_NaN()
                                : psnr(est.raster, gt.raster);
    ev.records.push_back(std::move(r));
  }
  ev.summary = summarize(ev.records);
  return ev;
}

Predictor model_predictor(const ModelConfig& config, const Parameters<float>& params) {
  return [config, params](const Tensor<float>& image) {
    Tape<float> tape;
    std::vector<Var<float>> vars;
    vars.reserve(params.size());
    for (const auto& e : params.entries) vars.push_back(tape.constant(e.value));
    const auto out = forward<float>(config, vars, tape.constant(image));
    const Var<float> d = out.final_density();
    DensityMap dm;
    dm.height = d.shape().h;
    dm.width = d.shape().w;
    dm.raster = d.data();
    return dm;
  };
}

namespace {

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

std::string to_json(const EvalSummary& s) {
  nlohmann::json j{{"mae", s.mae},
                   {"rmse", s.rmse},
                   {"mean_ssim", s.mean_ssim},
                   {"mean_psnr", number_or_null(s.mean_psnr)},
                   {"mean_bg_ratio", s.mean_bg_ratio},
                   {"n_images", s.n_images}};
  return j.dump();
}

std::string to_json_line(const EvalRecord& r) {
  nlohmann::json j{{"image_id", r.image_id},   {"count_est", r.count_est},
                   {"count_gt", r.count_gt},   {"ssim", r.ssim},
                   {"psnr", number_or_null(r.psnr)}, {"bg_mass", r.bg_mass},
                   {"total_mass", r.total_mass}, {"bg_ratio", r.bg_ratio()}};
  return j.dump();
}

}  // namespace cfanet
