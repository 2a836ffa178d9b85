#include "cfanet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace cfanet {

void TrainConfig::validate() const {
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  if (!(lr0 > 0.0)) throw InvalidArgument("lr0 must be positive");
  if (lr_halving_period < 1) throw InvalidArgument("lr_halving_period must be >= 1");
  if (!(expansion > 0.0)) throw InvalidArgument("expansion must be positive");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) {
    throw InvalidArgument("crop_fraction must be in (0, 1]");
  }
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
    throw InvalidArgument("flip_prob must be in [0, 1]");
  }
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (std::none_of(supervision.begin(), supervision.end(), [](bool b) { return b; })) {
    throw InvalidArgument("at least one supervision stage must be enabled");
  }
}

LossOptions TrainConfig::loss_options() const {
  LossOptions o;
  o.kind = loss_kind;
  o.enable_bl = enable_bl;
  o.supervision = supervision;
  return o;
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw InvalidArgument("lr_at_epoch: negative epoch");
  return config.lr0 * std::pow(0.5, epoch / config.lr_halving_period);
}

TrainingSet prepare_training_set(std::span<const Sample> samples, int k) {
  if (samples.empty()) throw InvalidArgument("training set is empty");
  TrainingSet set;
  set.k = k;
  std::vector<DensityMap> maps;
  for (const auto& s : samples) {
    s.annotation.validate();
    TrainingSample t{s.image, s.annotation,
                     adaptive_sigmas(s.annotation.points, s.annotation.width,
                                     s.annotation.height)};
    maps.push_back(render_density(t.annotation, t.sigmas));
    set.samples.push_back(std::move(t));
  }
  set.thresholds = compute_class_thresholds(maps, k);
  return set;
}

std::pair<int64_t, int64_t> crop_size(int64_t height, int64_t width, double crop_fraction) {
  auto side = [&](int64_t n) {
    const auto c = static_cast<int64_t>(std::floor(static_cast<double>(n) * crop_fraction));
    return std::max<int64_t>(8, c / 8 * 8);
  };
  const int64_t ch = side(height);
  const int64_t cw = side(width);
  if (ch > height || cw > width) {
    throw InvalidArgument("image " + std::to_string(width) + "x" + std::to_string(height) +
                          " is too small to crop");
  }
  return {ch, cw};
}

CropWindow draw_crop(int64_t height, int64_t width, const TrainConfig& config,
                     std::mt19937_64& rng) {
  const auto [ch, cw] = crop_size(height, width, config.crop_fraction);
  CropWindow win;
  win.height = ch;
  win.width = cw;
  win.y0 = std::uniform_int_distribution<int64_t>(0, height - ch)(rng);
  win.x0 = std::uniform_int_distribution<int64_t>(0, width - cw)(rng);
  win.flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config.flip_prob;
  return win;
}

TrainingSample apply_crop(const TrainingSample& sample, const CropWindow& win) {
  const Shape s = sample.image.shape;
  if (win.x0 < 0 || win.y0 < 0 || win.x0 + win.width > s.w || win.y0 + win.height > s.h) {
    throw InvalidArgument("crop window outside the image");
  }
  TrainingSample out;
  out.image = Tensor<float>(Shape{s.n, s.c, win.height, win.width});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < win.height; ++y)
        for (int64_t x = 0; x < win.width; ++x) {
          const int64_t sx = win.flip ? win.width - 1 - x : x;
          out.image.at(n, c, y, x) = sample.image.at(n, c, win.y0 + y, win.x0 + sx);
        }
  out.annotation.image_id = sample.annotation.image_id;
  out.annotation.width = win.width;
  out.annotation.height = win.height;
  const auto cw = static_cast<double>(win.width);
  const auto ch = static_cast<double>(win.height);
  for (size_t i = 0; i < sample.annotation.points.size(); ++i) {
    const Point& p = sample.annotation.points[i];
    Point q{p.x - static_cast<double>(win.x0), p.y - static_cast<double>(win.y0)};
    if (!(q.x >= 0.0 && q.x < cw && q.y >= 0.0 && q.y < ch)) continue;
    if (win.flip) q.x = std::min(cw - q.x, std::nextafter(cw, 0.0));
    out.annotation.points.push_back(q);
    out.sigmas.push_back(sample.sigmas[i]);
  }
  return out;
}

TrainingSample augment(const TrainingSample& sample, const TrainConfig& config,
                       std::mt19937_64& rng) {
  const Shape s = sample.image.shape;
  if (s.h < 16 || s.w < 16) throw InvalidArgument("augment: image smaller than 16x16");
  return apply_crop(sample, draw_crop(s.h, s.w, config, rng));
}

SampleTargets make_sample_targets(const TrainingSample& sample,
                                  std::span<const float> thresholds, int k) {
  SampleTargets t;
  t.density = render_density(sample.annotation, sample.sigmas);
  const AttentionTargets at = make_targets(t.density, thresholds, k);
  t.loss.cam = at.cam;
  t.loss.fam = at.fam;
  t.loss.bg_mask.resize(at.cam.size());
  for (size_t i = 0; i < at.cam.size(); ++i) t.loss.bg_mask[i] = at.cam[i] ? 0 : 1;
  return t;
}

OptimizerState OptimizerState::for_parameters(const Parameters<float>& params) {
  OptimizerState s;
  for (const auto& e : params.entries) {
    s.m.emplace_back(e.value.data.size(), 0.0f);
    s.v.emplace_back(e.value.data.size(), 0.0f);
  }
  return s;
}

void adam_step(Parameters<float>& params, OptimizerState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InvalidArgument("adam_step: optimizer state does not match parameters");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entries[i];
    if (e.value.grad.size() != e.value.data.size() || state.m[i].size() != e.value.data.size()) {
      throw InvalidArgument("adam_step: shape mismatch for " + e.name);
    }
    for (const float g : e.value.grad) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + e.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<float>& p = params.entries[i].value;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < p.data.size(); ++j) {
      const double g = p.grad[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      p.data[j] = static_cast<float>(p.data[j] - update);
    }
  }
}

EpochReport train_epoch(const ModelConfig& model, Parameters<float>& params,
                        const TrainingSet& data, const TrainConfig& config, int epoch,
                        OptimizerState& state, std::mt19937_64& rng) {
  if (data.samples.empty()) throw InvalidArgument("train_epoch: no data");
  EpochReport report;
  report.epoch = epoch;
  report.lr = lr_at_epoch(config, epoch);
  const LossWeights weights = weight_schedule(epoch, config.epochs);
  const LossOptions options = config.loss_options();

  std::vector<size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  for (size_t start = 0; start < order.size(); start += config.batch_size) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
    params.zero_grad();
    for (size_t b = start; b < end; ++b) {
      const TrainingSample crop = augment(data.samples[order[b]], config, rng);
      const SampleTargets targets = make_sample_targets(crop, data.thresholds, data.k);
      Tape<float> tape;
      const auto outputs = forward<float>(model, params, tape.constant(crop.image));
      Tensor<float> scaled(Shape{1, 1, targets.density.height, targets.density.width});
      for (size_t i = 0; i < scaled.data.size(); ++i) {
        scaled.data[i] = static_cast<float>(targets.density.raster[i] * config.expansion);
      }
      const auto loss = total_loss(outputs, tape.constant(std::move(scaled)), targets.loss,
                                   weights, options);
      if (!std::isfinite(loss.terms.total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " on " +
                             crop.annotation.image_id);
      }
      tape.backward(loss.total);
      report.mean += loss.terms;
      ++report.samples;
    }
    const auto inv = static_cast<float>(1.0 / static_cast<double>(end - start));
    if (end - start > 1) {
      for (auto& e : params.entries)
        for (auto& g : e.value.grad) g *= inv;
    }
    adam_step(params, state, report.lr);
  }
  report.mean = report.mean.scaled(1.0 / report.samples);
  return report;
}

std::string format_report(const EpochReport& r, const ModelConfig& model,
                          const TrainConfig& config) {
  std::ostringstream os;
  os << "epoch " << r.epoch << " lr " << std::scientific << std::setprecision(3) << r.lr
     << std::fixed << std::setprecision(6) << " loss " << r.mean.total;
  switch (config.loss_kind) {
    case LossKind::kBsl:
      os << " sl " << r.mean.sl;
      if (config.enable_bl) os << " bl " << r.mean.bl;
      break;
    case LossKind::kSlOnly: os << " sl " << r.mean.sl; break;
    case LossKind::kMse: os << " mse " << r.mean.mse; break;
    case LossKind::kSsimOnly: os << " ssim " << r.mean.ssim; break;
  }
  if (model.has_crr()) os << " cam " << r.mean.cam;
  if (model.has_dle()) os << " fam " << r.mean.fam;
  return os.str();
}

TrainRun train(const ModelConfig& model, const TrainingSet& data, const TrainConfig& config,
               const EpochCallback& on_epoch) {
  model.validate();
  config.validate();
  if (data.k != model.k) throw InvalidArgument("training set was prepared for a different k");
  TrainRun run;
  run.params = build_parameters<float>(model, config.seed);
  run.state = OptimizerState::for_parameters(run.params);
  std::mt19937_64 rng(config.seed ^ 0x5deece66dULL);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    run.history.push_back(train_epoch(model, run.params, data, config, epoch, run.state, rng));
    if (on_epoch) on_epoch(run.history.back());
  }
  return run;
}

// ---- checkpoints -----------------------------------------------------------

std::string model_config_json(const ModelConfig& c) {
  nlohmann::json j{{"k", c.k},
                   {"width_mult", c.width_mult},
                   {"input_channels", c.input_channels},
                   {"dilation", c.dilation},
                   {"init_std", c.init_std},
                   {"init", to_string(c.init)},
                   {"branches", to_string(c.branches)}};
  return j.dump();
}

ModelConfig parse_model_config_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.k = j.at("k").get<int>();
    c.width_mult = j.at("width_mult").get<double>();
    c.input_channels = j.at("input_channels").get<int>();
    c.dilation = j.at("dilation").get<int>();
    c.init_std = j.at("init_std").get<double>();
    c.init = parse_init(j.at("init").get<std::string>());
    c.branches = parse_branches(j.at("branches").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

namespace {

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u8(uint8_t v) { out.push_back(v); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) { bytes(v.data(), 4 * v.size()); }

  std::vector<uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& b) : buf(b) {}

  void bytes(void* p, size_t n) {
    if (buf.size() - pos < n) throw FormatError("checkpoint: truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  uint8_t u8() {
    uint8_t v = 0;
    bytes(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint32_t v = 0;
    bytes(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v = 0;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    if (buf.size() - pos < n) throw FormatError("checkpoint: truncated");
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  void floats(std::vector<float>& v) { bytes(v.data(), 4 * v.size()); }
  bool done() const { return pos == buf.size(); }

 private:
  const std::vector<uint8_t>& buf;
  size_t pos = 0;
};

}  // namespace

std::vector<uint8_t> encode_checkpoint(const ModelConfig& config,
                                       const Parameters<float>& params,
                                       const OptimizerState* state) {
  Writer w;
  w.bytes("CFCK", 4);
  w.u32(kCheckpointVersion);
  w.str(model_config_json(config));
  w.u32(static_cast<uint32_t>(params.size()));
  for (const auto& e : params.entries) {
    w.str(e.name);
    const Shape s = e.value.shape;
    for (int64_t d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<uint32_t>(d));
  }
  w.u64(state ? state->step : 0);
  w.u8(state ? 1 : 0);
  for (const auto& e : params.entries) w.floats(e.value.data);
  if (state) {
    if (state->m.size() != params.size() || state->v.size() != params.size()) {
      throw InvalidArgument("checkpoint: optimizer state does not match parameters");
    }
    for (const auto& m : state->m) w.floats(m);
    for (const auto& v : state->v) w.floats(v);
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4] = {};
  r.bytes(magic, 4);
  if (std::memcmp(magic, "CFCK", 4) != 0) throw FormatError("checkpoint: bad magic");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config = parse_model_config_json(r.str());
  try {
    ck.config.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const auto expected = layer_specs(ck.config);
  const uint32_t n = r.u32();
  if (n != 2 * expected.size()) {
    throw FormatError("checkpoint: " + std::to_string(n) + " tensors, config implies " +
                      std::to_string(2 * expected.size()));
  }
  for (uint32_t i = 0; i < n; ++i) {
    NamedTensor<float> e;
    e.name = r.str();
    Shape s;
    s.n = r.u32();
    s.c = r.u32();
    s.h = r.u32();
    s.w = r.u32();
    const LayerSpec& layer = expected[i / 2];
    const bool is_weight = i % 2 == 0;
    const std::string want = layer.name + (is_weight ? ".weight" : ".bias");
    const Shape want_shape = is_weight
        ? Shape{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel}
        : Shape{layer.out_channels, 1, 1, 1};
    if (e.name != want || !(s == want_shape)) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is " + e.name + " " +
                        s.str() + ", expected " + want + " " + want_shape.str());
    }
    e.value = Tensor<float>(s);
    e.value.requires_grad = true;
    ck.params.entries.push_back(std::move(e));
  }
  ck.step = r.u64();
  const uint8_t has_moments = r.u8();
  if (has_moments > 1) throw FormatError("checkpoint: bad optimizer flag");
  for (auto& e : ck.params.entries) r.floats(e.value.data);
  if (has_moments) {
    OptimizerState st = OptimizerState::for_parameters(ck.params);
    st.step = ck.step;
    for (auto& m : st.m) r.floats(m);
    for (auto& v : st.v) r.floats(v);
    ck.state = std::move(st);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const Parameters<float>& params, const OptimizerState* state) {
  const auto bytes = encode_checkpoint(config, params, state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<uint8_t> bytes(std::istreambuf_iterator<char>(in), {});
  return decode_checkpoint(bytes);
}

}  // namespace cfanet
