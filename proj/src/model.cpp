#include "cfanet/model.hpp"

#include <cmath>
#include <random>

namespace cfanet {

std::string to_string(Branches b) {
  switch (b) {
    case Branches::kBaseline: return "baseline";
    case Branches::kCrr: return "crr";
    case Branches::kDle: return "dle";
    case Branches::kCrrDle: return "crr+dle";
  }
  return "?";
}

Branches parse_branches(const std::string& s) {
  if (s == "baseline") return Branches::kBaseline;
  if (s == "crr") return Branches::kCrr;
  if (s == "dle") return Branches::kDle;
  if (s == "crr+dle") return Branches::kCrrDle;
  throw InvalidArgument("unknown branch setting '" + s +
                        "' (expected baseline, crr, dle or crr+dle)");
}

std::string to_string(InitScheme s) {
  return s == InitScheme::kHe ? "he" : "gaussian";
}

InitScheme parse_init(const std::string& s) {
  if (s == "gaussian") return InitScheme::kGaussian;
  if (s == "he") return InitScheme::kHe;
  throw InvalidArgument("unknown init scheme '" + s + "' (expected gaussian or he)");
}

void ModelConfig::validate() const {
  if (k < 2 || k > 255) throw InvalidArgument("k must be in [2, 255]");
  if (!(width_mult > 0.0 && width_mult <= 1.0)) {
    throw InvalidArgument("width_mult must be in (0, 1]");
  }
  if (std::lround(width_mult * 64) < 1) {
    throw InvalidArgument("width_mult too small: first stage has no channels");
  }
  if (input_channels < 1) throw InvalidArgument("input_channels must be >= 1");
  if (dilation < 1) throw InvalidArgument("dilation must be >= 1");
  if (init == InitScheme::kGaussian && !(init_std > 0.0)) {
    throw InvalidArgument("init_std must be positive");
  }
}

int64_t ModelConfig::channels(int64_t base) const {
  return std::max<int64_t>(1, std::lround(static_cast<double>(base) * width_mult));
}

std::vector<LayerSpec> layer_specs(const ModelConfig& config) {
  config.validate();
  std::vector<LayerSpec> layers;
  auto ch = [&](int64_t base) { return config.channels(base); };
  auto conv = [&](std::string name, int64_t in, int64_t out, int64_t kernel = 3,
                  int64_t dilation = 1) {
    layers.push_back({std::move(name), in, out, kernel, dilation});
  };

  // VGG-16 front end: 10 convolutions, pooling after blocks 1-3.
  conv("encoder.conv1_1", config.input_channels, ch(64));
  conv("encoder.conv1_2", ch(64), ch(64));
  conv("encoder.conv2_1", ch(64), ch(128));
  conv("encoder.conv2_2", ch(128), ch(128));
  conv("encoder.conv3_1", ch(128), ch(256));
  conv("encoder.conv3_2", ch(256), ch(256));
  conv("encoder.conv3_3", ch(256), ch(256));
  conv("encoder.conv4_1", ch(256), ch(512));
  conv("encoder.conv4_2", ch(512), ch(512));
  conv("encoder.conv4_3", ch(512), ch(512));

  // Decoder trunks. Stages 1-3 get a 3x3 side head; the terminal conv of
  // each trunk is the stage-4 head.
  auto branch = [&](const std::string& prefix, std::array<int64_t, 4> widths,
                    int64_t out, int64_t out_kernel, int64_t dilation) {
    int64_t in = ch(512);
    for (int s = 0; s < 4; ++s) {
      const int64_t w = ch(widths[s]);
      conv(prefix + ".stage" + std::to_string(s + 1), in, w, 3, dilation);
      if (s < 3) conv(prefix + ".head" + std::to_string(s + 1), w, out, 3, dilation);
      in = w;
    }
    conv(prefix + ".out", in, out, out_kernel, dilation);
  };
  if (config.has_crr()) branch("crr", {256, 128, 128, 64}, 1, 3, 1);
  if (config.has_dle()) branch("dle", {256, 256, 128, 64}, config.k, 3, 1);
  branch("dme", {512, 256, 256, 64}, 1, 1, config.dilation);
  return layers;
}

// ---- Parameters ------------------------------------------------------------

template <class T>
Tensor<T>& Parameters<T>::at(const std::string& name) {
  for (auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw InvalidArgument("no parameter named '" + name + "'");
}

template <class T>
const Tensor<T>& Parameters<T>::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw InvalidArgument("no parameter named '" + name + "'");
}

template <class T>
size_t Parameters<T>::scalar_count() const {
  size_t n = 0;
  for (const auto& e : entries) n += e.value.numel();
  return n;
}

template <class T>
void Parameters<T>::zero_grad() {
  for (auto& e : entries) e.value.zero_grad();
}

bool is_density_head(const std::string& layer_name) {
  return layer_name.starts_with("dme.head") || layer_name == "dme.out";
}

template <class T>
Parameters<T> build_parameters(const ModelConfig& config, uint64_t seed) {
  Parameters<T> params;
  std::mt19937_64 rng(seed);
  for (const auto& layer : layer_specs(config)) {
    const Shape ws{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel};
    const double fan_in = static_cast<double>(layer.in_channels * layer.kernel * layer.kernel);
    const double stddev = config.init == InitScheme::kHe ? std::sqrt(2.0 / fan_in)
                                                         : config.init_std;
    std::normal_distribution<double> normal(0.0, stddev);
    Tensor<T> weight(ws);
    for (auto& v : weight.data) v = static_cast<T>(normal(rng));
    Tensor<T> bias(Shape{layer.out_channels, 1, 1, 1});
    if (config.init == InitScheme::kHe && is_density_head(layer.name)) {
      // A random head over a few channels is often negative everywhere, and
      // the terminal relu would then never pass a gradient.
      std::fill(weight.data.begin(), weight.data.end(), T(0));
      std::fill(bias.data.begin(), bias.data.end(), static_cast<T>(kDensityHeadBias));
    }
    weight.requires_grad = true;
    bias.requires_grad = true;
    params.entries.push_back({layer.name + ".weight", std::move(weight)});
    params.entries.push_back({layer.name + ".bias", std::move(bias)});
  }
  return params;
}

// ---- attention -------------------------------------------------------------

template <class T>
std::vector<T> attention_class_weights(int k) {
  if (k < 2) throw InvalidArgument("attention weights need k >= 2");
  std::vector<T> w(static_cast<size_t>(k));
  w[0] = T(0);
  for (int c = 1; c < k; ++c) w[c] = static_cast<T>(c) / static_cast<T>(k - 1);
  return w;
}

template <class T>
Var<T> refine_attention(Var<T> fam_logits, Var<T> cam_logits, int k) {
  Var<T> fine{};
  Var<T> coarse{};
  if (fam_logits.tape != nullptr) {
    if (fam_logits.shape().c != k) {
      throw InvalidArgument("refine_attention: fam has " +
                            std::to_string(fam_logits.shape().c) + " channels, k=" +
                            std::to_string(k));
    }
    const auto weights = attention_class_weights<T>(k);
    fine = channel_weighted_sum(channel_softmax(fam_logits), std::span<const T>(weights));
  }
  if (cam_logits.tape != nullptr) {
    if (cam_logits.shape().c != 1) throw InvalidArgument("refine_attention: cam must have 1 channel");
    coarse = sigmoid(cam_logits);
  }
  if (fine.tape != nullptr && coarse.tape != nullptr) {
    const Shape a = fine.shape();
    const Shape b = coarse.shape();
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
      throw InvalidArgument("refine_attention: spatial mismatch " + a.str() + " vs " +
                            b.str());
    }
    return add(fine, coarse);
  }
  if (fine.tape != nullptr) return fine;
  if (coarse.tape != nullptr) return coarse;
  throw InvalidArgument("refine_attention: no attention input");
}

template <class T>
Var<T> fuse(Var<T> fm, Var<T> attention) {
  const Shape f = fm.shape();
  const Shape a = attention.shape();
  if (a.c != 1 || a.n != f.n || a.h != f.h || a.w != f.w) {
    throw InvalidArgument("fuse: attention " + a.str() + " does not match features " +
                          f.str());
  }
  return add(fm, mul(fm, attention));
}

// ---- forward ---------------------------------------------------------------

namespace {

template <class T>
class Binder {
 public:
  Binder(const std::vector<LayerSpec>& layers, std::span<const Var<T>> params)
      : layers_(layers), params_(params) {
    if (params.size() != 2 * layers.size()) {
      throw InvalidArgument("forward: expected " + std::to_string(2 * layers.size()) +
                            " parameter tensors, got " + std::to_string(params.size()));
    }
  }

  Var<T> conv(const std::string& name, Var<T> x) {
    for (size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].name == name) {
        return conv2d(x, params_[2 * i], params_[2 * i + 1], layers_[i].conv());
      }
    }
    throw InvalidArgument("forward: missing layer '" + name + "'");
  }

 private:
  const std::vector<LayerSpec>& layers_;
  std::span<const Var<T>> params_;
};

}  // namespace

template <class T>
ModelOutputs<T> forward(const ModelConfig& config, std::span<const Var<T>> params,
                        Var<T> image, const ForwardOptions& options) {
  const Shape is = image.shape();
  if (is.c != config.input_channels) {
    throw InvalidArgument("forward: image has " + std::to_string(is.c) +
                          " channels, model expects " +
                          std::to_string(config.input_channels));
  }
  if (is.h < 8 || is.w < 8 || is.h % 8 != 0 || is.w % 8 != 0) {
    throw InvalidArgument("forward: image size " + std::to_string(is.h) + "x" +
                          std::to_string(is.w) + " is not divisible by 8");
  }
  const auto layers = layer_specs(config);
  Binder<T> net(layers, params);

  Var<T> x = image;
  x = relu(net.conv("encoder.conv1_1", x));
  x = relu(net.conv("encoder.conv1_2", x));
  x = maxpool2(x);
  x = relu(net.conv("encoder.conv2_1", x));
  x = relu(net.conv("encoder.conv2_2", x));
  x = maxpool2(x);
  x = relu(net.conv("encoder.conv3_1", x));
  x = relu(net.conv("encoder.conv3_2", x));
  x = relu(net.conv("encoder.conv3_3", x));
  x = maxpool2(x);
  x = relu(net.conv("encoder.conv4_1", x));
  x = relu(net.conv("encoder.conv4_2", x));
  x = relu(net.conv("encoder.conv4_3", x));

  ModelOutputs<T> out;
  out.has_cam = config.has_crr();
  out.has_fam = config.has_dle();
  Var<T> crr = x;
  Var<T> dle = x;
  Var<T> dme = x;
  for (int s = 0; s < 4; ++s) {
    const std::string stage = ".stage" + std::to_string(s + 1);
    const std::string head = s < 3 ? ".head" + std::to_string(s + 1) : ".out";
    const int64_t to_full = int64_t{8} >> s;
    if (s > 0) {
      if (out.has_cam) crr = upsample_bilinear2x(crr);
      if (out.has_fam) dle = upsample_bilinear2x(dle);
      dme = upsample_bilinear2x(dme);
    }

    Var<T> cam{};
    Var<T> fam{};
    if (out.has_cam) {
      crr = relu(net.conv("crr" + stage, crr));
      cam = net.conv("crr" + head, crr);
      out.cam_logits[s] = to_full > 1 ? upsample_bilinear(cam, to_full) : cam;
    }
    if (out.has_fam) {
      dle = relu(net.conv("dle" + stage, dle));
      fam = net.conv("dle" + head, dle);
      out.fam_logits[s] = to_full > 1 ? upsample_bilinear(fam, to_full) : fam;
    }

    dme = relu(net.conv("dme" + stage, dme));
    out.dme_features[s] = dme;
    if (options.zero_attention) {
      const Shape fs = dme.shape();
      out.attention[s] = image.tape->constant(Shape{fs.n, 1, fs.h, fs.w}, T(0));
    } else if (out.has_cam || out.has_fam) {
      out.attention[s] = refine_attention(fam, cam, config.k);
    }
    if (out.attention[s].tape != nullptr) dme = fuse(dme, out.attention[s]);
    out.fused_features[s] = dme;

    Var<T> density = relu(net.conv("dme" + head, dme));
    out.density[s] = to_full > 1 ? upsample_bilinear(density, to_full) : density;
  }
  return out;
}

template <class T>
ModelOutputs<T> forward(const ModelConfig& config, Parameters<T>& params,
                        Var<T> image, const ForwardOptions& options) {
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (auto& e : params.entries) vars.push_back(image.tape->leaf(e.value));
  return forward(config, std::span<const Var<T>>(vars), image, options);
}

#define CFANET_INSTANTIATE(T)                                                       \
  template struct Parameters<T>;                                                    \
  template Parameters<T> build_parameters<T>(const ModelConfig&, uint64_t);         \
  template std::vector<T> attention_class_weights<T>(int);                          \
  template Var<T> refine_attention(Var<T>, Var<T>, int);                            \
  template Var<T> fuse(Var<T>, Var<T>);                                             \
  template ModelOutputs<T> forward(const ModelConfig&, std::span<const Var<T>>,     \
                                   Var<T>, const ForwardOptions&);                  \
  template ModelOutputs<T> forward(const ModelConfig&, Parameters<T>&, Var<T>,      \
                                   const ForwardOptions&);

CFANET_INSTANTIATE(float)
CFANET_INSTANTIATE(double)

#undef CFANET_INSTANTIATE

}  // namespace cfanet
