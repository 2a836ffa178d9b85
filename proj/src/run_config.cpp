#include "cfanet/run_config.hpp"

#include <fstream>
#include <sstream>

namespace cfanet {

namespace {

const std::vector<std::string> kTrainLike{"train", "ablate", "compare-losses"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    const auto model = with(kTrainLike, {"gengt"});
    const auto data = with(kTrainLike, {"synth", "eval"});
    const std::vector<std::string> all{"synth", "gengt", "train",  "eval",
                                       "gradcheck", "ablate", "compare-losses"};
    return std::vector<ConfigKey>{
        {"seed", "random seed", all},
        {"out", "output directory", all},
        {"k", "density-level classes", model},
        {"width_mult", "channel scale in (0, 1]", kTrainLike},
        {"input_channels", "image channels (images are read as RGB)", kTrainLike},
        {"dilation", "dilation of the density decoder", kTrainLike},
        {"init_std", "stddev of the gaussian init", kTrainLike},
        {"init", "gaussian | he", kTrainLike},
        {"branches", "baseline | crr | dle | crr+dle", kTrainLike},
        {"epochs", "training epochs", kTrainLike},
        {"lr0", "initial learning rate", kTrainLike},
        {"lr_halving_period", "epochs between learning-rate halvings", kTrainLike},
        {"expansion", "density target scale", with(kTrainLike, {"eval"})},
        {"crop_fraction", "crop side as a fraction of the image side", kTrainLike},
        {"flip_prob", "horizontal flip probability", kTrainLike},
        {"batch_size", "crops per optimizer step", kTrainLike},
        {"supervision", "supervised stages, e.g. 1-4, 3-4, 4", kTrainLike},
        {"enable_bl", "background term of the structural loss", kTrainLike},
        {"loss", "bsl | sl_only | mse | ssim_only", kTrainLike},
        {"dataset", "dataset manifest (empty: synthesize one)", with(kTrainLike, {"eval", "gengt"})},
        {"heldout", "held-out manifest (empty: synthesize one)", {"ablate", "compare-losses"}},
        {"checkpoint", "model checkpoint", {"eval"}},
        {"count", "synthetic images", data},
        {"width", "synthetic image width", data},
        {"height", "synthetic image height", data},
        {"min_people", "fewest heads per synthetic image", data},
        {"max_people", "most heads per synthetic image", data},
        {"layout", "uniform | clustered | gradient | mixed", data},
        {"background", "flat | textured-noise | geometric-clutter | mixed", data},
        {"head_radius_min", "smallest head radius (px)", data},
        {"head_radius_max", "largest head radius (px)", data},
        {"heldout_count", "synthetic held-out images", {"ablate", "compare-losses"}},
        {"axis", "branches | supervision | k | loss | bl", {"ablate"}},
        {"n_seeds", "seeds per arm (seed, seed+1, ...)", {"ablate", "compare-losses"}},
        {"threads", "worker threads (0: CFANET_THREADS or all cores)",
         {"ablate", "compare-losses"}},
        {"tol", "max relative gradient error", {"gradcheck"}},
    };
  }();
  return keys;
}

std::array<bool, 4> parse_supervision(const std::string& s) {
  std::array<bool, 4> stages{false, false, false, false};
  auto stage = [&](const std::string& t) {
    if (t.size() != 1 || t[0] < '1' || t[0] > '4') {
      throw InvalidArgument("bad supervision '" + s + "' (stages are 1-4)");
    }
    return t[0] - '1';
  };
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      stages[stage(part)] = true;
    } else {
      const int a = stage(part.substr(0, dash));
      const int b = stage(part.substr(dash + 1));
      if (a > b) throw InvalidArgument("bad supervision range '" + part + "'");
      for (int i = a; i <= b; ++i) stages[i] = true;
    }
  }
  if (stages == std::array<bool, 4>{}) throw InvalidArgument("no supervision stage in '" + s + "'");
  return stages;
}

std::string supervision_string(const std::array<bool, 4>& stages) {
  int first = -1;
  bool contiguous = true;
  for (int i = 0; i < 4; ++i) {
    if (stages[i] && first < 0) first = i;
    if (first >= 0 && !stages[i]) contiguous = false;
  }
  if (first >= 0 && contiguous) {
    return first == 3 ? "4" : std::to_string(first + 1) + "-4";
  }
  std::string out;
  for (int i = 0; i < 4; ++i) {
    if (!stages[i]) continue;
    if (!out.empty()) out += ",";
    out += std::to_string(i + 1);
  }
  return out;
}

nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"seed", c.train.seed},
      {"out", c.out},
      {"k", c.model.k},
      {"width_mult", c.model.width_mult},
      {"input_channels", c.model.input_channels},
      {"dilation", c.model.dilation},
      {"init_std", c.model.init_std},
      {"init", to_string(c.model.init)},
      {"branches", to_string(c.model.branches)},
      {"epochs", c.train.epochs},
      {"lr0", c.train.lr0},
      {"lr_halving_period", c.train.lr_halving_period},
      {"expansion", c.train.expansion},
      {"crop_fraction", c.train.crop_fraction},
      {"flip_prob", c.train.flip_prob},
      {"batch_size", c.train.batch_size},
      {"supervision", supervision_string(c.train.supervision)},
      {"enable_bl", c.train.enable_bl},
      {"loss", to_string(c.train.loss_kind)},
      {"dataset", c.dataset},
      {"heldout", c.heldout},
      {"checkpoint", c.checkpoint},
      {"count", c.synth.count},
      {"width", c.synth.width},
      {"height", c.synth.height},
      {"min_people", c.synth.min_people},
      {"max_people", c.synth.max_people},
      {"layout", c.synth.layout},
      {"background", c.synth.background},
      {"head_radius_min", c.synth.head_radius_min},
      {"head_radius_max", c.synth.head_radius_max},
      {"heldout_count", c.heldout_count},
      {"axis", c.axis},
      {"n_seeds", c.n_seeds},
      {"threads", c.threads},
      {"tol", c.tol},
  };
}

namespace {

template <class T>
T get(const nlohmann::json& j, const std::string& key) {
  const auto& v = j.at(key);
  const bool ok = [&] {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else return v.is_string();
  }();
  if (!ok) throw InvalidArgument("config key '" + key + "' has the wrong type: " + v.dump());
  if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && !v.is_number_unsigned()) {
        throw InvalidArgument("config key '" + key + "' must be non-negative");
      }
    }
  }
  return v.get<T>();
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
  nlohmann::json merged = to_json(RunConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
    merged[key] = value;
  }
  RunConfig c;
  c.train.seed = get<uint64_t>(merged, "seed");
  c.synth.seed = c.train.seed;
  c.out = get<std::string>(merged, "out");
  c.model.k = get<int>(merged, "k");
  c.model.width_mult = get<double>(merged, "width_mult");
  c.model.input_channels = get<int>(merged, "input_channels");
  c.model.dilation = get<int>(merged, "dilation");
  c.model.init_std = get<double>(merged, "init_std");
  c.model.init = parse_init(get<std::string>(merged, "init"));
  c.model.branches = parse_branches(get<std::string>(merged, "branches"));
  c.train.epochs = get<int>(merged, "epochs");
  c.train.lr0 = get<double>(merged, "lr0");
  c.train.lr_halving_period = get<int>(merged, "lr_halving_period");
  c.train.expansion = get<double>(merged, "expansion");
  c.train.crop_fraction = get<double>(merged, "crop_fraction");
  c.train.flip_prob = get<double>(merged, "flip_prob");
  c.train.batch_size = get<int>(merged, "batch_size");
  c.train.supervision = parse_supervision(get<std::string>(merged, "supervision"));
  c.train.enable_bl = get<bool>(merged, "enable_bl");
  c.train.loss_kind = parse_loss_kind(get<std::string>(merged, "loss"));
  c.dataset = get<std::string>(merged, "dataset");
  c.heldout = get<std::string>(merged, "heldout");
  c.checkpoint = get<std::string>(merged, "checkpoint");
  c.synth.count = get<int>(merged, "count");
  c.synth.width = get<int64_t>(merged, "width");
  c.synth.height = get<int64_t>(merged, "height");
  c.synth.min_people = get<int>(merged, "min_people");
  c.synth.max_people = get<int>(merged, "max_people");
  c.synth.layout = get<std::string>(merged, "layout");
  c.synth.background = get<std::string>(merged, "background");
  c.synth.head_radius_min = get<double>(merged, "head_radius_min");
  c.synth.head_radius_max = get<double>(merged, "head_radius_max");
  c.heldout_count = get<int>(merged, "heldout_count");
  c.axis = get<std::string>(merged, "axis");
  c.n_seeds = get<int>(merged, "n_seeds");
  c.threads = get<int>(merged, "threads");
  c.tol = get<double>(merged, "tol");

  if (c.synth.layout != "mixed") parse_layout(c.synth.layout);
  if (c.synth.background != "mixed") parse_background(c.synth.background);
  if (c.synth.count < 0) throw InvalidArgument("count must be non-negative");
  if (c.heldout_count < 0) throw InvalidArgument("heldout_count must be non-negative");
  if (c.n_seeds < 1) throw InvalidArgument("n_seeds must be >= 1");
  if (c.threads < 0) throw InvalidArgument("threads must be >= 0");
  if (!(c.tol > 0.0)) throw InvalidArgument("tol must be positive");
  c.model.validate();
  c.train.validate();
  return c;
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config '" + path.string() + "': " + e.what());
  }
}

void apply_flag(nlohmann::json& j, const std::string& key, const std::string& text) {
  const nlohmann::json defaults = to_json(RunConfig{});
  if (!defaults.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
  const auto& d = defaults[key];
  try {
    size_t used = 0;
    if (d.is_boolean()) {
      if (text == "true" || text == "1") j[key] = true;
      else if (text == "false" || text == "0") j[key] = false;
      else throw InvalidArgument("");
      return;
    }
    if (d.is_number_unsigned()) {
      if (!text.empty() && text[0] == '-') throw InvalidArgument("");
      j[key] = std::stoull(text, &used);
    } else if (d.is_number_integer()) {
      j[key] = std::stoll(text, &used);
    } else if (d.is_number()) {
      j[key] = std::stod(text, &used);
    } else {
      j[key] = text;
      return;
    }
    if (used != text.size()) throw InvalidArgument("");
  } catch (const std::exception&) {
    throw InvalidArgument("bad value '" + text + "' for --" + key);
  }
}

}  // namespace cfanet
