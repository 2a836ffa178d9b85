// cfanet: command-line driver for data generation, training, evaluation and
// ablations. Exit codes: 0 ok, 1 usage, 2 data/format, 3 numerical.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>

#include "cfanet/experiment.hpp"
#include "cfanet/gradcheck.hpp"
#include "cfanet/metrics.hpp"
#include "cfanet/run_config.hpp"

namespace fs = std::filesystem;
using namespace cfanet;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumerical = 3;

std::string default_text(const nlohmann::json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

std::string type_label(const nlohmann::json& v) {
  if (v.is_boolean()) return "BOOL";
  if (v.is_number_integer()) return "INT";
  if (v.is_number()) return "FLOAT";
  return v.is_string() && v.get<std::string>().empty() ? "PATH" : "TEXT";
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw IoError("short write to '" + p.string() + "'");
}

// <out>/<command>-YYYYmmdd-HHMMSS, suffixed -2, -3, ... if taken.
fs::path make_run_dir(const RunConfig& c, const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const fs::path base = fs::path(c.out) / (command + "-" + stamp);
  fs::path dir = base;
  for (int i = 2; fs::exists(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(c).dump(2) + "\n");
  return dir;
}

std::vector<Sample> dataset_or_synth(const std::string& manifest, const SynthOptions& synth) {
  if (!manifest.empty()) return load_dataset(manifest);
  return synth_dataset(synth);
}

int cmd_synth(const RunConfig& c) {
  const auto samples = synth_dataset(c.synth);
  fs::create_directories(c.out);
  const fs::path manifest = write_dataset(c.out, samples);
  write_text(fs::path(c.out) / "config.json", to_json(c).dump(2) + "\n");
  std::cout << manifest.string() << "\n";
  return 0;
}

int cmd_gengt(const RunConfig& c) {
  if (c.dataset.empty()) throw InvalidArgument("gengt needs --dataset");
  const auto samples = load_dataset(c.dataset);
  const TrainingSet set = prepare_training_set(samples, c.model.k);
  fs::create_directories(c.out);
  for (const auto& s : set.samples) {
    const DensityMap dm = render_density(s.annotation, s.sigmas);
    const AttentionTargets t = make_targets(dm, set.thresholds, c.model.k);
    const fs::path stem = fs::path(c.out) / s.annotation.image_id;
    write_dmap(stem.string() + ".dmap", dm);
    write_pgm_bytes(stem.string() + "_cam.pgm", dm.width, dm.height, t.cam, 1);
    write_pgm_bytes(stem.string() + "_fam.pgm", dm.width, dm.height, t.fam, c.model.k - 1);
  }
  nlohmann::json th{{"k", c.model.k}, {"thresholds", set.thresholds}};
  write_text(fs::path(c.out) / "thresholds.json", th.dump(1) + "\n");
  write_text(fs::path(c.out) / "config.json", to_json(c).dump(2) + "\n");
  std::cout << set.samples.size() << " maps written to " << c.out << "\n";
  return 0;
}

int cmd_train(const RunConfig& c) {
  if (c.model.input_channels != 3) throw InvalidArgument("images are RGB: input_channels must be 3");
  const auto samples = dataset_or_synth(c.dataset, c.synth);
  const TrainingSet set = prepare_training_set(samples, c.model.k);
  const fs::path dir = make_run_dir(c, "train");
  std::ofstream log(dir / "train.log");
  const TrainRun run = train(c.model, set, c.train, [&](const EpochReport& r) {
    const std::string line = format_report(r, c.model, c.train);
    log << line << "\n" << std::flush;
    std::cout << line << "\n" << std::flush;
  });
  save_checkpoint(dir / "model.ckpt", c.model, run.params, &run.state);
  const Evaluation ev = evaluate(model_predictor(c.model, run.params), samples, c.train.expansion);
  write_text(dir / "train_eval.json", to_json(ev.summary) + "\n");
  std::cout << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c) {
  if (c.checkpoint.empty()) throw InvalidArgument("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(c.checkpoint);
  const auto samples = dataset_or_synth(c.dataset, c.synth);
  const Evaluation ev = evaluate(model_predictor(ck.config, ck.params), samples, c.train.expansion);
  const fs::path dir = make_run_dir(c, "eval");
  std::string lines;
  for (const auto& r : ev.records) lines += to_json_line(r) + "\n";
  write_text(dir / "records.jsonl", lines);
  write_text(dir / "summary.json", to_json(ev.summary) + "\n");
  std::cout << to_json(ev.summary) << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& c) {
  const auto reports = run_gradchecks(registered_gradchecks(c.train.seed), c.tol);
  const fs::path dir = make_run_dir(c, "gradcheck");
  nlohmann::json all = nlohmann::json::array();
  bool ok = true;
  for (const auto& r : reports) {
    ok = ok && r.passed;
    std::printf("%s %-28s max_rel_err %.3e probed %zu skipped %zu%s%s\n", r.passed ? "PASS" : "FAIL",
                r.name.c_str(), r.max_rel_error, r.probed, r.skipped,
                r.passed ? "" : " at ", r.passed ? "" : (r.location + ": " + r.failure).c_str());
    all.push_back({{"name", r.name},
                   {"passed", r.passed},
                   {"max_rel_error", r.max_rel_error},
                   {"location", r.location},
                   {"probed", r.probed},
                   {"skipped", r.skipped}});
  }
  write_text(dir / "gradcheck.json", all.dump(1) + "\n");
  return ok ? 0 : kNumerical;
}

int cmd_ablate(const RunConfig& c, AblationAxis axis, const std::string& run_name) {
  const auto train_set = dataset_or_synth(c.dataset, c.synth);
  SynthOptions held = c.synth;
  held.count = c.heldout_count;
  held.seed = c.synth.seed + 0x9e3779b97f4a7c15ULL;
  const auto heldout = dataset_or_synth(c.heldout, held);
  std::vector<uint64_t> seeds;
  for (int i = 0; i < c.n_seeds; ++i) seeds.push_back(c.train.seed + static_cast<uint64_t>(i));
  const fs::path dir = make_run_dir(c, run_name);
  const int threads = c.threads > 0 ? c.threads : default_threads();
  const auto result = run_ablation(
      to_string(axis), ablation_arms(axis, c.model, c.train), train_set, heldout, seeds, threads,
      [](const Arm& a, const SeedRun& r) {
        std::fprintf(stderr, "%s seed %llu: train MAE %.3f, held-out MAE %.3f (%.1f s)\n",
                     a.label.c_str(), static_cast<unsigned long long>(r.seed), r.train_eval.mae,
                     r.heldout_eval.mae, r.seconds);
      });
  write_text(dir / "ablation.json", to_json(result) + "\n");
  write_text(dir / "ablation.txt", to_table(result));
  std::cout << to_table(result);
  return 0;
}

struct Command {
  std::string name;
  std::string help;
  CLI::App* app = nullptr;
  std::string config_path;
  std::map<std::string, std::string> values;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfanet: crowd density estimation with coarse and fine attention"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::vector<Command> commands{
      {"synth", "generate a synthetic dataset (images + manifest) in --out"},
      {"gengt", "render DMAP density maps and CAM/FAM rasters for a dataset"},
      {"train", "train a model; writes a checkpoint under a timestamped run directory"},
      {"eval", "evaluate a checkpoint (MAE, RMSE, SSIM, PSNR, r_bg)"},
      {"gradcheck", "compare analytic gradients with finite differences for every op"},
      {"ablate", "train and compare configurations along one axis over several seeds"},
      {"compare-losses", "ablation over the loss kind: mse, ssim_only, sl_only, bsl"},
  };
  const nlohmann::json defaults = to_json(RunConfig{});
  for (auto& cmd : commands) {
    cmd.app = app.add_subcommand(cmd.name, cmd.help);
    cmd.app->add_option("--config", cmd.config_path, "flat JSON config; flags override it")
        ->type_name("PATH");
    for (const auto& key : config_keys()) {
      if (std::find(key.commands.begin(), key.commands.end(), cmd.name) == key.commands.end()) {
        continue;
      }
      cmd.app->add_option("--" + key.name, cmd.values[key.name], key.help)
          ->default_str(default_text(defaults[key.name]))
          ->type_name(type_label(defaults[key.name]));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  for (auto& cmd : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      nlohmann::json cfg = nlohmann::json::object();
      if (!cmd.config_path.empty()) cfg = read_config_file(cmd.config_path);
      for (const auto& [key, text] : cmd.values) {
        if (cmd.app->count("--" + key) > 0) apply_flag(cfg, key, text);
      }
      const RunConfig c = run_config_from_json(cfg);
      if (cmd.name == "synth") return cmd_synth(c);
      if (cmd.name == "gengt") return cmd_gengt(c);
      if (cmd.name == "train") return cmd_train(c);
      if (cmd.name == "eval") return cmd_eval(c);
      if (cmd.name == "gradcheck") return cmd_gradcheck(c);
      if (cmd.name == "ablate") return cmd_ablate(c, parse_axis(c.axis), "ablate-" + c.axis);
      if (cmd.name == "compare-losses") return cmd_ablate(c, AblationAxis::kLoss, "compare-losses");
    } catch (const InvalidArgument& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kUsage;
    } catch (const NumericalError& e) {
      std::cerr << "numerical error: " << e.what() << "\n";
      return kNumerical;
    } catch (const std::exception& e) {
      // FormatError, IoError and filesystem failures.
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    }
  }
  return kUsage;
}
