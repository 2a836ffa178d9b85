#include "cfanet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace cfanet {

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kBranches: return "branches";
    case AblationAxis::kSupervision: return "supervision";
    case AblationAxis::kK: return "k";
    case AblationAxis::kLoss: return "loss";
    case AblationAxis::kBl: return "bl";
  }
  return "?";
}

AblationAxis parse_axis(const std::string& s) {
  for (auto a : {AblationAxis::kBranches, AblationAxis::kSupervision, AblationAxis::kK,
                 AblationAxis::kLoss, AblationAxis::kBl}) {
    if (to_string(a) == s) return a;
  }
  throw InvalidArgument("unknown ablation axis '" + s +
                        "' (expected branches, supervision, k, loss or bl)");
}

std::vector<Arm> ablation_arms(AblationAxis axis, const ModelConfig& model,
                               const TrainConfig& train) {
  std::vector<Arm> arms;
  auto arm = [&](std::string label) -> Arm& {
    arms.push_back({std::move(label), model, train});
    return arms.back();
  };
  switch (axis) {
    case AblationAxis::kBranches:
      arm("baseline").model.branches = Branches::kBaseline;
      arm("+CRR").model.branches = Branches::kCrr;
      arm("+DLE").model.branches = Branches::kDle;
      arm("+CRR+DLE").model.branches = Branches::kCrrDle;
      break;
    case AblationAxis::kSupervision:
      for (int first = 4; first >= 1; --first) {
        Arm& a = arm(first == 4 ? "supervision 4" : "supervision " + std::to_string(first) + "-4");
        for (int s = 0; s < 4; ++s) a.train.supervision[s] = s + 1 >= first;
      }
      break;
    case AblationAxis::kK:
      for (int k : {4, 6, 8, 10}) arm("k=" + std::to_string(k)).model.k = k;
      break;
    case AblationAxis::kLoss:
      for (auto kind : {LossKind::kMse, LossKind::kSsimOnly, LossKind::kSlOnly, LossKind::kBsl}) {
        arm(to_string(kind)).train.loss_kind = kind;
      }
      break;
    case AblationAxis::kBl:
      arm("w/o BL").train.enable_bl = false;
      arm("w. BL").train.enable_bl = true;
      break;
  }
  return arms;
}

namespace {

template <class F>
double mean_over(const std::vector<SeedRun>& runs, F f) {
  if (runs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : runs) s += f(r);
  return s / static_cast<double>(runs.size());
}

}  // namespace

double ArmResult::mean_train_mae() const {
  return mean_over(runs, [](const SeedRun& r) { return r.train_eval.mae; });
}
double ArmResult::mean_heldout_mae() const {
  return mean_over(runs, [](const SeedRun& r) { return r.heldout_eval.mae; });
}
double ArmResult::mean_heldout_bg_ratio() const {
  return mean_over(runs, [](const SeedRun& r) { return r.heldout_eval.mean_bg_ratio; });
}
double ArmResult::mean_heldout_ssim() const {
  return mean_over(runs, [](const SeedRun& r) { return r.heldout_eval.mean_ssim; });
}

int default_threads() {
  if (const char* env = std::getenv("CFANET_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

AblationResult run_ablation(const std::string& axis, const std::vector<Arm>& arms,
                            std::span<const Sample> train_set, std::span<const Sample> heldout,
                            std::span<const uint64_t> seeds, int threads,
                            const RunCallback& on_run) {
  if (arms.empty() || seeds.empty()) throw InvalidArgument("ablation needs arms and seeds");
  for (const auto& a : arms) {
    a.model.validate();
    a.train.validate();
  }
  // Class thresholds depend on k only.
  std::map<int, TrainingSet> sets;
  for (const auto& a : arms) {
    if (!sets.contains(a.model.k)) sets.emplace(a.model.k, prepare_training_set(train_set, a.model.k));
  }

  AblationResult result;
  result.axis = axis;
  for (const auto& a : arms) {
    result.arms.push_back({a.label, std::vector<SeedRun>(seeds.size())});
  }

  const size_t jobs = arms.size() * seeds.size();
  std::atomic<size_t> next{0};
  std::mutex report_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (size_t job = next++; job < jobs; job = next++) {
      const size_t ai = job / seeds.size();
      const size_t si = job % seeds.size();
      try {
        const Arm& arm = arms[ai];
        TrainConfig tc = arm.train;
        tc.seed = seeds[si];
        const auto t0 = std::chrono::steady_clock::now();
        const TrainRun run = train(arm.model, sets.at(arm.model.k), tc);
        SeedRun sr;
        sr.seed = seeds[si];
        sr.final_loss = run.history.empty() ? 0.0 : run.history.back().mean.total;
        const Predictor predict = model_predictor(arm.model, run.params);
        sr.train_eval = evaluate(predict, train_set, tc.expansion).summary;
        if (!heldout.empty()) sr.heldout_eval = evaluate(predict, heldout, tc.expansion).summary;
        sr.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard lock(report_mutex);
        result.arms[ai].runs[si] = sr;
        if (on_run) on_run(arm, sr);
      } catch (...) {
        std::lock_guard lock(report_mutex);
        if (!error) error = std::current_exception();
        next = jobs;
      }
    }
  };
  const int n_threads = std::clamp<int>(threads, 1, static_cast<int>(jobs));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return result;
}

namespace {

nlohmann::json summary_json(const EvalSummary& s) { return nlohmann::json::parse(to_json(s)); }

}  // namespace

std::string to_json(const AblationResult& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& s : a.runs) {
      nlohmann::json j{{"seed", s.seed},
                       {"final_loss", s.final_loss},
                       {"train", summary_json(s.train_eval)}};
      if (s.heldout_eval.n_images > 0) j["heldout"] = summary_json(s.heldout_eval);
      runs.push_back(std::move(j));
    }
    arms.push_back({{"label", a.label},
                    {"mean_train_mae", a.mean_train_mae()},
                    {"mean_heldout_mae", a.mean_heldout_mae()},
                    {"mean_heldout_bg_ratio", a.mean_heldout_bg_ratio()},
                    {"mean_heldout_ssim", a.mean_heldout_ssim()},
                    {"runs", std::move(runs)}});
  }
  return nlohmann::json{{"axis", r.axis}, {"arms", std::move(arms)}}.dump(1);
}

std::string to_table(const AblationResult& r) {
  size_t w = 5;
  for (const auto& a : r.arms) w = std::max(w, a.label.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << r.axis << std::right << std::setw(12)
     << "train MAE" << std::setw(12) << "test MAE" << std::setw(12) << "test RMSE"
     << std::setw(10) << "SSIM" << std::setw(10) << "PSNR" << std::setw(10) << "r_bg" << "\n";
  for (const auto& a : r.arms) {
    const double rmse = mean_over(a.runs, [](const SeedRun& s) { return s.heldout_eval.rmse; });
    const double psnr =
        mean_over(a.runs, [](const SeedRun& s) { return s.heldout_eval.mean_psnr; });
    os << std::left << std::setw(static_cast<int>(w)) << a.label << std::right << std::fixed
       << std::setprecision(3) << std::setw(12) << a.mean_train_mae() << std::setw(12)
       << a.mean_heldout_mae() << std::setw(12) << rmse << std::setprecision(4)
       << std::setw(10) << a.mean_heldout_ssim() << std::setprecision(2) << std::setw(10)
       << psnr << std::setprecision(4) << std::setw(10) << a.mean_heldout_bg_ratio() << "\n";
  }
  return os.str();
}

}  // namespace cfanet
