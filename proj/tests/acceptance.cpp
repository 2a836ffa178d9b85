// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cfanet/experiment.hpp"
#include "cfanet/gradcheck.hpp"
#include "cfanet/losses.hpp"
#include "cfanet/metrics.hpp"
#include "cfanet/train.hpp"

using namespace cfanet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor<double> random_map(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data) v = d(rng);
  return t;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const auto cases = registered_gradchecks(0);
  const auto reports = run_gradchecks(cases, 1e-4);
  const double secs = seconds_since(t0);
  bool all = true;
  bool has_model = false;
  double worst = 0.0;
  std::string failed;
  for (const auto& r : reports) {
    all = all && r.passed;
    worst = std::max(worst, r.max_rel_error);
    has_model = has_model || r.name == "bsl-total-loss-16x16";
    if (!r.passed) failed += " " + r.name;
  }
  for (const auto& c : cases) all = all && c.options.step == 1e-5;
  const bool pass = all && has_model && secs <= 60.0;
  return {pass, fmt("%zu graphs incl. 16x16 BSL model, max rel err %.2e (tol 1e-4), %.1f s (limit 60)%s",
                    reports.size(), worst, secs, failed.empty() ? "" : (" failed:" + failed).c_str())};
}

// 2 ------------------------------------------------------------------------

Outcome mass_conservation() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> count(1, 200);
  std::uniform_int_distribution<int> side(32, 160);
  double worst = 0.0;
  int violations = 0;
  for (int i = 0; i < 100; ++i) {
    PointAnnotation a;
    a.image_id = "m" + std::to_string(i);
    a.width = side(rng);
    a.height = side(rng);
    const int n = count(rng);
    std::uniform_real_distribution<double> ux(0.0, static_cast<double>(a.width));
    std::uniform_real_distribution<double> uy(0.0, static_cast<double>(a.height));
    for (int p = 0; p < n; ++p) a.points.push_back({ux(rng), uy(rng)});
    const auto sigmas = adaptive_sigmas(a.points, a.width, a.height);
    const DensityMap dm = render_density(a, sigmas);
    long double mass = 0.0L;
    for (float v : dm.raster) mass += v;
    const double err = std::abs(static_cast<double>(mass) - n) / n;
    worst = std::max(worst, err);
    violations += err > 1e-3;
  }
  return {violations == 0,
          fmt("100 annotations, 1-200 points: worst |sum - n| / n = %.2e (limit 1e-3)", worst)};
}

// 3 ------------------------------------------------------------------------

Outcome ssim_identities() {
  std::mt19937_64 rng(33);
  Tape<double> tape;
  double self_err = 0.0;
  double sl_self = 0.0;
  int asym = 0;
  for (int i = 0; i < 20; ++i) {
    const Shape s{1, 1, 44 + i % 5, 44 + i % 3};
    auto x = tape.constant(random_map(s, rng, 0.0, 2.0));
    auto y = tape.constant(random_map(s, rng, 0.0, 2.0));
    self_err = std::max(self_err, std::abs(ssim(x, x).item() - 1.0));
    sl_self = std::max(sl_self, std::abs(structural_loss(x, x).item()));
    asym += ssim(x, y).item() != ssim(y, x).item();
    asym += structural_loss(x, y).item() != structural_loss(y, x).item();
  }
  const double c1 = 0.01;
  const double expected = c1 / (1.0 + c1);
  const double constant =
      ssim(tape.constant(Shape{1, 1, 32, 32}, 0.0), tape.constant(Shape{1, 1, 32, 32}, 1.0)).item();
  const double const_err = std::abs(constant - expected);
  const bool pass = self_err <= 1e-9 && sl_self <= 1e-9 && const_err <= 1e-6 && asym == 0;
  return {pass, fmt("|ssim(X,X)-1| %.1e, |SL(X,X)| %.1e (limits 1e-9); ssim(0,1) %.9f vs "
                    "%.9f; asymmetric pairs %d of 40",
                    self_err, sl_self, constant, expected, asym)};
}

// 4 ------------------------------------------------------------------------

Outcome attention_identities() {
  ModelConfig with;
  with.width_mult = 0.125;
  ModelConfig without = with;
  without.branches = Branches::kBaseline;
  auto full = build_parameters<float>(with, 3);
  auto plain = build_parameters<float>(without, 3);
  for (auto& e : plain.entries) e.value = full.at(e.name);
  std::mt19937_64 rng(4);
  Tensor<float> image(Shape{1, 3, 48, 40});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : image.data) v = u(rng);

  Tape<float> t1;
  ForwardOptions zero;
  zero.zero_attention = true;
  const auto a = forward(with, full, t1.constant(image), zero);
  Tape<float> t2;
  const auto b = forward(without, plain, t2.constant(image));
  bool identical = true;
  for (int s = 0; s < 4; ++s) {
    const auto& f = a.fused_features[s].data();
    const auto& d = a.dme_features[s].data();
    const auto& p = b.density[s].data();
    identical = identical && f.size() == d.size() &&
                std::memcmp(f.data(), d.data(), f.size() * sizeof(float)) == 0 &&
                std::memcmp(a.density[s].data().data(), p.data(), p.size() * sizeof(float)) == 0;
  }

  Tape<double> t3;
  const int k = 6;
  Tensor<double> fam(Shape{1, k, 4, 4}, -30.0);
  for (size_t i = 0; i < 16; ++i) fam.data[i] = 30.0;
  const auto att = refine_attention(t3.constant(fam), t3.constant(Shape{1, 1, 4, 4}, -30.0), k);
  double att_max = 0.0;
  for (double v : att.data()) att_max = std::max(att_max, v);

  const auto w = attention_class_weights<double>(k);
  const bool weights = w == std::vector<double>{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  return {identical && att_max < 1e-4 && weights,
          fmt("zero attention bit-identical: %s; background attention max %.1e (limit 1e-4); "
              "k=6 weights exact: %s",
              identical ? "yes" : "no", att_max, weights ? "yes" : "no")};
}

// 5 ------------------------------------------------------------------------

Outcome desk_overfit() {
  int ok = 0;
  std::string runs;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    SynthOptions so;
    so.count = 8;
    so.width = so.height = 96;
    so.seed = seed;
    const auto samples = synth_dataset(so);
    double mean_gt = 0.0;
    for (const auto& s : samples) mean_gt += static_cast<double>(s.annotation.points.size());
    mean_gt /= static_cast<double>(samples.size());

    ModelConfig mc;
    mc.width_mult = 0.125;
    mc.k = 6;
    mc.init = InitScheme::kHe;
    TrainConfig tc;
    tc.epochs = 300;
    tc.lr0 = 1e-3;
    tc.lr_halving_period = 60;
    tc.crop_fraction = 1.0;
    tc.seed = seed;
    const auto t0 = Clock::now();
    const TrainRun run = train(mc, prepare_training_set(samples, mc.k), tc);
    const double secs = seconds_since(t0);
    const auto ev = evaluate(model_predictor(mc, run.params), samples, tc.expansion);
    const double rel = ev.summary.mae / mean_gt;
    const bool good = rel <= 0.05 && secs <= 600.0;
    ok += good;
    runs += fmt(" s%llu %.1f%%/%.0fs", static_cast<unsigned long long>(seed), 100.0 * rel, secs);
    std::fprintf(stderr, "  overfit seed %llu: MAE %.3f (%.2f%% of %.1f), %.0f s\n",
                 static_cast<unsigned long long>(seed), ev.summary.mae, 100.0 * rel, mean_gt, secs);
  }
  return {ok >= 4, fmt("%d of 5 seeds at MAE <= 5%% of mean count within 600 s (need 4):%s", ok,
                       runs.c_str())};
}

// 6-8 ----------------------------------------------------------------------
// One paired run shared by the three direction checks: 48x48 scenes, 8
// training images, 32 held-out images over geometric clutter, five seeds.
// Arms: the full model (all branches, stages 1-4, BL) and one arm per
// removed ingredient.

const AblationResult& desk_ablation() {
  static const AblationResult result = [] {
    SynthOptions tr;
    tr.count = 8;
    tr.width = tr.height = 48;
    tr.min_people = 5;
    tr.max_people = 25;
    tr.seed = 100;
    SynthOptions te = tr;
    te.count = 32;
    te.seed = 200;
    te.background = "geometric-clutter";

    ModelConfig model;
    model.width_mult = 0.125;
    model.init = InitScheme::kHe;
    TrainConfig train;
    train.epochs = 300;
    train.lr0 = 1e-3;
    train.lr_halving_period = 60;
    train.crop_fraction = 1.0;

    std::vector<Arm> arms{{"full", model, train},
                          {"stage 4 only", model, train},
                          {"baseline", model, train},
                          {"without BL", model, train}};
    arms[1].train.supervision = {false, false, false, true};
    arms[2].model.branches = Branches::kBaseline;
    arms[3].train.enable_bl = false;
    const std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
    return run_ablation("desk", arms, synth_dataset(tr), synth_dataset(te), seeds,
                        default_threads(), [](const Arm& a, const SeedRun& r) {
                          std::fprintf(stderr,
                                       "  %s seed %llu: train MAE %.3f, held-out MAE %.3f, "
                                       "r_bg %.5f (%.0f s)\n",
                                       a.label.c_str(), static_cast<unsigned long long>(r.seed),
                                       r.train_eval.mae, r.heldout_eval.mae,
                                       r.heldout_eval.mean_bg_ratio, r.seconds);
                        });
  }();
  return result;
}

const ArmResult& arm(const std::string& label) {
  for (const auto& a : desk_ablation().arms) {
    if (a.label == label) return a;
  }
  throw InvalidArgument("missing arm " + label);
}

Outcome bl_direction() {
  const double on = arm("full").mean_heldout_bg_ratio();
  const double off = arm("without BL").mean_heldout_bg_ratio();
  return {on < off, fmt("held-out mean r_bg over 5 seeds: with BL %.5f, without %.5f", on, off)};
}

Outcome supervision_direction() {
  const double full = arm("full").mean_train_mae();
  const double single = arm("stage 4 only").mean_train_mae();
  return {full <= single,
          fmt("mean train MAE over 5 seeds: stages 1-4 %.3f, stage 4 only %.3f", full, single)};
}

Outcome branch_direction() {
  const double both = arm("full").mean_heldout_mae();
  const double base = arm("baseline").mean_heldout_mae();
  return {both <= base,
          fmt("mean held-out MAE over 5 seeds: +CRR+DLE %.3f, baseline %.3f", both, base)};
}

// 9 ------------------------------------------------------------------------
// Brute-force long-double reimplementations, written from the definitions.

struct OracleRecord {
  long double est = 0.0L;
  long double gt = 0.0L;
};

Outcome metrics_oracle() {
  std::mt19937_64 rng(909);
  std::uniform_int_distribution<int> side(8, 40);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<EvalRecord> records;
  std::vector<OracleRecord> oracle;
  double worst_psnr = 0.0;
  double worst_bg = 0.0;
  for (int i = 0; i < 50; ++i) {
    const int h = side(rng);
    const int w = side(rng);
    std::vector<float> est(static_cast<size_t>(h * w));
    std::vector<float> gt(est.size());
    for (size_t p = 0; p < gt.size(); ++p) {
      // Sparse groundtruth so the background mask is non-trivial.
      gt[p] = u(rng) < 0.4 ? static_cast<float>(u(rng) * 0.05) : 0.0f;
      est[p] = static_cast<float>(std::max(0.0, gt[p] + (u(rng) - 0.5) * 0.02));
    }
    std::vector<uint8_t> bg(gt.size());
    for (size_t p = 0; p < gt.size(); ++p) bg[p] = gt[p] < kCrowdThreshold;

    long double peak = 0.0L;
    for (float v : gt) peak = std::max(peak, static_cast<long double>(v));
    long double se = 0.0L;
    long double total = 0.0L;
    long double on_bg = 0.0L;
    long double sum_gt = 0.0L;
    for (size_t p = 0; p < gt.size(); ++p) {
      const long double d = static_cast<long double>(est[p]) / peak - static_cast<long double>(gt[p]) / peak;
      se += d * d;
      total += est[p];
      sum_gt += gt[p];
      if (gt[p] < kCrowdThreshold) on_bg += est[p];
    }
    const long double mse = se / static_cast<long double>(gt.size());
    const long double psnr_o = mse == 0.0L ? 99.0L : std::min(99.0L, -10.0L * std::log10(mse));
    const long double bg_o = total < 1e-8L ? 0.0L : on_bg / total;
    worst_psnr = std::max(worst_psnr, std::abs(psnr(est, gt) - static_cast<double>(psnr_o)));
    worst_bg = std::max(worst_bg, std::abs(bg_ratio(est, bg) - static_cast<double>(bg_o)));

    EvalRecord r;
    r.count_est = static_cast<double>(total);
    r.count_gt = static_cast<double>(sum_gt);
    records.push_back(r);
    oracle.push_back({total, sum_gt});
  }
  long double abs_sum = 0.0L;
  long double sq_sum = 0.0L;
  for (const auto& o : oracle) {
    abs_sum += std::abs(o.est - o.gt);
    sq_sum += (o.est - o.gt) * (o.est - o.gt);
  }
  const double mae_err = std::abs(mae(records) - static_cast<double>(abs_sum / 50.0L));
  const double rmse_err = std::abs(rmse(records) - static_cast<double>(std::sqrt(sq_sum / 50.0L)));

  int violations = 0;
  std::uniform_int_distribution<int> n_rec(1, 60);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<EvalRecord> set(static_cast<size_t>(n_rec(rng)));
    const double spread = std::pow(10.0, u(rng) * 6.0 - 3.0);
    for (auto& r : set) {
      r.count_gt = u(rng) * 100.0;
      r.count_est = r.count_gt + (u(rng) - 0.5) * spread;
    }
    violations += rmse(set) < mae(set);
  }
  const double worst = std::max({mae_err, rmse_err, worst_psnr, worst_bg});
  return {worst <= 1e-9 && violations == 0,
          fmt("50 map pairs: max |lib - oracle| MAE %.1e RMSE %.1e PSNR %.1e r_bg %.1e (limit "
              "1e-9); RMSE < MAE in %d of 1000 trials",
              mae_err, rmse_err, worst_psnr, worst_bg, violations)};
}

// 10 -----------------------------------------------------------------------

std::vector<uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Every proper prefix must raise FormatError.
template <class Load>
int truncation_misses(const fs::path& dir, const std::vector<uint8_t>& bytes, size_t stride,
                      Load load) {
  int misses = 0;
  const fs::path p = dir / "truncated.bin";
  for (size_t n = 0; n < bytes.size(); n += (n < 64 ? 1 : stride)) {
    write_bytes(p, std::vector<uint8_t>(bytes.begin(), bytes.begin() + static_cast<long>(n)));
    try {
      load(p);
      ++misses;
    } catch (const FormatError&) {
    } catch (...) {
      ++misses;
    }
  }
  return misses;
}

Outcome determinism_and_formats() {
  const fs::path dir = fs::temp_directory_path() / "cfanet_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SynthOptions so;
  so.count = 3;
  so.width = so.height = 32;
  so.min_people = 4;
  so.max_people = 12;
  so.seed = 10;
  const auto samples = synth_dataset(so);
  ModelConfig mc;
  mc.width_mult = 0.125;
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr0 = 1e-3;
  tc.seed = 10;
  const TrainingSet set = prepare_training_set(samples, mc.k);
  const TrainRun a = train(mc, set, tc);
  const TrainRun b = train(mc, set, tc);
  save_checkpoint(dir / "a.ckpt", mc, a.params, &a.state);
  save_checkpoint(dir / "b.ckpt", mc, b.params, &b.state);
  const auto ca = read_bytes(dir / "a.ckpt");
  const bool same_ckpt = !ca.empty() && ca == read_bytes(dir / "b.ckpt");

  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "c.ckpt", loaded.config, loaded.params,
                  loaded.state ? &*loaded.state : nullptr);
  const bool ckpt_round = read_bytes(dir / "c.ckpt") == ca;

  const auto sigmas = adaptive_sigmas(samples[0].annotation.points, 32, 32);
  const DensityMap dm = render_density(samples[0].annotation, sigmas);
  write_dmap(dir / "m.dmap", dm);
  const DensityMap back = read_dmap(dir / "m.dmap");
  const bool dmap_round =
      back.height == dm.height && back.width == dm.width &&
      std::memcmp(back.raster.data(), dm.raster.data(), dm.raster.size() * sizeof(float)) == 0;

  const int dmap_misses = truncation_misses(dir, read_bytes(dir / "m.dmap"), 97,
                                            [](const fs::path& p) { read_dmap(p); });
  const int ckpt_misses = truncation_misses(dir, ca, 4099,
                                            [](const fs::path& p) { load_checkpoint(p); });
  fs::remove_all(dir);
  return {same_ckpt && ckpt_round && dmap_round && dmap_misses == 0 && ckpt_misses == 0,
          fmt("same-seed checkpoints identical: %s; checkpoint re-save identical: %s; DMAP "
              "bit-exact: %s; truncations without a format error: dmap %d, checkpoint %d",
              same_ckpt ? "yes" : "no", ckpt_round ? "yes" : "no", dmap_round ? "yes" : "no",
              dmap_misses, ckpt_misses)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", gradient_integrity},
      {2, "mass conservation", mass_conservation},
      {3, "ssim/sl identities", ssim_identities},
      {4, "attention identities", attention_identities},
      {5, "desk-scale overfit", desk_overfit},
      {6, "background loss direction", bl_direction},
      {7, "supervision direction", supervision_direction},
      {8, "branch direction", branch_direction},
      {9, "metrics oracle", metrics_oracle},
      {10, "determinism and formats", determinism_and_formats},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
