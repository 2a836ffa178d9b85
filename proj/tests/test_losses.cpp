#include <doctest.h>

#include <cmath>

#include "cfanet/losses.hpp"
#include "test_util.hpp"

using namespace cfanet;

namespace {

constexpr double kC1Ratio = 0.01 / 1.01;

}  // namespace

TEST_CASE("ssim window") {
  const auto w = ssim_window<double>({});
  CHECK(w.shape == Shape{1, 1, 11, 11});
  double s = 0.0;
  for (double v : w.data) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w.data[5 * 11 + 5] > w.data[0]);
}

TEST_CASE("ssim identities") {
  Tape<double> tape;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto x = tape.constant(testing::random_tensor<double>(Shape{1, 1, 20, 17}, seed, 0.0, 3.0));
    auto y = tape.constant(testing::random_tensor<double>(Shape{1, 1, 20, 17}, seed + 100, 0.0, 3.0));
    CHECK(std::abs(ssim(x, x).item() - 1.0) <= 1e-9);
    CHECK(ssim(x, y).item() == ssim(y, x).item());
    CHECK(ssim(x, y).item() <= 1.0);
  }
  auto zero = tape.constant(Shape{1, 1, 16, 16}, 0.0);
  auto one = tape.constant(Shape{1, 1, 16, 16}, 1.0);
  CHECK(ssim(zero, one).item() == doctest::Approx(kC1Ratio).epsilon(1e-9));
  CHECK_THROWS_AS(ssim(zero, tape.constant(Shape{1, 1, 16, 15}, 0.0)), InvalidArgument);
}

TEST_CASE("structural loss") {
  Tape<double> tape;
  CHECK(valid_ssim_scales(88, 88, {}) == 3);
  CHECK(valid_ssim_scales(43, 88, {}) == 3);  // odd sides round up
  CHECK(valid_ssim_scales(40, 88, {}) == 2);
  CHECK(valid_ssim_scales(10, 88, {}) == 0);
  auto zero = tape.constant(Shape{1, 1, 88, 88}, 0.0);
  auto one = tape.constant(Shape{1, 1, 88, 88}, 1.0);
  CHECK(structural_loss(zero, one).item() == doctest::Approx(1.0 - kC1Ratio).epsilon(1e-9));
  CHECK(1.0 - kC1Ratio == doctest::Approx(0.990099).epsilon(1e-6));
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto x = tape.constant(testing::random_tensor<double>(Shape{1, 1, 44, 44}, seed, 0.0, 2.0));
    auto y = tape.constant(testing::random_tensor<double>(Shape{1, 1, 44, 44}, seed + 7, 0.0, 2.0));
    CHECK(std::abs(structural_loss(x, x).item()) <= 1e-9);
    const double xy = structural_loss(x, y).item();
    CHECK(xy == structural_loss(y, x).item());
    CHECK(xy >= 0.0);
    CHECK(xy <= 2.0);
  }
}

TEST_CASE("background loss") {
  Tape<double> tape;
  // 2 units on background, 8 on crowd.
  auto est = tape.constant(Tensor<double>(Shape{1, 1, 1, 4}, {1.0, 1.0, 5.0, 3.0}));
  const std::vector<uint8_t> bg{1, 1, 0, 0};
  CHECK(background_loss(est, bg).item() == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(background_loss(est, std::vector<uint8_t>{0, 0, 0, 0}).item() == 0.0);
  CHECK(background_loss(tape.constant(Shape{1, 1, 1, 4}, 0.0), bg).item() == 0.0);
  auto scaled = tape.constant(Tensor<double>(Shape{1, 1, 1, 4}, {7.0, 7.0, 35.0, 21.0}));
  CHECK(background_loss(scaled, bg).item() == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("baseline losses") {
  Tape<double> tape;
  auto zero = tape.constant(Shape{1, 1, 16, 16}, 0.0);
  auto one = tape.constant(Shape{1, 1, 16, 16}, 1.0);
  auto x = tape.constant(testing::random_tensor<double>(Shape{1, 1, 16, 16}, 3, 0.0, 1.0));
  CHECK(mse_loss(x, x).item() == 0.0);
  CHECK(mse_loss(zero, one).item() == 1.0);
  CHECK(std::abs(ssim_loss(x, x).item()) <= 1e-9);
  CHECK(ssim_loss(zero, one).item() == doctest::Approx(1.0 - kC1Ratio).epsilon(1e-9));
}

TEST_CASE("weight schedule") {
  const auto w0 = weight_schedule(0, 100);
  CHECK(w0.lambda == 1.0);
  CHECK(w0.mu == 1.0);
  CHECK(w0.w_density == 1.0);
  CHECK(weight_schedule(30, 100).lambda == doctest::Approx(0.55).epsilon(1e-12));
  CHECK(weight_schedule(60, 100).mu == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(weight_schedule(99, 100).lambda == doctest::Approx(0.1).epsilon(1e-12));
  double prev = 2.0;
  for (int e = 0; e < 100; ++e) {
    const auto w = weight_schedule(e, 100);
    CHECK(w.lambda <= prev);
    CHECK(w.lambda >= 0.1 - 1e-12);
    CHECK(w.lambda == w.mu);
    prev = w.lambda;
  }
}

namespace {

struct Fixture {
  static constexpr int64_t kSide = 24;
  Tape<double> tape;
  ModelOutputs<double> out;
  Var<double> target;
  LossTargets targets;

  explicit Fixture(uint64_t seed) {
    const Shape one{1, 1, kSide, kSide};
    target = tape.constant(testing::random_tensor<double>(one, seed, 0.0, 1.0));
    const size_t n = one.numel();
    targets.cam = testing::random_mask(n, seed + 1);
    targets.bg_mask.resize(n);
    for (size_t i = 0; i < n; ++i) targets.bg_mask[i] = 1 - targets.cam[i];
    targets.fam = testing::random_classes(n, 6, seed + 2);
    out.has_cam = out.has_fam = true;
    for (int s = 0; s < 4; ++s) {
      out.density[s] = tape.constant(testing::random_tensor<double>(one, seed + 10 + s, 0.0, 1.0));
      out.cam_logits[s] = tape.constant(testing::random_tensor<double>(one, seed + 20 + s));
      out.fam_logits[s] =
          tape.constant(testing::random_tensor<double>(Shape{1, 6, kSide, kSide}, seed + 30 + s));
    }
  }
};

double stage_term(Fixture& f, int s, const LossWeights& w) {
  return structural_loss(f.out.density[s], f.target).item() +
         background_loss(f.out.density[s], f.targets.bg_mask).item() +
         w.lambda * cam_cross_entropy(f.out.cam_logits[s], f.targets.cam).item() +
         w.mu * fam_cross_entropy(f.out.fam_logits[s], f.targets.fam).item();
}

}  // namespace

TEST_CASE("total loss sums the enabled stages") {
  Fixture f(11);
  LossWeights w;
  w.lambda = 0.7;
  w.mu = 0.4;
  LossOptions all;
  double expected = 0.0;
  for (int s = 0; s < 4; ++s) expected += stage_term(f, s, w);
  CHECK(total_loss(f.out, f.target, f.targets, w, all).total.item() ==
        doctest::Approx(expected).epsilon(1e-12));

  LossOptions last;
  last.supervision = {false, false, false, true};
  CHECK(total_loss(f.out, f.target, f.targets, w, last).total.item() ==
        doctest::Approx(stage_term(f, 3, w)).epsilon(1e-12));
}

TEST_CASE("zero classification weights leave the density terms") {
  Fixture f(12);
  LossWeights w;
  w.lambda = 0.0;
  w.mu = 0.0;
  double expected = 0.0;
  for (int s = 0; s < 4; ++s) {
    expected += structural_loss(f.out.density[s], f.target).item() +
                background_loss(f.out.density[s], f.targets.bg_mask).item();
  }
  const auto r = total_loss(f.out, f.target, f.targets, w, LossOptions{});
  CHECK(r.total.item() == doctest::Approx(expected).epsilon(1e-12));

  LossOptions no_bl;
  no_bl.enable_bl = false;
  const auto r2 = total_loss(f.out, f.target, f.targets, w, no_bl);
  CHECK(r2.terms.bl == 0.0);
  CHECK(r2.total.item() < r.total.item());
}

TEST_CASE("perfect outputs give a near-zero loss") {
  Tape<double> tape;
  const Shape one{1, 1, 16, 16};
  Tensor<double> gt(one, 0.0);
  LossTargets t;
  t.cam.assign(one.numel(), 0);
  t.fam.assign(one.numel(), 0);
  for (int64_t y = 4; y < 12; ++y) {
    for (int64_t x = 4; x < 12; ++x) {
      const size_t i = static_cast<size_t>(y * 16 + x);
      gt.data[i] = 0.5;
      t.cam[i] = 1;
      t.fam[i] = 3;
    }
  }
  t.bg_mask.resize(t.cam.size());
  for (size_t i = 0; i < t.cam.size(); ++i) t.bg_mask[i] = 1 - t.cam[i];
  Tensor<double> cam(one), fam(Shape{1, 6, 16, 16}, -20.0);
  for (size_t i = 0; i < one.numel(); ++i) {
    cam.data[i] = t.cam[i] ? 20.0 : -20.0;
    fam.data[t.fam[i] * one.numel() + i] = 20.0;
  }
  ModelOutputs<double> out;
  out.has_cam = out.has_fam = true;
  for (int s = 0; s < 4; ++s) {
    out.density[s] = tape.constant(gt);
    out.cam_logits[s] = tape.constant(cam);
    out.fam_logits[s] = tape.constant(fam);
  }
  const auto r = total_loss(out, tape.constant(gt), t, LossWeights{}, LossOptions{});
  CHECK(r.total.item() <= 1e-3);
}

TEST_CASE("loss kind names") {
  for (auto k : {LossKind::kBsl, LossKind::kSlOnly, LossKind::kMse, LossKind::kSsimOnly}) {
    CHECK(parse_loss_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_loss_kind("l1"), InvalidArgument);
}
