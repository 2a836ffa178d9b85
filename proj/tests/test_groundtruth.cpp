#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cfanet/groundtruth.hpp"
#include "cfanet/tensor.hpp"

using namespace cfanet;

namespace {

// All-pairs kNN, no partial sort, clamp applied afterwards.
std::vector<double> brute_sigmas(const std::vector<Point>& pts, int64_t w, int64_t h) {
  const double cap = 0.25 * static_cast<double>(std::min(w, h));
  std::vector<double> out;
  for (size_t i = 0; i < pts.size(); ++i) {
    double s = 15.0;
    if (pts.size() >= 4) {
      std::vector<double> d;
      for (size_t j = 0; j < pts.size(); ++j) {
        if (j == i) continue;
        const double dx = pts[i].x - pts[j].x;
        const double dy = pts[i].y - pts[j].y;
        d.push_back(std::sqrt(dx * dx + dy * dy));
      }
      std::sort(d.begin(), d.end());
      s = (d[0] + d[1] + d[2]) / 3.0;
    }
    out.push_back(std::clamp(s, 1.0, cap));
  }
  return out;
}

std::vector<Point> random_points(std::mt19937_64& rng, int n, double w, double h) {
  std::uniform_real_distribution<double> ux(0.0, w), uy(0.0, h);
  std::vector<Point> pts;
  for (int i = 0; i < n; ++i) pts.push_back({ux(rng), uy(rng)});
  return pts;
}

DensityMap map_of(std::vector<float> values) {
  DensityMap dm;
  dm.height = 1;
  dm.width = static_cast<int64_t>(values.size());
  dm.raster = std::move(values);
  return dm;
}

}  // namespace

TEST_CASE("adaptive sigma: square corners") {
  const std::vector<Point> pts{{10, 10}, {20, 10}, {10, 20}, {20, 20}};
  const auto s = adaptive_sigmas(pts, 100, 100);
  const double expected = (10.0 + 10.0 + std::sqrt(200.0)) / 3.0;
  for (double v : s) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(11.3807).epsilon(1e-5));
  // 40x40 image caps sigma at 10.
  for (double v : adaptive_sigmas(pts, 40, 40)) CHECK(v == 10.0);
}

TEST_CASE("adaptive sigma: fallback and floor") {
  const std::vector<Point> one{{5, 5}};
  CHECK(adaptive_sigmas(one, 100, 100)[0] == 15.0);
  CHECK(adaptive_sigmas(one, 20, 20)[0] == 5.0);

  const std::vector<Point> pts{{10, 10}, {10, 10}, {10.5, 10}, {90, 90}};
  const auto s = adaptive_sigmas(pts, 100, 100);
  CHECK(s == brute_sigmas(pts, 100, 100));
  const std::vector<Point> tight{{10, 10}, {10, 10}, {10.5, 10}, {10, 10.5}};
  for (double v : adaptive_sigmas(tight, 100, 100)) CHECK(v == 1.0);
}

TEST_CASE("adaptive sigma matches brute force") {
  std::mt19937_64 rng(7);
  for (int n : {0, 1, 3, 4, 5, 17, 120, 500}) {
    const auto pts = random_points(rng, n, 96, 64);
    const auto s = adaptive_sigmas(pts, 96, 64);
    CHECK(s == brute_sigmas(pts, 96, 64));
  }
}

TEST_CASE("render density: normalization") {
  PointAnnotation a{"x", 32, 24, {}};
  const std::vector<double> none;
  auto dm = render_density(a, none);
  CHECK(dm.raster.size() == 32u * 24u);
  CHECK(dm.count() == 0.0);

  a.points = {{3.3, 20.1}};
  const std::vector<double> s1{4.0};
  CHECK(render_density(a, s1).count() == doctest::Approx(1.0).epsilon(1e-6));

  a.points = {{0.2, 0.1}, {1.0, 0.5}, {0.7, 1.9}};
  const std::vector<double> s3{6.0, 6.0, 6.0};
  dm = render_density(a, s3);
  CHECK(std::abs(dm.count() - 3.0) <= 3e-3);
  CHECK(std::all_of(dm.raster.begin(), dm.raster.end(), [](float v) { return v >= 0.0f; }));

  CHECK_THROWS_AS(render_density(a, s1), InvalidArgument);
}

TEST_CASE("render density: peak sits at the head") {
  PointAnnotation a{"x", 40, 40, {{20.5, 12.5}}};
  const std::vector<double> s{2.0};
  const auto dm = render_density(a, s);
  const auto peak = std::max_element(dm.raster.begin(), dm.raster.end()) - dm.raster.begin();
  CHECK(peak == 12 * 40 + 20);
}

TEST_CASE("mass conservation over random annotations") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> count(1, 200);
  for (int trial = 0; trial < 100; ++trial) {
    PointAnnotation a{"r", 64, 48, random_points(rng, count(rng), 64, 48)};
    const auto dm = render_density(a, adaptive_sigmas(a.points, a.width, a.height));
    const double n = static_cast<double>(a.points.size());
    REQUIRE(std::abs(dm.count() - n) <= 1e-3 * n);
  }
}

TEST_CASE("validate rejects out-of-bounds points with the image id") {
  PointAnnotation a{"scene_7", 10, 10, {{9.99, 0.0}}};
  CHECK_NOTHROW(a.validate());
  a.points.push_back({10.0, 3.0});
  try {
    a.validate();
    FAIL("expected throw");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("scene_7") != std::string::npos);
  }
  a.points = {{1.0, -0.1}};
  CHECK_THROWS_AS(a.validate(), InvalidArgument);
}

TEST_CASE("cam threshold is inclusive") {
  CHECK(make_cam(map_of({0, 0, 0})) == std::vector<uint8_t>{0, 0, 0});
  CHECK(make_cam(map_of({0, 1e-5f, 9e-6f})) == std::vector<uint8_t>{0, 1, 0});

  PointAnnotation a{"x", 40, 40, {{20, 20}}};
  const std::vector<double> s{3.0};
  const auto dm = render_density(a, s);
  const auto cam = make_cam(dm);
  CHECK(cam[20 * 40 + 20] == 1);
  CHECK(cam[0] == 0);
  // Disk-like: every row of the mask is one contiguous run.
  for (int y = 0; y < 40; ++y) {
    int runs = 0;
    for (int x = 0; x < 40; ++x) {
      if (cam[y * 40 + x] && (x == 0 || !cam[y * 40 + x - 1])) ++runs;
    }
    CHECK(runs <= 1);
  }
}

TEST_CASE("class thresholds") {
  std::vector<float> v;
  for (int level = 1; level <= 5; ++level)
    for (int i = 0; i < 40; ++i) v.push_back(0.1f * static_cast<float>(level));
  std::shuffle(v.begin(), v.end(), std::mt19937_64(3));
  const std::vector<DensityMap> ds{map_of(v)};
  const auto t = compute_class_thresholds(ds, 6);
  // Sort-and-index: lower boundary of each equal-count group.
  std::vector<float> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<float> expected;
  for (int c = 4; c >= 0; --c) expected.push_back(sorted[c * 40]);
  CHECK(t == expected);
  CHECK(std::is_sorted(t.begin(), t.end(), std::greater<>()));
  // Each group lands in its own class.
  const auto fam = make_fam(ds[0], t, 6);
  for (size_t i = 0; i < v.size(); ++i) {
    CHECK(fam[i] == static_cast<uint8_t>(std::lround(v[i] * 10.0f)));
  }

  const std::vector<DensityMap> flat{map_of(std::vector<float>(30, 0.3f))};
  const auto tf = compute_class_thresholds(flat, 6);
  CHECK(tf == std::vector<float>(5, 0.3f));
  for (auto c : make_fam(flat[0], tf, 6)) CHECK(c == 5);

  const std::vector<DensityMap> two{map_of({0.0f, 0.2f, 0.05f, 0.7f})};
  const auto t2 = compute_class_thresholds(two, 2);
  CHECK(t2 == std::vector<float>{0.05f});
  CHECK(make_fam(two[0], t2, 2) == make_cam(two[0]));

  const std::vector<DensityMap> empty{map_of({0.0f, 1e-6f})};
  CHECK_THROWS_WITH_AS(compute_class_thresholds(empty, 6), "empty crowd support",
                       InvalidArgument);
  CHECK_THROWS_AS(compute_class_thresholds(two, 1), InvalidArgument);
}

TEST_CASE("fam classification") {
  const std::vector<float> cut{0.4f, 0.3f, 0.2f, 0.1f, 0.01f};
  const auto fam = make_fam(map_of({1e-6f, 0.9f, 0.25f, 0.005f, 0.1f, 0.4f}), cut, 6);
  // Linear scan oracle: number of cutoffs at or below the value.
  CHECK(fam == std::vector<uint8_t>{0, 5, 3, 1, 2, 5});
  const std::vector<float> ascending{0.01f, 0.1f, 0.2f, 0.3f, 0.4f};
  CHECK_THROWS_AS(make_fam(map_of({0.1f}), ascending, 6), InvalidArgument);
  CHECK_THROWS_AS(make_fam(map_of({0.1f}), cut, 5), InvalidArgument);
}

TEST_CASE("fam monotone and consistent with cam") {
  std::mt19937_64 rng(5);
  PointAnnotation a{"m", 48, 48, random_points(rng, 40, 48, 48)};
  const auto dm = render_density(a, adaptive_sigmas(a.points, 48, 48));
  const std::vector<DensityMap> ds{dm};
  const auto t = make_targets(dm, compute_class_thresholds(ds, 6), 6);
  std::vector<size_t> order(dm.raster.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t i, size_t j) { return dm.raster[i] < dm.raster[j]; });
  for (size_t i = 1; i < order.size(); ++i) {
    CHECK(t.fam[order[i]] >= t.fam[order[i - 1]]);
  }
  for (size_t i = 0; i < t.fam.size(); ++i) CHECK((t.fam[i] >= 1) == (t.cam[i] == 1));
  CHECK(t.k == 6);
  CHECK(t.thresholds.size() == 5u);
}
