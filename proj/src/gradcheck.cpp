#include "cfanet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

#include "cfanet/losses.hpp"
#include "cfanet/model.hpp"

namespace cfanet {

namespace {

double evaluate(const GraphBuilder& build, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).item();
}

std::string where(size_t input, size_t entry) {
  return "input " + std::to_string(input) + " entry " + std::to_string(entry);
}

}  // namespace

GradcheckReport gradcheck(const std::string& name, const GraphBuilder& build,
                          std::vector<Tensor<double>> inputs, double tol,
                          const GradcheckOptions& options) {
  GradcheckReport report;
  report.name = name;
  report.tol = tol;

  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  const Var<double> loss = build(tape, vars);
  if (!std::isfinite(loss.item())) {
    report.failure = "non-finite loss";
    report.location = "output";
    return report;
  }
  tape.backward(loss);

  std::mt19937_64 rng(options.seed);
  for (size_t i = 0; i < inputs.size(); ++i) {
    const size_t n = inputs[i].numel();
    std::vector<double> analytic = tape.grad(vars[i]);
    if (analytic.empty()) analytic.assign(n, 0.0);

    std::vector<size_t> entries(n);
    std::iota(entries.begin(), entries.end(), size_t{0});
    if (options.max_entries != 0 && n > options.max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries);
      std::sort(entries.begin(), entries.end());
    }

    for (const size_t j : entries) {
      const double orig = inputs[i].data[j];
      inputs[i].data[j] = orig + options.step;
      const double up = evaluate(build, inputs);
      inputs[i].data[j] = orig - options.step;
      const double down = evaluate(build, inputs);
      inputs[i].data[j] = orig;

      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[j];
      if (options.kink_gap > 0.0 && std::isfinite(numeric)) {
        // Central differences at h and h/2 agree to O(h^2) on smooth stretches
        // and disagree when the stencil straddles a kink.
        const double half = options.step / 2.0;
        inputs[i].data[j] = orig + half;
        const double up2 = evaluate(build, inputs);
        inputs[i].data[j] = orig - half;
        const double down2 = evaluate(build, inputs);
        inputs[i].data[j] = orig;
        const double numeric2 = (up2 - down2) / (2.0 * half);
        const double scale = std::max({std::abs(numeric), std::abs(numeric2), options.floor});
        if (std::abs(numeric - numeric2) > options.kink_gap * scale) {
          ++report.skipped;
          continue;
        }
      }
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.failure = "non-finite gradient";
        report.location = where(i, j);
        report.passed = false;
        return report;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      if (report.location.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.location = where(i, j);
      }
      ++report.probed;
    }
  }
  report.passed = report.max_rel_error <= tol;
  if (!report.passed) report.failure = "relative error above tolerance";
  const size_t total = report.probed + report.skipped;
  if (report.passed && total > 0 &&
      static_cast<double>(report.skipped) > options.max_skipped_fraction * static_cast<double>(total)) {
    report.passed = false;
    report.failure = std::to_string(report.skipped) + " of " + std::to_string(total) +
                     " entries sit on kinks";
  }
  return report;
}


// ---- registry --------------------------------------------------------------

namespace {

Tensor<double> uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Values kept at least `gap` away from zero, so kinks sit outside the
// finite-difference stencil.
Tensor<double> off_zero(Shape s, std::mt19937_64& rng, double gap = 0.05) {
  Tensor<double> t = uniform(s, rng, gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data)
    if (sign(rng)) v = -v;
  return t;
}

// Distinct values on a shuffled grid, so no 2x2 block has a near tie.
Tensor<double> distinct(Shape s, std::mt19937_64& rng) {
  Tensor<double> t(s);
  for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = 0.1 * static_cast<double>(i) - 1.0;
  std::shuffle(t.data.begin(), t.data.end(), rng);
  return t;
}

std::vector<uint8_t> bits(size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.5);
  std::vector<uint8_t> m(n);
  for (auto& v : m) v = b(rng) ? 1 : 0;
  return m;
}

std::vector<uint8_t> classes(size_t n, int k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, k - 1);
  std::vector<uint8_t> m(n);
  for (auto& v : m) v = static_cast<uint8_t>(c(rng));
  return m;
}

// Weighted sum with fixed random weights: exercises every output entry.
Var<double> probe(Var<double> x, const Tensor<double>& w) {
  return sum(mul(x, x.tape->constant(w)));
}

GradcheckCase bsl_model_case(std::mt19937_64& rng) {
  ModelConfig config;
  config.width_mult = 0.125;
  config.init = InitScheme::kHe;
  const uint64_t init_seed = rng();
  Parameters<double> params = build_parameters<double>(config, init_seed);
  std::normal_distribution<double> head(0.0, 0.3);
  for (auto& e : params.entries) {
    // Live random heads: zero-initialized heads would hide the decoder path.
    if (e.name.starts_with("dme.head") || e.name.starts_with("dme.out")) {
      for (auto& v : e.value.data) v = e.name.ends_with(".bias") ? 0.2 : head(rng);
    }
  }
  const Shape img{1, 3, 16, 16};
  const size_t px = 16 * 16;
  Tensor<double> target = uniform(Shape{1, 1, 16, 16}, rng, 0.0, 2.0);
  LossTargets targets;
  targets.cam = bits(px, rng);
  targets.bg_mask.resize(px);
  for (size_t i = 0; i < px; ++i) targets.bg_mask[i] = targets.cam[i] ? 0 : 1;
  targets.fam = classes(px, config.k, rng);

  GradcheckCase c;
  c.name = "bsl-total-loss-16x16";
  c.inputs.push_back(uniform(img, rng, 0.0, 1.0));
  for (auto& e : params.entries) c.inputs.push_back(std::move(e.value));
  c.build = [config, target, targets](Tape<double>& tape, std::span<const Var<double>> in) {
    const auto out = forward<double>(config, in.subspan(1), in[0]);
    LossWeights w;
    w.lambda = 0.7;
    w.mu = 0.4;
    return total_loss(out, tape.constant(target), targets, w, LossOptions{}).total;
  };
  c.options.max_entries = 3;
  c.options.kink_gap = 5e-5;
  c.options.seed = rng();
  return c;
}

}  // namespace

std::vector<GradcheckCase> registered_gradchecks(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor<double>> inputs, GraphBuilder build) {
    cases.push_back({std::move(name), std::move(build), std::move(inputs), {}});
  };
  // Every op output is reduced through a random weighting.
  auto unary = [&](std::string name, Tensor<double> x, Shape out,
                   std::function<Var<double>(Var<double>)> op) {
    const Tensor<double> w = uniform(out, rng, -1.0, 1.0);
    add_case(std::move(name), {std::move(x)},
             [op, w](Tape<double>&, std::span<const Var<double>> in) { return probe(op(in[0]), w); });
  };

  for (const auto& [label, k, dil] :
       {std::tuple{"conv2d-3x3", 3, 1}, std::tuple{"conv2d-3x3-dilation2", 3, 2},
        std::tuple{"conv2d-1x1", 1, 1}}) {
    const ConvSpec spec = ConvSpec::same(3, k, dil);
    const Tensor<double> w = uniform(Shape{1, 3, 7, 6}, rng, -1.0, 1.0);
    add_case(label,
             {uniform(Shape{1, 2, 7, 6}, rng, -1, 1), uniform(Shape{3, 2, k, k}, rng, -1, 1),
              uniform(Shape{3, 1, 1, 1}, rng, -1, 1)},
             [spec, w](Tape<double>&, std::span<const Var<double>> in) {
               return probe(conv2d(in[0], in[1], in[2], spec), w);
             });
  }
  unary("upsample_bilinear2x", uniform(Shape{1, 2, 3, 4}, rng, -1, 1), Shape{1, 2, 6, 8},
        [](Var<double> x) { return upsample_bilinear2x(x); });
  unary("upsample_bilinear-x8", uniform(Shape{1, 1, 2, 3}, rng, -1, 1), Shape{1, 1, 16, 24},
        [](Var<double> x) { return upsample_bilinear(x, 8); });
  unary("avgpool2-even", uniform(Shape{1, 2, 4, 6}, rng, -1, 1), Shape{1, 2, 2, 3},
        [](Var<double> x) { return avgpool2(x); });
  unary("avgpool2-odd", uniform(Shape{1, 1, 5, 3}, rng, -1, 1), Shape{1, 1, 3, 2},
        [](Var<double> x) { return avgpool2(x); });
  unary("maxpool2", distinct(Shape{1, 2, 4, 6}, rng), Shape{1, 2, 2, 3},
        [](Var<double> x) { return maxpool2(x); });
  {
    const std::vector<double> taps{0.1, 0.3, 0.4, 0.2};
    unary("separable_filter", uniform(Shape{1, 1, 7, 6}, rng, -1, 1), Shape{1, 1, 4, 3},
          [taps](Var<double> x) { return separable_filter(x, std::span<const double>(taps)); });
  }
  const Shape s{1, 2, 3, 3};
  unary("relu", off_zero(s, rng), s, [](Var<double> x) { return relu(x); });
  unary("sigmoid", uniform(s, rng, -3, 3), s, [](Var<double> x) { return sigmoid(x); });
  unary("square", uniform(s, rng, -1, 1), s, [](Var<double> x) { return square(x); });
  unary("scale", uniform(s, rng, -1, 1), s, [](Var<double> x) { return scale(x, -2.5); });
  unary("add_scalar", uniform(s, rng, -1, 1), s, [](Var<double> x) { return add_scalar(x, 0.7); });
  unary("sum", uniform(s, rng, -1, 1), Shape{1, 1, 1, 1}, [](Var<double> x) { return sum(x); });
  unary("mean", uniform(s, rng, -1, 1), Shape{1, 1, 1, 1}, [](Var<double> x) { return mean(x); });
  unary("channel_softmax", uniform(Shape{1, 4, 2, 3}, rng, -2, 2), Shape{1, 4, 2, 3},
        [](Var<double> x) { return channel_softmax(x); });
  {
    const std::vector<double> cw{0.0, 0.25, 0.5, 1.0};
    unary("channel_weighted_sum", uniform(Shape{1, 4, 2, 3}, rng, -1, 1), Shape{1, 1, 2, 3},
          [cw](Var<double> x) { return channel_weighted_sum(x, std::span<const double>(cw)); });
  }
  for (const auto& [label, op] :
       std::vector<std::pair<std::string, std::function<Var<double>(Var<double>, Var<double>)>>>{
           {"add", [](Var<double> a, Var<double> b) { return add(a, b); }},
           {"sub", [](Var<double> a, Var<double> b) { return sub(a, b); }},
           {"mul", [](Var<double> a, Var<double> b) { return mul(a, b); }},
           {"div", [](Var<double> a, Var<double> b) { return div(a, b); }}}) {
    const Tensor<double> w = uniform(s, rng, -1.0, 1.0);
    add_case(label, {uniform(s, rng, -1, 1), uniform(s, rng, 0.5, 1.5)},
             [op, w](Tape<double>&, std::span<const Var<double>> in) {
               return probe(op(in[0], in[1]), w);
             });
  }
  {
    const auto target = bits(12, rng);
    add_case("bce_with_logits", {uniform(Shape{1, 1, 3, 4}, rng, -3, 3)},
             [target](Tape<double>&, std::span<const Var<double>> in) {
               return bce_with_logits(in[0], target);
             });
    const auto cls = classes(12, 5, rng);
    add_case("softmax_cross_entropy", {uniform(Shape{1, 5, 3, 4}, rng, -2, 2)},
             [cls](Tape<double>&, std::span<const Var<double>> in) {
               return softmax_cross_entropy(in[0], cls);
             });
  }
  const Shape m{1, 1, 14, 13};
  add_case("ssim", {uniform(m, rng, 0, 1), uniform(m, rng, 0, 1)},
           [](Tape<double>&, std::span<const Var<double>> in) { return ssim(in[0], in[1]); });
  add_case("structural_loss", {uniform(Shape{1, 1, 24, 22}, rng, 0, 1),
                               uniform(Shape{1, 1, 24, 22}, rng, 0, 1)},
           [](Tape<double>&, std::span<const Var<double>> in) {
             return structural_loss(in[0], in[1]);
           });
  {
    const auto bg = bits(m.numel(), rng);
    add_case("background_loss", {uniform(m, rng, 0, 1)},
             [bg](Tape<double>&, std::span<const Var<double>> in) {
               return background_loss(in[0], bg);
             });
  }
  add_case("mse_loss", {uniform(m, rng, 0, 1), uniform(m, rng, 0, 1)},
           [](Tape<double>&, std::span<const Var<double>> in) { return mse_loss(in[0], in[1]); });
  add_case("ssim_loss", {uniform(m, rng, 0, 1), uniform(m, rng, 0, 1)},
           [](Tape<double>&, std::span<const Var<double>> in) { return ssim_loss(in[0], in[1]); });
  {
    const Tensor<double> w = uniform(Shape{1, 1, 3, 4}, rng, -1.0, 1.0);
    add_case("refine_attention",
             {uniform(Shape{1, 6, 3, 4}, rng, -2, 2), uniform(Shape{1, 1, 3, 4}, rng, -2, 2)},
             [w](Tape<double>&, std::span<const Var<double>> in) {
               return probe(refine_attention(in[0], in[1], 6), w);
             });
    const Tensor<double> wf = uniform(Shape{1, 3, 3, 4}, rng, -1.0, 1.0);
    add_case("fuse", {uniform(Shape{1, 3, 3, 4}, rng, -1, 1), uniform(Shape{1, 1, 3, 4}, rng, 0, 2)},
             [wf](Tape<double>&, std::span<const Var<double>> in) {
               return probe(fuse(in[0], in[1]), wf);
             });
  }
  cases.push_back(bsl_model_case(rng));
  return cases;
}

std::vector<GradcheckReport> run_gradchecks(const std::vector<GradcheckCase>& cases, double tol) {
  std::vector<GradcheckReport> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(gradcheck(c.name, c.build, c.inputs, tol, c.options));
  return out;
}

}  // namespace cfanet
