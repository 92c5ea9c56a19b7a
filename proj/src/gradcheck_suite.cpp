#include "ctun/gradcheck_suite.hpp"

#include <random>

#include "ctun/grad_check.hpp"
#include "ctun/model.hpp"
#include "ctun/ops.hpp"
#include "ctun/trainer.hpp"

namespace ctun {

bool SuiteCase::passed() const {
  if (!(max_rel_error < tolerance)) return false;
  const std::size_t total = coords_checked + coords_skipped;
  return total > 0 && static_cast<double>(coords_skipped) <= max_skip_fraction * static_cast<double>(total);
}

namespace {

constexpr DType f64 = DType::f64;

struct Inputs {
  std::mt19937_64 rng;

  Tensor uniform(const Shape& s, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(s, rng, lo, hi, f64);
  }
  // Values with |v| >= margin, so no stencil crosses a kink at 0.
  Tensor away_from_zero(const Shape& s, double margin) {
    std::uniform_real_distribution<double> mag(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(s.numel());
    for (double& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return Tensor::from_values(s, v, f64);
  }
};

SuiteCase op_case(const std::string& name, const std::function<Tensor()>& f,
                  std::vector<Tensor> params) {
  const GradCheckResult r = grad_check(f, std::move(params));
  return {name, r.max_rel_error, kOpTolerance, r.coords_checked, r.coords_skipped, 0.0};
}

SuiteCase end_to_end_case(UgruVariant variant, std::uint64_t seed) {
  CtunConfig cfg;
  cfg.channels = 4;
  cfg.blocks = BlockCounts{1, 1, 1};
  cfg.ugru_variant = variant;
  ParamStore p = init_params(cfg, seed + 5, f64);
  std::mt19937_64 rng(seed + 25);
  constexpr int n = 3;
  std::vector<Tensor> frames, targets;
  for (int i = 0; i < n; ++i) frames.push_back(Tensor::uniform(Shape{1, 3, 8, 8}, rng, 0, 1, f64));
  for (int i = 0; i < n; ++i) targets.push_back(Tensor::uniform(Shape{1, 3, 32, 32}, rng, 0, 1, f64));
  auto loss = [&] {
    Tensor total;
    run_sequence(
        n, [&](int i) { return frames[i]; },
        [&](int i, Tensor y) {
          const Tensor l = charbonnier_loss(y, targets[i]);
          total = total.defined() ? add(total, l) : l;
        },
        p, cfg);
    return total;
  };
  // The model has many relu/max kinks; see GradCheckOptions.
  GradCheckOptions opts;
  opts.five_point = true;
  opts.skip_nonsmooth = true;
  opts.abs_floor = 1e-6;
  opts.max_coords_per_param = 24;
  opts.seed = seed;
  const GradCheckResult r = grad_check(loss, p.tensors(), opts);
  return {std::string("end_to_end_") + to_string(variant), r.max_rel_error, kEndToEndTolerance,
          r.coords_checked, r.coords_skipped, 0.1};
}

}  // namespace

std::vector<SuiteCase> run_gradcheck_suite(std::uint64_t seed,
                                           const std::function<void(const SuiteCase&)>& on_case) {
  Inputs in{std::mt19937_64(seed)};
  const Shape s{2, 4, 4, 4};
  Tensor a = in.away_from_zero(s, 0.01);
  Tensor b = in.uniform(s);
  Tensor pos = in.uniform(s, 0.5, 2.0);
  Tensor r = in.uniform(s);
  Tensor r1 = in.uniform({2, 1, 4, 4});
  Tensor rs = in.uniform({2, 1, 8, 8});
  Tensor rb = in.uniform({2, 4, 8, 8});
  Tensor u = in.uniform({2, 4, 8, 8});
  Tensor r16 = in.uniform({2, 16, 4, 4});
  Tensor x5 = in.uniform({2, 2, 5, 5});
  Tensor w3 = in.uniform({3, 2, 3, 3});
  Tensor b3 = in.uniform({1, 3, 1, 1});
  Tensor r3 = in.uniform({2, 3, 5, 5});
  Tensor ks = in.uniform({3, 4, 3, 3});
  Tensor rk = in.uniform({2, 3, 2, 2});
  Tensor w1 = in.uniform({5, 4, 1, 1});
  Tensor b5 = in.uniform({1, 5, 1, 1});
  Tensor r5 = in.uniform({2, 5, 4, 4});
  Tensor g4 = in.uniform({1, 4, 1, 1}, 0.5, 1.5);
  Tensor be4 = in.uniform({1, 4, 1, 1});
  Tensor t8 = in.uniform({1, 2, 8, 8}, 0, 1);
  const std::vector<int> sizes{1, 3};
  const double kink_margin = 20 * 1e-4;
  Tensor k = in.away_from_zero(s, kink_margin);
  Tensor ta = in.uniform({1, 2, 8, 8}, 0, 1);

  struct Spec {
    const char* name;
    std::function<Tensor()> f;
    std::vector<Tensor> params;
  };
  const std::vector<Spec> specs{
      {"conv2d", [&] { return sum(mul(conv2d(x5, w3, b3, 1, 1), r3)); }, {x5, w3, b3}},
      {"conv2d_strided", [&] { return sum(mul(conv2d(b, ks, Tensor(), 3, 1), rk)); }, {b, ks}},
      {"conv1x1", [&] { return sum(mul(conv1x1(b, w1, b5), r5)); }, {b, w1, b5}},
      {"layer_norm", [&] { return sum(mul(layer_norm(b, g4, be4), r)); }, {b, g4, be4}},
      {"pixel_shuffle", [&] { return sum(mul(pixel_shuffle(b, 2), rs)); }, {b}},
      {"pixel_unshuffle", [&] { return sum(mul(pixel_unshuffle(u, 2), r16)); }, {u}},
      {"bilinear_resize", [&] { return sum(mul(bilinear_resize(b, 2.0), rb)); }, {b}},
      {"concat_split",
       [&] {
         auto parts = split_channels(b, sizes);
         return sum(mul(concat_channels({parts[1], parts[0]}), r));
       },
       {b}},
      {"sigmoid", [&] { return sum(mul(sigmoid(b), r)); }, {b}},
      {"tanh", [&] { return sum(mul(tanh_(b), r)); }, {b}},
      {"leaky_relu", [&] { return sum(mul(leaky_relu(k, 0.1), r)); }, {k}},
      {"relu", [&] { return sum(mul(relu(k), r)); }, {k}},
      {"sqrt", [&] { return sum(mul(sqrt_(pos), r)); }, {pos}},
      {"abs", [&] { return sum(mul(abs_(a), r)); }, {a}},
      {"add_sub_mul", [&] { return sum(mul(sub(add(a, b), mul(a, b)), r)); }, {a, b}},
      {"scale_add_scalar", [&] { return sum(mul(add_scalar(scale(b, -2.5), 0.3), r)); }, {b}},
      {"sum_mean", [&] { return add(mean(mul(b, b)), scale(sum(b), 0.1)); }, {b}},
      {"channel_mean", [&] { return sum(mul(channel_mean(b), r1)); }, {b}},
      {"channel_max", [&] { return sum(mul(channel_max(b), r1)); }, {b}},
      {"tile_channels", [&] { return sum(mul(tile_channels(channel_mean(b), 4), r)); }, {b}},
      {"global_avg_pool", [&] { return sum(mul(expand_spatial(global_avg_pool(b), 4, 4), r)); }, {b}},
      {"crop", [&] { return sum(mul(crop(b, 1, 0, 2, 3), crop(r, 0, 1, 2, 3))); }, {b}},
      {"fft2d",
       [&] {
         const auto [re, im] = fft2d(t8);
         return add(sum(mul(re, ta)), sum(mul(im, scale(ta, -0.5))));
       },
       {t8}},
  };

  std::vector<SuiteCase> out;
  auto record = [&](SuiteCase c) {
    if (on_case) on_case(c);
    out.push_back(std::move(c));
  };
  for (const auto& sp : specs) record(op_case(sp.name, sp.f, sp.params));
  {
    // Curvature near pred == target is about 1/eps; the central difference
    // needs the higher-order stencil there.
    GradCheckOptions opts;
    opts.five_point = true;
    const GradCheckResult res = grad_check([&] { return charbonnier_loss(t8, ta); }, {t8}, opts);
    record({"charbonnier_loss", res.max_rel_error, kOpTolerance, res.coords_checked, res.coords_skipped, 0.0});
  }
  {
    // L1 signs over a conjugate-symmetric spectrum cancel exactly at some
    // coordinates; there the difference quotient is pure rounding noise.
    GradCheckOptions opts;
    opts.abs_floor = 1e-6;
    const GradCheckResult res = grad_check([&] { return fft_loss(t8, ta); }, {t8}, opts);
    record({"fft_loss", res.max_rel_error, kOpTolerance, res.coords_checked, res.coords_skipped, 0.0});
  }
  record(end_to_end_case(UgruVariant::split, seed));
  record(end_to_end_case(UgruVariant::shared, seed));
  return out;
}

}  // namespace ctun
