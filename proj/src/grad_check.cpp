#include "ctun/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ctun/autograd.hpp"

namespace ctun {

namespace {

double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradGuard guard;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& opts) {
  for (Tensor& p : params) {
    if (p.dtype() != DType::f64) throw ValueError("grad_check requires float64 parameters");
    p.zero_grad();
    p.set_requires_grad(true);
  }
  Tensor loss = loss_fn();
  if (loss.numel() != 1) throw DimensionError("grad_check: loss must be a single element");
  if (!std::isfinite(loss.item()))
    throw NumericError("grad_check: loss evaluated to a non-finite value");
  backward(loss);
  loss = Tensor();
  const double base = eval_loss(loss_fn);

  std::mt19937_64 rng(opts.seed);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const std::vector<double> analytic =
        p.has_grad() ? p.grad().to_vector() : std::vector<double>(p.numel(), 0.0);
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param != 0 && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    auto values = p.mutable_data<double>();
    for (std::size_t idx : coords) {
      const double orig = values[idx];
      const double h = opts.scale_eps ? opts.eps * std::max(1.0, std::abs(orig)) : opts.eps;
      auto f_at = [&](double offset) {
        values[idx] = orig + offset;
        return eval_loss(loss_fn);
      };
      double numeric = 0.0;
      if (opts.five_point) {
        const double p1 = f_at(h), m1 = f_at(-h), p2 = f_at(2 * h), m2 = f_at(-2 * h);
        numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        if (opts.skip_nonsmooth) {
          // Fourth difference: O(h^4) on smooth losses, O(h * slope jump)
          // when a kink lies anywhere inside the stencil.
          const double fourth = p2 - 4.0 * p1 + 6.0 * base - 4.0 * m1 + m2;
          const double noise = opts.loss_noise * std::abs(base) / h;
          if (std::abs(fourth) / h > opts.nonsmooth_tol * std::abs(numeric) + noise) {
            values[idx] = orig;
            ++result.coords_skipped;
            continue;
          }
        }
      } else {
        numeric = (f_at(h) - f_at(-h)) / (2.0 * h);
      }
      values[idx] = orig;
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coords_checked;
      if (rel > result.max_rel_error || std::isnan(rel)) {
        result.max_rel_error = rel;
        result.worst_param = pi;
        result.worst_coord = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
    p.zero_grad();
  }
  return result;
}

}  // namespace ctun
