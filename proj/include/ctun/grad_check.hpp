#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctun/tensor.hpp"

namespace ctun {

struct GradCheckOptions {
  // Central-difference step; multiplied by max(1, |p|) when scale_eps is set.
  double eps = 1e-4;
  bool scale_eps = true;
  // Fourth-order stencil (8[f(p+h) - f(p-h)] - [f(p+2h) - f(p-2h)]) / 12h
  // instead of (f(p+h) - f(p-h)) / 2h. Its O(h^4) truncation error lets h stay
  // large enough that rounding noise does not swamp small derivatives.
  bool five_point = false;
  // With five_point: skip coordinates whose stencil straddles a relu/max
  // kink, where the derivative is undefined. The test uses only loss values
  // (the fourth difference over the stencil, relative to the slope), never
  // the analytic gradient.
  bool skip_nonsmooth = false;
  double nonsmooth_tol = 1e-5;
  // Relative rounding noise assumed in one loss evaluation; fourth
  // differences below this level are not treated as kinks.
  double loss_noise = 1e-13;
  // 0 checks every coordinate; otherwise a seeded random subset of this size
  // per parameter tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Lower bound on the relative-error denominator, so coordinates whose true
  // derivative is ~0 are judged on absolute error.
  double abs_floor = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;
  // Parameter index and flat coordinate of the worst disagreement.
  std::size_t worst_param = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of `loss_fn` (which must read `params`
/// and return a single-element float64 tensor) against central differences,
/// coordinate by coordinate. Parameter values are
/// restored afterwards and their grads are cleared.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& opts = {});

}  // namespace ctun
