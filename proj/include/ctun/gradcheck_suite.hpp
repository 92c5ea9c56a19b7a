#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ctun {

struct SuiteCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;
  // Largest allowed share of skipped coordinates (end-to-end cases only).
  double max_skip_fraction = 0.0;

  bool passed() const;
};

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kEndToEndTolerance = 1e-4;

/// Float64 finite-difference checks of every differentiable op, the
/// training losses, and the tiny end-to-end model in both hidden-update
/// variants. `on_case` is called as each case finishes.
std::vector<SuiteCase> run_gradcheck_suite(std::uint64_t seed = 0,
                                           const std::function<void(const SuiteCase&)>& on_case = {});

}  // namespace ctun
