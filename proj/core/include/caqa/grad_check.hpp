#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "caqa/tensor.hpp"

namespace caqa {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Per tensor; 0 checks every coordinate, otherwise a seeded random subset.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Combine central differences at step and step/2 as (4 D(h/2) - D(h)) / 3,
  /// cancelling the h^2 error term so a larger, round-off safe step can be used.
  bool richardson = false;
};

/// Compares the analytic gradient of a scalar loss against central differences
/// for every leaf in `leaves`. The leaves are perturbed in place and restored.
/// Relative error per coordinate is |a - c| / (|a| + |c| + 1e-12).
/// Throws NonFiniteError naming the coordinate if the loss turns non-finite.
GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                                const GradCheckOptions& opts = {});

/// Single-input form: f is evaluated at a fresh leaf holding x's values.
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        double step);

}  // namespace caqa
