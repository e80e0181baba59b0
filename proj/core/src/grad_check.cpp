#include "caqa/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "caqa/error.hpp"

namespace caqa {

namespace {

double eval_loss(const std::function<Tensor()>& loss, std::size_t t, std::size_t i) {
  double v = 0.0;
  try {
    v = loss().item();
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("finite differences: tensor " + std::to_string(t) + " coordinate " +
                         std::to_string(i) + ": " + e.what());
  }
  if (!std::isfinite(v))
    throw NonFiniteError("finite differences: non-finite loss at tensor " + std::to_string(t) +
                         " coordinate " + std::to_string(i));
  return v;
}

}  // namespace

GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                                const GradCheckOptions& opts) {
  if (!(opts.step > 0.0)) throw InvalidArgument("finite differences: step must be positive");
  for (auto& leaf : leaves) {
    if (!leaf.is_leaf() || !leaf.requires_grad())
      throw InvalidArgument("finite differences: every checked tensor must be a leaf requiring grad");
    leaf.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  GradCheckResult res;
  std::mt19937_64 rng(opts.seed);
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto vals = leaves[t].mutable_values();
    std::vector<std::size_t> coords(vals.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_tensor && coords.size() > opts.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_tensor);
    }
    for (auto i : coords) {
      const double orig = vals[i];
      auto central = [&](double h) {
        vals[i] = orig + h;
        const double up = eval_loss(loss, t, i);
        vals[i] = orig - h;
        const double down = eval_loss(loss, t, i);
        vals[i] = orig;
        return (up - down) / (2.0 * h);
      };
      const double d1 = central(opts.step);
      const double numeric = opts.richardson ? (4.0 * central(0.5 * opts.step) - d1) / 3.0 : d1;
      const double a = analytic[t][i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      ++res.coordinates_checked;
      if (rel > res.max_rel_error || res.coordinates_checked == 1) {
        res.max_rel_error = rel;
        res.worst_tensor = t;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return res;
}

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        double step) {
  Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  Tensor leaves[] = {leaf};
  return check_gradients([&] { return f(leaf); }, leaves, {.step = step});
}

}  // namespace caqa
