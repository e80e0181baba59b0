#pragma once

#include <random>
#include <string>
#include <vector>

#include "caqa/tensor.hpp"

namespace caqa::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

/// Parameters whose gradient under a span/contrastive loss is identically
/// zero: key biases (softmax shift invariance), the span-head bias, and the
/// final layer-norm shift (losses see only differences between positions).
inline bool invariant_parameter(const std::string& name, std::size_t num_layers) {
  return name.ends_with("attn.bk") || name == "head.b" ||
         name == "layer" + std::to_string(num_layers - 1) + ".ln2.beta";
}

}  // namespace caqa::test
