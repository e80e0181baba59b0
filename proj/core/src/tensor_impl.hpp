#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "caqa/tensor.hpp"

namespace caqa {
namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows in
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

struct TensorAccess {
  static const detail::NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(detail::NodePtr n) { return Tensor(std::move(n)); }
};

namespace detail {

inline const NodePtr& node_of(const Tensor& t) { return TensorAccess::node(t); }

/// Builds the result node; records parents and the backward rule only if some
/// input requires gradients. Rejects non-finite forward values.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   const char* op, std::function<void(Node&)> backward);

}  // namespace detail
}  // namespace caqa
