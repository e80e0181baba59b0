#include <cmath>
#include <sstream>
#include <unordered_set>

#include "caqa/error.hpp"
#include "tensor_impl.hpp"

namespace caqa {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape, std::size_t nvalues) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != nvalues)
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(nvalues));
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NonFiniteError(std::string("non-finite value produced by ") + op + " at index " +
                           std::to_string(i));
}

}  // namespace

namespace {
thread_local bool g_no_grad = false;
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   const char* op, std::function<void(Node&)> backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  if (g_no_grad) inputs.clear();
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (any) {
    for (const auto& in : inputs)
      if (in->consumed) throw GraphError(std::string(op) + ": input belongs to a consumed graph");
    n->requires_grad = true;
    n->parents = std::move(inputs);
    n->backward = std::move(backward);
  }
  return TensorAccess::wrap(std::move(n));
}

}  // namespace detail

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape, values.size());
  check_finite(values, "leaf construction");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw GraphError("mutable_values on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (ndim() != 2 || r >= shape()[0] || c >= shape()[1])
    throw ShapeError("at(" + std::to_string(r) + "," + std::to_string(c) + ") on " + shape_str(shape()));
  return node_->value[r * shape()[1] + c];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const {
  return node_->parents.empty() && !node_->backward && !node_->consumed;
}
bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

std::span<const double> Tensor::grad_view() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() { return node_->grad; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

const char* Tensor::op_name() const { return node_->op; }

void Tensor::backward() const {
  if (numel() != 1) throw GraphError("backward() needs a scalar loss, got " + shape_str(shape()));
  if (node_->consumed) throw GraphError("graph already consumed by a previous backward()");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) {
        if (p->consumed) throw GraphError("graph already consumed by a previous backward()");
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->backward) continue;  // leaf
    if (!n->grad.empty()) {
      n->backward(*n);
      for (const auto& p : n->parents)
        if (p->requires_grad && !p->grad.empty()) check_finite(p->grad, "backward");
    }
  }
  for (detail::Node* n : order) {
    if (!n->backward) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

}  // namespace caqa
