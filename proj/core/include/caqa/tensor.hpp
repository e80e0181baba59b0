#pragma once

// Dense fp64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations on tensors that
// require gradients record their parents and a backward rule; calling
// backward() on a scalar result walks the recorded graph once in reverse
// topological order and accumulates gradients into the leaves.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace caqa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Writable view of a leaf's values (optimizer updates, finite differences).
  /// Throws GraphError on interior nodes.
  std::span<double> mutable_values();

  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  /// Accumulated gradient; zeros if none has been accumulated yet.
  std::vector<double> grad() const;
  std::span<const double> grad_view() const;
  /// Writable accumulated gradient (empty if none yet), e.g. for clipping.
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from this scalar. The recorded graph is consumed.
  void backward() const;

  /// Same values, no history, no gradient requirement.
  Tensor detach() const;

  /// Name of the op that produced this tensor ("leaf" for leaves).
  const char* op_name() const;

  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

/// While alive, operations on this thread record no graph. Used for
/// evaluation passes over a trained model.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Operations. Shapes conform exactly, except that the second operand of
// add/sub/mul may omit the leading dimension of the first (broadcast over
// rows).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor exp(const Tensor& a);
/// Throws InvalidArgument on any non-positive entry.
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
/// tanh approximation.
Tensor gelu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

/// Over the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// Normalizes each row of x [R,H]; gamma and beta are [H].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Rows of table [V,H] selected by ids -> [L,H].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

/// Mean of the rows of x [L,H] whose mask entry is nonzero -> [H].
Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask);

/// d[i,j] = ||x_i - y_j||^2 for x [N,H], y [M,H] -> [N,M].
Tensor pairwise_sq_dist(const Tensor& x, const Tensor& y);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Columns [begin, end) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
/// Stacks equal-length vectors into rows -> [N,H].
Tensor stack_rows(std::span<const Tensor> rows);
/// Single element by flat index -> scalar.
Tensor select(const Tensor& a, std::size_t flat_index);
/// Row i of a 2-D tensor -> [H].
Tensor row(const Tensor& a, std::size_t i);

/// Elementwise map with a caller-supplied derivative. Exists for tests and
/// experiments; the derivative is trusted as given.
Tensor unary_map(const Tensor& a, std::function<double(double)> f,
                 std::function<double(double)> df, const char* name = "map");

}  // namespace caqa
