#include <cmath>
#include <numbers>

#include "caqa/error.hpp"
#include "tensor_impl.hpp"

namespace caqa {

using detail::make_result;
using detail::Node;
using detail::node_of;
using detail::NodePtr;

namespace {

enum class Broadcast { None, Rows };

Broadcast conform(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (a.ndim() == b.ndim() + 1 && std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1))
    return Broadcast::Rows;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " do not conform");
}

void require_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

// Last-axis layout: rows x cols.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& a) {
  std::size_t cols = a.shape().back();
  return {a.numel() / cols, cols};
}

template <typename Fwd, typename Deriv>
Tensor pointwise(const Tensor& a, const char* name, Fwd f, Deriv df) {
  auto x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {node_of(a)}, name, [df](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto bc = conform(a, b, "add");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  const std::size_t nb = y.size();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[bc == Broadcast::Rows ? i % nb : i];
  return make_result(a.shape(), std::move(out), {node_of(a), node_of(b)}, "add", [nb](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bc = conform(a, b, "sub");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  const std::size_t nb = y.size();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[bc == Broadcast::Rows ? i % nb : i];
  return make_result(a.shape(), std::move(out), {node_of(a), node_of(b)}, "sub", [nb](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bc = conform(a, b, "mul");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  const std::size_t nb = y.size();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[bc == Broadcast::Rows ? i % nb : i];
  return make_result(a.shape(), std::move(out), {node_of(a), node_of(b)}, "mul", [nb](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i % nb];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return pointwise(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return pointwise(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yr = &y[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yr[j];
    }
  return make_result({m, n}, std::move(out), {node_of(a), node_of(b)}, "matmul",
                     [m, k, n](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const auto& g = self.grad;
                       if (pa.requires_grad) {
                         // dA = G B^T
                         auto& ga = pa.grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double* br = &pb.value[p * n];
                             const double* gr = &g[i * n];
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                             ga[i * k + p] += acc;
                           }
                       }
                       if (pb.requires_grad) {
                         // dB = A^T G
                         auto& gb = pb.grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double av = pa.value[i * k + p];
                             const double* gr = &g[i * n];
                             double* out_row = &gb[p * n];
                             for (std::size_t j = 0; j < n; ++j) out_row[j] += av * gr[j];
                           }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto x = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result({c, r}, std::move(out), {node_of(a)}, "transpose", [r, c](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor exp(const Tensor& a) {
  return pointwise(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  auto x = a.values();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0))
      throw InvalidArgument("log: non-positive value " + std::to_string(x[i]) + " at index " +
                            std::to_string(i));
  return pointwise(
      a, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor relu(const Tensor& a) {
  return pointwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return pointwise(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return pointwise(
      a, "clamp_min", [lo](double x) { return x < lo ? lo : x; },
      [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Tensor softmax(const Tensor& a) {
  auto [rows, cols] = rows_cols(a);
  auto x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * cols];
    double* o = &out[r * cols];
    double mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (o[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
  return make_result(a.shape(), std::move(out), {node_of(a)}, "softmax",
                     [rows = rows, cols = cols](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = &self.value[r * cols];
                         const double* gy = &self.grad[r * cols];
                         double dot = 0.0;
                         for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
                         for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += y[j] * (gy[j] - dot);
                       }
                     });
}

Tensor log_softmax(const Tensor& a) {
  auto [rows, cols] = rows_cols(a);
  auto x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * cols];
    double mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = xr[j] - lse;
  }
  return make_result(a.shape(), std::move(out), {node_of(a)}, "log_softmax",
                     [rows = rows, cols = cols](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = &self.value[r * cols];
                         const double* gy = &self.grad[r * cols];
                         double total = 0.0;
                         for (std::size_t j = 0; j < cols; ++j) total += gy[j];
                         for (std::size_t j = 0; j < cols; ++j)
                           g[r * cols + j] += gy[j] - std::exp(y[j]) * total;
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t rows = x.dim(0), h = x.dim(1);
  if (gamma.shape() != Shape{h} || beta.shape() != Shape{h})
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(h) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(xv.size());
  // Cached normalized input and inverse std per row for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv[r * h];
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += xr[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(h);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < h; ++j) {
      const double n = (xr[j] - mu) * is;
      (*xhat)[r * h + j] = n;
      out[r * h + j] = n * gv[j] + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {node_of(x), node_of(gamma), node_of(beta)}, "layer_norm",
      [rows, h, xhat, inv_std](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gy = self.grad;
        if (pg.requires_grad) {
          auto& g = pg.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j) g[j] += gy[r * h + j] * (*xhat)[r * h + j];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j) g[j] += gy[r * h + j];
        }
        if (px.requires_grad) {
          auto& g = px.grad_buffer();
          const double hd = static_cast<double>(h);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
              const double d = gy[r * h + j] * pg.value[j];
              s1 += d;
              s2 += d * (*xhat)[r * h + j];
            }
            const double is = (*inv_std)[r];
            for (std::size_t j = 0; j < h; ++j) {
              const double d = gy[r * h + j] * pg.value[j];
              g[r * h + j] += is / hd * (hd * d - s1 - (*xhat)[r * h + j] * s2);
            }
          }
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_2d(table, "embedding");
  const std::size_t v = table.dim(0), h = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  auto tv = table.values();
  std::vector<double> out(ids.size() * h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v)
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_str(table.shape()));
    std::copy_n(&tv[ids[i] * h], h, &out[i * h]);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return make_result({ids.size(), h}, std::move(out), {node_of(table)}, "embedding",
                     [idv = std::move(idv), h](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < idv.size(); ++i)
                         for (std::size_t j = 0; j < h; ++j) g[idv[i] * h + j] += self.grad[i * h + j];
                     });
}

Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_2d(x, "masked_mean");
  const std::size_t l = x.dim(0), h = x.dim(1);
  if (mask.size() != l)
    throw ShapeError("masked_mean: mask length " + std::to_string(mask.size()) + " vs " +
                     std::to_string(l) + " rows");
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < l; ++i)
    if (mask[i]) picked.push_back(i);
  if (picked.empty()) throw InvalidArgument("masked_mean: mask selects no rows");
  auto xv = x.values();
  std::vector<double> out(h, 0.0);
  for (auto i : picked)
    for (std::size_t j = 0; j < h; ++j) out[j] += xv[i * h + j];
  const double inv = 1.0 / static_cast<double>(picked.size());
  for (auto& o : out) o *= inv;
  return make_result({h}, std::move(out), {node_of(x)}, "masked_mean",
                     [picked = std::move(picked), h, inv](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (auto i : picked)
                         for (std::size_t j = 0; j < h; ++j) g[i * h + j] += self.grad[j] * inv;
                     });
}

Tensor pairwise_sq_dist(const Tensor& x, const Tensor& y) {
  require_2d(x, "pairwise_sq_dist");
  require_2d(y, "pairwise_sq_dist");
  const std::size_t n = x.dim(0), m = y.dim(0), h = x.dim(1);
  if (y.dim(1) != h)
    throw ShapeError("pairwise_sq_dist: feature dimensions differ, " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  auto xv = x.values();
  auto yv = y.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < h; ++c) {
        const double t = xv[i * h + c] - yv[j * h + c];
        d += t * t;
      }
      out[i * m + j] = d;
    }
  return make_result({n, m}, std::move(out), {node_of(x), node_of(y)}, "pairwise_sq_dist",
                     [n, m, h](Node& self) {
                       auto& px = *self.parents[0];
                       auto& py = *self.parents[1];
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) {
                           const double g = 2.0 * self.grad[i * m + j];
                           if (g == 0.0) continue;
                           for (std::size_t c = 0; c < h; ++c) {
                             const double t = px.value[i * h + c] - py.value[j * h + c];
                             if (px.requires_grad) px.grad_buffer()[i * h + c] += g * t;
                             if (py.requires_grad) py.grad_buffer()[j * h + c] -= g * t;
                           }
                         }
                     });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({1}, {s}, {node_of(a)}, "sum", [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_2d(a, "slice_cols");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (begin >= end || end > c)
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  const std::size_t w = end - begin;
  auto x = a.values();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(&x[i * c + begin], w, &out[i * w]);
  return make_result({r, w}, std::move(out), {node_of(a)}, "slice_cols", [r, c, w, begin](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t r = parts[0].ndim() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  std::vector<NodePtr> inputs;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != r) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(node_of(p));
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto x = parts[k].values();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(&x[i * widths[k]], widths[k], &out[i * total + off]);
    off += widths[k];
  }
  return make_result({r, total}, std::move(out), std::move(inputs), "concat_cols",
                     [r, total, widths = std::move(widths)](Node& self) {
                       std::size_t o = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         auto& p = *self.parents[k];
                         if (p.requires_grad) {
                           auto& g = p.grad_buffer();
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[i * widths[k] + j] += self.grad[i * total + o + j];
                         }
                         o += widths[k];
                       }
                     });
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: nothing to stack");
  const std::size_t h = rows[0].numel();
  std::vector<double> out;
  out.reserve(rows.size() * h);
  std::vector<NodePtr> inputs;
  for (const auto& t : rows) {
    if (t.ndim() != 1 || t.numel() != h)
      throw ShapeError("stack_rows: expected vectors of length " + std::to_string(h) + ", got " +
                       shape_str(t.shape()));
    out.insert(out.end(), t.values().begin(), t.values().end());
    inputs.push_back(node_of(t));
  }
  return make_result({rows.size(), h}, std::move(out), std::move(inputs), "stack_rows", [h](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t j = 0; j < h; ++j) g[j] += self.grad[k * h + j];
    }
  });
}

Tensor select(const Tensor& a, std::size_t flat_index) {
  if (flat_index >= a.numel())
    throw ShapeError("select: index " + std::to_string(flat_index) + " out of range for " +
                     shape_str(a.shape()));
  return make_result({1}, {a.values()[flat_index]}, {node_of(a)}, "select", [flat_index](Node& self) {
    self.parents[0]->grad_buffer()[flat_index] += self.grad[0];
  });
}

Tensor row(const Tensor& a, std::size_t i) {
  require_2d(a, "row");
  const std::size_t h = a.dim(1);
  if (i >= a.dim(0))
    throw ShapeError("row: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  auto x = a.values();
  std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(i * h),
                          x.begin() + static_cast<std::ptrdiff_t>((i + 1) * h));
  return make_result({h}, std::move(out), {node_of(a)}, "row", [i, h](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < h; ++j) g[i * h + j] += self.grad[j];
  });
}

Tensor unary_map(const Tensor& a, std::function<double(double)> f, std::function<double(double)> df,
                 const char* name) {
  return pointwise(a, name, f, [df](double x, double) { return df(x); });
}

}  // namespace caqa
