#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
//
// Every op that receives an input with requires_grad records a backward
// closure on its result. backward() on a scalar walks the recorded graph in
// reverse topological order. Leaf gradients accumulate across calls;
// intermediate gradients are recomputed from zero on every call.
//
// Ops work on rank-2 tensors (rows x cols) unless noted. The recording graph
// is single-threaded; NoGradGuard disables recording for the current thread so
// inference can run concurrently on shared parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "synfuse/error.hpp"
#include "synfuse/rng.hpp"

namespace synfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Shared handle to a node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != numel_of(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return node().value.size(); }
  std::size_t rows() const { return rank() >= 2 ? shape()[rank() - 2] : 1; }
  std::size_t cols() const { return rank() >= 1 ? shape().back() : 1; }

  std::span<const double> data() const { return node().value; }
  /// Direct write access; bypasses the graph (initialization, optimizers).
  std::span<double> mutable_data() { return node().value; }
  std::vector<double> to_vector() const { return node().value; }

  double at(std::size_t r, std::size_t c) const { return node().value[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node().value[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().leaf; }

  void set_requires_grad(bool on) {
    if (!node().leaf) throw UsageError("requires_grad can only be changed on leaf tensors");
    node().requires_grad = on;
  }

  bool has_grad() const { return node().grad.size() == node().value.size() && !node().value.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() {
    node().ensure_grad();
    return node().grad;
  }
  void zero_grad() {
    auto& g = node().grad;
    std::fill(g.begin(), g.end(), 0.0);
  }

  /// Copy of the values as a new leaf, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node().value, false); }

  bool same(const Tensor& other) const { return node_ == other.node_; }

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& handle() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  detail::Node& node() const {
    if (!node_) throw UsageError("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Wrap an op result; records parents and the backward closure only if some
/// input needs a gradient and recording is enabled.
inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->leaf = false;
    for (const auto& t : inputs) n->parents.push_back(t.handle());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_vec(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                              std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->leaf = false;
    for (const auto& t : inputs) n->parents.push_back(t.handle());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

/// Parent i's gradient buffer if that parent participates, else nullptr.
inline double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Leaf gradients are accumulated.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() requires a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw UsageError("backward() on a tensor that does not require grad");
  using detail::Node;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.handle().get();
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->leaf) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->leaf && (*it)->backward) (*it)->backward(**it);
  }
}

/// (m x k) . (k x n)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* G = self.grad.data();
    const double* A = self.parents[0]->value.data();
    const double* B = self.parents[1]->value.data();
    if (double* gA = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          gA[i * k + p] += s;
        }
      }
    }
    if (double* gB = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gB + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

/// a . b^T without materializing the transpose: (m x k) . (n x k)^T
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_transposed");
  detail::require_rank2(b, "matmul_transposed");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_transposed: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* G = self.grad.data();
    const double* A = self.parents[0]->value.data();
    const double* B = self.parents[1]->value.data();
    if (double* gA = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gA[i * k + p] += g * B[j * k + p];
        }
      }
    }
    if (double* gB = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gB[j * k + p] += g * A[i * k + p];
        }
      }
    }
  });
}

/// Elementwise sum. b may also be a single row (1 x n) broadcast over a's rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
      for (std::size_t p = 0; p < 2; ++p) {
        if (double* g = detail::parent_grad(self, p)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      }
    });
  }
  detail::require_rank2(a, "add");
  if (b.numel() != a.cols() || b.rows() != 1) {
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bd[j];
  }
  return detail::make_result(a.shape(), std::move(out), {a, b}, [m, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      }
    }
  });
}

/// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return detail::make_result(a.shape(), std::move(out), {a}, [c](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  }
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
      }
    }
  });
}

/// Concatenate matrices along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_rank2(p, "concat");
  const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t f = axis == 0 ? p.cols() : p.rows();
    if (f != fixed) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                       " on axis " + std::to_string(axis));
    }
    extents.push_back(axis == 0 ? p.rows() : p.cols());
    total += extents.back();
  }
  const std::size_t rows = axis == 0 ? total : fixed;
  const std::size_t cols = axis == 0 ? fixed : total;
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    if (axis == 0) {
      std::copy(d.begin(), d.end(), out.begin() + static_cast<std::ptrdiff_t>(offset * cols));
    } else {
      const std::size_t w = extents[k];
      for (std::size_t i = 0; i < rows; ++i) {
        std::copy(d.begin() + static_cast<std::ptrdiff_t>(i * w), d.begin() + static_cast<std::ptrdiff_t>((i + 1) * w),
                  out.begin() + static_cast<std::ptrdiff_t>(i * cols + offset));
      }
    }
    offset += extents[k];
  }
  return detail::make_result_vec({rows, cols}, std::move(out), parts, [axis, rows, cols, extents](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      if (double* g = detail::parent_grad(self, k)) {
        if (axis == 0) {
          const std::size_t n = extents[k] * cols;
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset * cols + i];
        } else {
          const std::size_t w = extents[k];
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * cols + offset + j];
          }
        }
      }
      offset += extents[k];
    }
  });
}

inline Tensor concat(const Tensor& a, const Tensor& b, int axis) { return concat(std::vector<Tensor>{a, b}, axis); }

/// Row r as a 1 x n matrix.
inline Tensor row(const Tensor& a, std::size_t r) {
  detail::require_rank2(a, "row");
  if (r >= a.rows()) throw ShapeError("row: index " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
  const std::size_t n = a.cols();
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(r * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  return detail::make_result({1, n}, std::move(out), {a}, [r, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[j];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  const auto d = a.data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

namespace detail {

inline void softmax_rows(const double* in, double* out, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = in + i * n;
    double* y = out + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
}

}  // namespace detail

/// Softmax along axis 1 (each row) or axis 0 (each column), stabilized by
/// subtracting the maximum. -inf entries receive exactly zero weight.
inline Tensor softmax(const Tensor& x, int axis = 1) {
  detail::require_rank2(x, "softmax");
  if (axis == 0) return transpose(softmax(transpose(x), 1));
  if (axis != 1 && axis != -1) throw ShapeError("softmax: axis must be 0 or 1");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  detail::softmax_rows(x.data().data(), out.data(), m, n);
  return detail::make_result(x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const double* y = self.value.data();
      const double* dy = self.grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (dy[i * n + j] - dot);
      }
    }
  });
}

/// Replace entries where mask is nonzero with value (no gradient flows there).
inline Tensor masked_fill(const Tensor& x, std::span<const unsigned char> mask, double value) {
  if (mask.size() != x.numel()) throw ShapeError("masked_fill: mask size does not match " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  std::vector<unsigned char> keep(mask.begin(), mask.end());
  return detail::make_result(x.shape(), std::move(out), {x}, [keep = std::move(keep)](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (!keep[i]) g[i] += self.grad[i];
      }
    }
  });
}

/// Per-row normalization to zero mean and unit variance, then gain * x + bias.
/// gain and bias are 1 x n.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n), xhat(m * n), rstd(m);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xd[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = xd[i * n + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xd[i * n + j] - mean) * rstd[i];
      out[i * n + j] = gd[j] * xhat[i * n + j] + bd[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        const double* dy = self.grad.data();
        const auto& g = self.parents[1]->value;
        if (double* gx = detail::parent_grad(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j] * g[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j] * g[j];
              gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
        if (double* gg = detail::parent_grad(self, 1)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gg[j] += dy[i * n + j] * xhat[i * n + j];
          }
        }
        if (double* gb = detail::parent_grad(self, 2)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
          }
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (xv[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

/// Inverted dropout. Identity when !training or rate == 0.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += mask[i] * self.grad[i];
    }
  });
}

/// Gather rows of table (N x D) by id. Equivalent to multiplying the table by
/// one-hot columns; the gradient scatters back into the selected rows only.
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding_lookup");
  const std::size_t rows = table.rows(), width = table.cols();
  std::vector<double> out(ids.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_str(table.shape()));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result({ids.size(), width}, std::move(out), {table},
                             [width, idv = std::move(idv)](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < idv.size(); ++i) {
                                   double* dst = g + static_cast<std::size_t>(idv[i]) * width;
                                   for (std::size_t j = 0; j < width; ++j) dst[j] += self.grad[i * width + j];
                                 }
                               }
                             });
}

enum class Reduction { mean, sum };

/// Cross-entropy of each logits row against a smoothed target: (1 - eps) on
/// the gold id and eps / (V - 1) on every other id. Rows whose target equals
/// pad_id are skipped. With Reduction::mean the result is divided by the
/// number of non-pad rows.
inline Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const int> targets, double eps,
                                           std::optional<int> pad_id = std::nullopt,
                                           Reduction reduction = Reduction::mean) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (eps < 0.0 || eps >= 1.0) throw UsageError("label smoothing must be in [0, 1)");
  if (eps > 0.0 && v < 2) throw UsageError("label smoothing needs at least two classes");
  const double other = v > 1 ? eps / static_cast<double>(v - 1) : 0.0;
  const double gold = 1.0 - eps;

  std::vector<double> probs(m * v);
  detail::softmax_rows(logits.data().data(), probs.data(), m, v);
  const auto ld = logits.data();
  double total = 0.0;
  std::size_t count = 0;
  std::vector<unsigned char> active(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    if (pad_id && targets[i] == *pad_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw ShapeError("cross_entropy: target id " + std::to_string(targets[i]) + " out of range");
    }
    active[i] = 1;
    ++count;
    const double* x = ld.data() + i * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    double row_loss = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double q = j == static_cast<std::size_t>(targets[i]) ? gold : other;
      if (q != 0.0) row_loss -= q * (x[j] - lse);
    }
    total += row_loss;
  }
  const double norm = reduction == Reduction::mean && count > 0 ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<int> tv(targets.begin(), targets.end());
  return detail::make_result(
      {}, {total * norm}, {logits},
      [m, v, gold, other, norm, tv = std::move(tv), probs = std::move(probs),
       active = std::move(active)](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
          const double up = self.grad[0] * norm;
          for (std::size_t i = 0; i < m; ++i) {
            if (!active[i]) continue;
            for (std::size_t j = 0; j < v; ++j) {
              const double q = j == static_cast<std::size_t>(tv[i]) ? gold : other;
              g[i * v + j] += up * (probs[i * v + j] - q);
            }
          }
        }
      });
}

}  // namespace synfuse
