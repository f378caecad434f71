#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "leuq/common.hpp"
#include "leuq/rng.hpp"

namespace leuq {

class Tensor;

namespace detail {

// Thread-local autodiff switch. Ops record graph edges only while enabled.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

// ---- dense kernels ----------------------------------------------------
// All GEMM variants accumulate into C; callers zero-fill first.

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn_acc(std::size_t m, std::size_t n, std::size_t k,
                        const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    double* c_row = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = a_row[p];
      if (a == 0.0) continue;
      const double* b_row = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T where B is stored [n,k]
inline void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k,
                        const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    double* c_row = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b_row = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
      c_row[j] += acc;
    }
  }
}

// C[m,n] += A^T * B where A is stored [k,m], B is stored [k,n]
inline void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k,
                        const double* A, const double* B, double* C) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* a_row = A + p * m;
    const double* b_row = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = a_row[i];
      if (a == 0.0) continue;
      double* c_row = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// x: [C,H,W] image -> cols: [C*k*k, OH*OW]
inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W,
                   std::size_t k, std::size_t stride, std::size_t pad,
                   std::size_t OH, std::size_t OW, double* cols) {
  const std::size_t plane = OH * OW;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* out = cols + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out + oh * OW, out + (oh + 1) * OW, 0.0);
            continue;
          }
          const double* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            out[oh * OW + ow] =
                (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-accumulate cols back into the [C,H,W] image.
inline void col2im_acc(const double* cols, std::size_t C, std::size_t H, std::size_t W,
                       std::size_t k, std::size_t stride, std::size_t pad,
                       std::size_t OH, std::size_t OW, double* x) {
  const std::size_t plane = OH * OW;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* in = cols + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[iw] += in[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Forces autodiff recording on or off for the enclosing scope.
struct GradModeGuard {
  explicit GradModeGuard(bool enable) : prev_(detail::grad_mode()) {
    detail::grad_mode() = enable;
  }
  ~GradModeGuard() { detail::grad_mode() = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

// Suppresses graph construction for the enclosing scope (inference paths).
struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void()> backward;

  std::size_t n() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

Tensor wrap_node(std::shared_ptr<Node> n);

}  // namespace detail

// Dense 64-bit float tensor participating in a reverse-mode autodiff graph.
// Value semantics on the handle; the node (data + graph edge) is shared.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, double fill, bool requires_grad = false) {
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value.assign(leuq::numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (leuq::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    detail::check_finite(data, "from_data");
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double v) { return from_data({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> d(leuq::numel(shape));
    for (double& x : d) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }

  // Gradient view; reads as zeros when backward never reached this leaf.
  std::span<const double> grad() const {
    const_cast<detail::Node*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Leaf copy cut off from the graph.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = false;
    return t;
  }

  // In-place value update for optimizer steps; only sane on leaves.
  void apply_update(const std::vector<double>& delta) {
    if (delta.size() != node_->value.size()) throw ShapeError("update size mismatch");
    for (std::size_t i = 0; i < delta.size(); ++i) node_->value[i] += delta[i];
  }
  void set_data(const std::vector<double>& v) {
    if (v.size() != node_->value.size()) throw ShapeError("set_data size mismatch");
    node_->value = v;
  }

  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor detail::wrap_node(std::shared_ptr<detail::Node>);

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor wrap_node(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

// Builds the result node of a primitive. `make_backward` is invoked only if
// some input requires grad and grad mode is on; it receives the result node
// and returns the pull-back closure.
template <typename MakeBackward>
Tensor op_result(Shape shape, std::vector<double> value, const char* op,
                 std::vector<Tensor> inputs, MakeBackward&& make_backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  n->op = op;
  bool needs = false;
  if (grad_mode()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  n->requires_grad = needs;
  if (needs) {
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backward = make_backward(n.get());
  }
  return wrap_node(std::move(n));
}

inline void accumulate(Node* dst, const std::vector<double>& contribution) {
  dst->ensure_grad();
  for (std::size_t i = 0; i < contribution.size(); ++i) dst->grad[i] += contribution[i];
}

}  // namespace detail

// ---- reverse pass -------------------------------------------------------

// Populates grads of all reachable requires-grad leaves with d(loss)/d(leaf).
// The traversed graph is released afterwards (edges and closures dropped);
// leaf values and grads survive.
inline void Tensor::backward() const {
  if (!node_) throw ContractError("backward() on undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;  // nothing reachable

  // Iterative post-order DFS for a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back().first;
    bool descended = false;
    while (stack.back().second < n->parents.size()) {
      detail::Node* p = n->parents[stack.back().second++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);  // invalidates stack.back() references
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->leaf || !n->backward) continue;
    n->ensure_grad();
    for (double g : n->grad) {
      if (!std::isfinite(g)) {
        throw NumericError(std::string("NaN gradient at node '") + n->op + "' during backward");
      }
    }
    n->backward();
  }

  // Consume the graph: non-leaf nodes drop edges, closures and grads.
  for (detail::Node* n : order) {
    if (!n->leaf) {
      n->parents.clear();
      n->backward = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// Diagnostics for structural tests: how much activation memory one forward
// evaluation materialized upstream of `root`.
struct GraphStats {
  std::size_t nodes = 0;
  std::size_t activation_elems = 0;  // non-leaf value elements
};

inline GraphStats graph_stats(const Tensor& root) {
  GraphStats s;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    ++s.nodes;
    if (!n->leaf) s.activation_elems += n->n();
    for (auto& p : n->parents) {
      if (!seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back(p.get());
      }
    }
  }
  return s;
}

// ---- elementwise primitives ----------------------------------------------

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + b.at(i);
  return detail::op_result(a.shape(), std::move(v), "add", {a, b}, [a, b](detail::Node* out) {
    return [a, b, out]() {
      if (a.requires_grad()) detail::accumulate(a.node().get(), out->grad);
      if (b.requires_grad()) detail::accumulate(b.node().get(), out->grad);
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) - b.at(i);
  return detail::op_result(a.shape(), std::move(v), "sub", {a, b}, [a, b](detail::Node* out) {
    return [a, b, out]() {
      if (a.requires_grad()) detail::accumulate(a.node().get(), out->grad);
      if (b.requires_grad()) {
        auto* nb = b.node().get();
        nb->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) nb->grad[i] -= out->grad[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * b.at(i);
  return detail::op_result(a.shape(), std::move(v), "mul", {a, b}, [a, b](detail::Node* out) {
    return [a, b, out]() {
      if (a.requires_grad()) {
        auto* na = a.node().get();
        na->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i] * b.at(i);
      }
      if (b.requires_grad()) {
        auto* nb = b.node().get();
        nb->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) nb->grad[i] += out->grad[i] * a.at(i);
      }
    };
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) / b.at(i);
  return detail::op_result(a.shape(), std::move(v), "div", {a, b}, [a, b](detail::Node* out) {
    return [a, b, out]() {
      if (a.requires_grad()) {
        auto* na = a.node().get();
        na->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i] / b.at(i);
      }
      if (b.requires_grad()) {
        auto* nb = b.node().get();
        nb->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
          const double bb = b.at(i);
          nb->grad[i] -= out->grad[i] * a.at(i) / (bb * bb);
        }
      }
    };
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + c;
  return detail::op_result(a.shape(), std::move(v), "add_scalar", {a}, [a](detail::Node* out) {
    return [a, out]() { detail::accumulate(a.node().get(), out->grad); };
  });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * c;
  return detail::op_result(a.shape(), std::move(v), "mul_scalar", {a}, [a, c](detail::Node* out) {
    return [a, c, out]() {
      auto* na = a.node().get();
      na->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i] * c;
    };
  });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

namespace detail {
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, const char* name, F f, DF df) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.at(i));
  return op_result(a.shape(), std::move(v), name, {a}, [a, df](Node* out) {
    return [a, df, out]() {
      auto* na = a.node().get();
      na->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) {
        na->grad[i] += out->grad[i] * df(a.at(i), out->value[i]);
      }
    };
  });
}
}  // namespace detail

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor elu(const Tensor& a) {
  return detail::unary_op(
      a, "elu", [](double x) { return x > 0.0 ? x : std::expm1(x); },
      [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

// Overflow-safe softplus: identity beyond x > 30.
inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a, "softplus",
      [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

// ---- reductions -----------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i);
  return detail::op_result({}, {s}, "sum_all", {a}, [a](detail::Node* out) {
    return [a, out]() {
      auto* na = a.node().get();
      na->ensure_grad();
      const double g = out->grad[0];
      for (double& x : na->grad) x += g;
    };
  });
}

inline Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i);
  return detail::op_result({}, {s * inv}, "mean_all", {a}, [a, inv](detail::Node* out) {
    return [a, inv, out]() {
      auto* na = a.node().get();
      na->ensure_grad();
      const double g = out->grad[0] * inv;
      for (double& x : na->grad) x += g;
    };
  });
}

// Row sums of a [B,F] matrix -> [B].
inline Tensor row_sum(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("row_sum expects rank-2 input, got " + shape_str(a.shape()));
  const std::size_t B = a.dim(0), F = a.dim(1);
  std::vector<double> v(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) v[b] += a.at(b * F + f);
  }
  return detail::op_result({B}, std::move(v), "row_sum", {a}, [a, B, F](detail::Node* out) {
    return [a, B, F, out]() {
      auto* na = a.node().get();
      na->ensure_grad();
      for (std::size_t b = 0; b < B; ++b) {
        const double g = out->grad[b];
        for (std::size_t f = 0; f < F; ++f) na->grad[b * F + f] += g;
      }
    };
  });
}

// ---- shape ops --------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel(new_shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  return detail::op_result(std::move(new_shape), std::move(v), "reshape", {a},
                           [a](detail::Node* out) {
                             return [a, out]() { detail::accumulate(a.node().get(), out->grad); };
                           });
}

// Concatenate rank-2 tensors along the feature (second) axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input list");
  const std::size_t B = parts[0].dim(0);
  std::size_t F = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 2 || t.dim(0) != B) {
      throw ShapeError("concat_cols: incompatible part shape " + shape_str(t.shape()));
    }
    F += t.dim(1);
  }
  std::vector<double> v(B * F);
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    const std::size_t f = t.dim(1);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(t.data().data() + b * f, f, v.data() + b * F + off);
    }
    off += f;
  }
  return detail::op_result({B, F}, std::move(v), "concat_cols", parts,
                           [parts, B, F](detail::Node* out) {
                             return [parts, B, F, out]() {
                               std::size_t off = 0;
                               for (const Tensor& t : parts) {
                                 const std::size_t f = t.dim(1);
                                 if (t.requires_grad()) {
                                   auto* nt = t.node().get();
                                   nt->ensure_grad();
                                   for (std::size_t b = 0; b < B; ++b) {
                                     for (std::size_t j = 0; j < f; ++j) {
                                       nt->grad[b * f + j] += out->grad[b * F + off + j];
                                     }
                                   }
                                 }
                                 off += f;
                               }
                             };
                           });
}

// Concatenate rank-4 tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  const std::size_t B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t C = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 4 || t.dim(0) != B || t.dim(2) != H || t.dim(3) != W) {
      throw ShapeError("concat_channels: incompatible part shape " + shape_str(t.shape()));
    }
    C += t.dim(1);
  }
  const std::size_t plane = H * W;
  std::vector<double> v(B * C * plane);
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    const std::size_t c = t.dim(1);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(t.data().data() + b * c * plane, c * plane,
                  v.data() + (b * C + off) * plane);
    }
    off += c;
  }
  return detail::op_result({B, C, H, W}, std::move(v), "concat_channels", parts,
                           [parts, B, C, plane](detail::Node* out) {
                             return [parts, B, C, plane, out]() {
                               std::size_t off = 0;
                               for (const Tensor& t : parts) {
                                 const std::size_t c = t.dim(1);
                                 if (t.requires_grad()) {
                                   auto* nt = t.node().get();
                                   nt->ensure_grad();
                                   for (std::size_t b = 0; b < B; ++b) {
                                     const double* src = out->grad.data() + (b * C + off) * plane;
                                     double* dst = nt->grad.data() + b * c * plane;
                                     for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                   }
                                 }
                                 off += c;
                               }
                             };
                           });
}

// Channel slice [begin, end) of a rank-4 tensor.
inline Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 4) throw ShapeError("slice_channels expects rank-4 input");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (begin > end || end > C) throw ShapeError("slice_channels: bad range");
  const std::size_t c = end - begin, plane = H * W;
  std::vector<double> v(B * c * plane);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(a.data().data() + (b * C + begin) * plane, c * plane, v.data() + b * c * plane);
  }
  return detail::op_result({B, c, H, W}, std::move(v), "slice_channels", {a},
                           [a, B, C, begin, c, plane](detail::Node* out) {
                             return [a, B, C, begin, c, plane, out]() {
                               auto* na = a.node().get();
                               na->ensure_grad();
                               for (std::size_t b = 0; b < B; ++b) {
                                 const double* src = out->grad.data() + b * c * plane;
                                 double* dst = na->grad.data() + (b * C + begin) * plane;
                                 for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                               }
                             };
                           });
}

// Column slice [begin, end) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2) throw ShapeError("slice_cols expects rank-2 input");
  const std::size_t B = a.dim(0), F = a.dim(1);
  if (begin > end || end > F) throw ShapeError("slice_cols: bad range");
  const std::size_t f = end - begin;
  std::vector<double> v(B * f);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(a.data().data() + b * F + begin, f, v.data() + b * f);
  }
  return detail::op_result({B, f}, std::move(v), "slice_cols", {a},
                           [a, B, F, begin, f](detail::Node* out) {
                             return [a, B, F, begin, f, out]() {
                               auto* na = a.node().get();
                               na->ensure_grad();
                               for (std::size_t b = 0; b < B; ++b) {
                                 for (std::size_t j = 0; j < f; ++j) {
                                   na->grad[b * F + begin + j] += out->grad[b * f + j];
                                 }
                               }
                             };
                           });
}

// ---- linear algebra -----------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  detail::gemm_nn_acc(m, n, k, a.data().data(), b.data().data(), v.data());
  return detail::op_result({m, n}, std::move(v), "matmul", {a, b},
                           [a, b, m, n, k](detail::Node* out) {
                             return [a, b, m, n, k, out]() {
                               if (a.requires_grad()) {
                                 auto* na = a.node().get();
                                 na->ensure_grad();
                                 detail::gemm_nt_acc(m, k, n, out->grad.data(), b.data().data(),
                                                     na->grad.data());
                               }
                               if (b.requires_grad()) {
                                 auto* nb = b.node().get();
                                 nb->ensure_grad();
                                 detail::gemm_tn_acc(k, n, m, a.data().data(), out->grad.data(),
                                                     nb->grad.data());
                               }
                             };
                           });
}

// y[b,f] = x[b,f] + bias[f]
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_row_bias: " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
  }
  const std::size_t B = x.dim(0), F = x.dim(1);
  std::vector<double> v(B * F);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) v[b * F + f] = x.at(b * F + f) + bias.at(f);
  }
  return detail::op_result({B, F}, std::move(v), "add_row_bias", {x, bias},
                           [x, bias, B, F](detail::Node* out) {
                             return [x, bias, B, F, out]() {
                               if (x.requires_grad()) detail::accumulate(x.node().get(), out->grad);
                               if (bias.requires_grad()) {
                                 auto* nb = bias.node().get();
                                 nb->ensure_grad();
                                 for (std::size_t b = 0; b < B; ++b) {
                                   for (std::size_t f = 0; f < F; ++f) {
                                     nb->grad[f] += out->grad[b * F + f];
                                   }
                                 }
                               }
                             };
                           });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return add_row_bias(matmul(x, w), bias);
}

// ---- convolution ----------------------------------------------------------

namespace detail {
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, const char* op) {
  const std::ptrdiff_t num =
      static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
  if (num < 0 || num % static_cast<std::ptrdiff_t>(stride) != 0) {
    throw ConfigError(std::string(op) + ": output extent (" + std::to_string(in) + " + 2*" +
                      std::to_string(pad) + " - " + std::to_string(k) + ")/" +
                      std::to_string(stride) + " + 1 is not a positive integer");
  }
  return static_cast<std::size_t>(num) / stride + 1;
}
}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding.
// x: [B, Cin, H, W], w: [Cout, Cin, k, k], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects rank-4 x and w");
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  const std::size_t OH = detail::conv_out_extent(H, k, stride, pad, "conv2d");
  const std::size_t OW = detail::conv_out_extent(W, k, stride, pad, "conv2d");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }

  const std::size_t ckk = Cin * k * k, plane = OH * OW;
  std::vector<double> v(B * Cout * plane, 0.0);
  std::vector<double> cols(ckk * plane);
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col(x.data().data() + b * Cin * H * W, Cin, H, W, k, stride, pad, OH, OW,
                   cols.data());
    detail::gemm_nn_acc(Cout, plane, ckk, w.data().data(), cols.data(),
                        v.data() + b * Cout * plane);
  }
  if (has_bias) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t co = 0; co < Cout; ++co) {
        double* row = v.data() + (b * Cout + co) * plane;
        const double bb = bias.at(co);
        for (std::size_t i = 0; i < plane; ++i) row[i] += bb;
      }
    }
  }

  std::vector<Tensor> inputs = has_bias ? std::vector<Tensor>{x, w, bias} : std::vector<Tensor>{x, w};
  return detail::op_result(
      {B, Cout, OH, OW}, std::move(v), "conv2d", std::move(inputs),
      [x, w, bias, has_bias, stride, pad, B, Cin, H, W, Cout, k, OH, OW, ckk,
       plane](detail::Node* out) {
        return [=]() {
          std::vector<double> cols(ckk * plane);
          std::vector<double> dcols(ckk * plane);
          detail::Node* nx = x.requires_grad() ? x.node().get() : nullptr;
          detail::Node* nw = w.requires_grad() ? w.node().get() : nullptr;
          detail::Node* nb = (has_bias && bias.requires_grad()) ? bias.node().get() : nullptr;
          if (nx) nx->ensure_grad();
          if (nw) nw->ensure_grad();
          if (nb) nb->ensure_grad();
          for (std::size_t b = 0; b < B; ++b) {
            const double* dy = out->grad.data() + b * Cout * plane;
            if (nw) {
              detail::im2col(x.data().data() + b * Cin * H * W, Cin, H, W, k, stride, pad, OH, OW,
                             cols.data());
              detail::gemm_nt_acc(Cout, ckk, plane, dy, cols.data(), nw->grad.data());
            }
            if (nx) {
              std::fill(dcols.begin(), dcols.end(), 0.0);
              detail::gemm_tn_acc(ckk, plane, Cout, w.data().data(), dy, dcols.data());
              detail::col2im_acc(dcols.data(), Cin, H, W, k, stride, pad, OH, OW,
                                 nx->grad.data() + b * Cin * H * W);
            }
            if (nb) {
              for (std::size_t co = 0; co < Cout; ++co) {
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += dy[co * plane + i];
                nb->grad[co] += s;
              }
            }
          }
        };
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// Adjoint of conv2d with the same (w, stride, padding).
// x: [B, Cin_t, H, W], w: [Cin_t, Cout_t, k, k]; output extent (H-1)*stride - 2*pad + k.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                               std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv_transpose2d expects rank-4 x and w");
  if (x.dim(1) != w.dim(0)) {
    throw ShapeError("conv_transpose2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv_transpose2d: kernel must be square");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(1), k = w.dim(2);
  const std::ptrdiff_t oh =
      static_cast<std::ptrdiff_t>((H - 1) * stride + k) - 2 * static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t ow =
      static_cast<std::ptrdiff_t>((W - 1) * stride + k) - 2 * static_cast<std::ptrdiff_t>(pad);
  if (oh < 1 || ow < 1) throw ConfigError("conv_transpose2d: non-positive output extent");
  const std::size_t OH = static_cast<std::size_t>(oh), OW = static_cast<std::size_t>(ow);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv_transpose2d: bias shape " + shape_str(bias.shape()));
  }

  const std::size_t ckk = Cout * k * k, plane = H * W;
  std::vector<double> v(B * Cout * OH * OW, 0.0);
  std::vector<double> cols(ckk * plane);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(cols.begin(), cols.end(), 0.0);
    // cols = w^T(viewed [Cin, ckk]) * x_b
    detail::gemm_tn_acc(ckk, plane, Cin, w.data().data(), x.data().data() + b * Cin * plane,
                        cols.data());
    detail::col2im_acc(cols.data(), Cout, OH, OW, k, stride, pad, H, W,
                       v.data() + b * Cout * OH * OW);
  }
  if (has_bias) {
    const std::size_t oplane = OH * OW;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t co = 0; co < Cout; ++co) {
        double* row = v.data() + (b * Cout + co) * oplane;
        const double bb = bias.at(co);
        for (std::size_t i = 0; i < oplane; ++i) row[i] += bb;
      }
    }
  }

  std::vector<Tensor> inputs = has_bias ? std::vector<Tensor>{x, w, bias} : std::vector<Tensor>{x, w};
  return detail::op_result(
      {B, Cout, OH, OW}, std::move(v), "conv_transpose2d", std::move(inputs),
      [x, w, bias, has_bias, stride, pad, B, Cin, H, W, Cout, k, OH, OW, ckk,
       plane](detail::Node* out) {
        return [=]() {
          const std::size_t oplane = OH * OW;
          std::vector<double> cols(ckk * plane);
          detail::Node* nx = x.requires_grad() ? x.node().get() : nullptr;
          detail::Node* nw = w.requires_grad() ? w.node().get() : nullptr;
          detail::Node* nb = (has_bias && bias.requires_grad()) ? bias.node().get() : nullptr;
          if (nx) nx->ensure_grad();
          if (nw) nw->ensure_grad();
          if (nb) nb->ensure_grad();
          for (std::size_t b = 0; b < B; ++b) {
            const double* dy = out->grad.data() + b * Cout * oplane;
            // im2col of the upstream gradient, geometry of the paired conv2d
            detail::im2col(dy, Cout, OH, OW, k, stride, pad, H, W, cols.data());
            if (nx) {
              detail::gemm_nn_acc(Cin, plane, ckk, w.data().data(), cols.data(),
                                  nx->grad.data() + b * Cin * plane);
            }
            if (nw) {
              detail::gemm_nt_acc(Cin, ckk, plane, x.data().data() + b * Cin * plane, cols.data(),
                                  nw->grad.data());
            }
            if (nb) {
              for (std::size_t co = 0; co < Cout; ++co) {
                double s = 0.0;
                for (std::size_t i = 0; i < oplane; ++i) s += dy[co * oplane + i];
                nb->grad[co] += s;
              }
            }
          }
        };
      });
}

inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, std::size_t stride,
                               std::size_t pad) {
  return conv_transpose2d(x, w, Tensor(), stride, pad);
}

// ---- group normalization -------------------------------------------------

// Per (sample, group) standardization over C/groups * H * W values, then a
// per-channel affine map. x: [B,C,H,W], gamma/beta: [C].
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  if (x.rank() != 4) throw ShapeError("group_norm expects rank-4 input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (groups == 0 || C % groups != 0) {
    throw ConfigError("group_norm: channel count " + std::to_string(C) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C) {
    throw ShapeError("group_norm: gamma/beta must be [C]");
  }
  const std::size_t cg = C / groups, plane = H * W, gsize = cg * plane;

  std::vector<double> v(x.numel());
  std::vector<double> inv_std(B * groups);
  std::vector<double> mean(B * groups);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* src = x.data().data() + (b * C + g * cg) * plane;
      double m = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) m += src[i];
      m /= static_cast<double>(gsize);
      double var = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) {
        const double d = src[i] - m;
        var += d * d;
      }
      var /= static_cast<double>(gsize);
      const double is = 1.0 / std::sqrt(var + eps);
      mean[b * groups + g] = m;
      inv_std[b * groups + g] = is;
      for (std::size_t c = 0; c < cg; ++c) {
        const std::size_t ch = g * cg + c;
        const double ga = gamma.at(ch), be = beta.at(ch);
        const double* s = x.data().data() + (b * C + ch) * plane;
        double* d = v.data() + (b * C + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) d[i] = ga * (s[i] - m) * is + be;
      }
    }
  }

  return detail::op_result(
      x.shape(), std::move(v), "group_norm", {x, gamma, beta},
      [x, gamma, beta, groups, B, C, plane, cg, gsize, mean, inv_std](detail::Node* out) {
        return [=]() {
          detail::Node* nx = x.requires_grad() ? x.node().get() : nullptr;
          detail::Node* ng = gamma.requires_grad() ? gamma.node().get() : nullptr;
          detail::Node* nb = beta.requires_grad() ? beta.node().get() : nullptr;
          if (nx) nx->ensure_grad();
          if (ng) ng->ensure_grad();
          if (nb) nb->ensure_grad();
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t g = 0; g < groups; ++g) {
              const double m = mean[b * groups + g];
              const double is = inv_std[b * groups + g];
              // dxhat = dy * gamma; reduce its mean and its <.,xhat> moment
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::size_t c = 0; c < cg; ++c) {
                const std::size_t ch = g * cg + c;
                const double ga = gamma.at(ch);
                const double* xs = x.data().data() + (b * C + ch) * plane;
                const double* dy = out->grad.data() + (b * C + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                  const double xhat = (xs[i] - m) * is;
                  const double dxhat = dy[i] * ga;
                  sum_dxhat += dxhat;
                  sum_dxhat_xhat += dxhat * xhat;
                  if (ng) ng->grad[ch] += dy[i] * xhat;
                  if (nb) nb->grad[ch] += dy[i];
                }
              }
              if (nx) {
                const double inv_n = 1.0 / static_cast<double>(gsize);
                for (std::size_t c = 0; c < cg; ++c) {
                  const std::size_t ch = g * cg + c;
                  const double ga = gamma.at(ch);
                  const double* xs = x.data().data() + (b * C + ch) * plane;
                  const double* dy = out->grad.data() + (b * C + ch) * plane;
                  double* dx = nx->grad.data() + (b * C + ch) * plane;
                  for (std::size_t i = 0; i < plane; ++i) {
                    const double xhat = (xs[i] - m) * is;
                    const double dxhat = dy[i] * ga;
                    dx[i] += is * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                  }
                }
              }
            }
          }
        };
      });
}

// ---- operator sugar ---------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul_scalar(a, 1.0 / c); }

}  // namespace leuq
