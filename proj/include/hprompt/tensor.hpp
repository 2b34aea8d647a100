#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "hprompt/rng.hpp"

namespace hprompt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;          // empty until a backward pass reaches this node
  bool requires_grad = false;   // trainable leaf
  bool needs_grad = false;      // leaf or depends on one
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  std::size_t numel() const { return value.size(); }
};

}  // namespace detail

/// Dense n-dimensional tensor with reverse-mode gradients. Values are
/// immutable once computed; backward() recomputes gradients for every node it
/// reaches (contributions within one pass accumulate additively). Leaf grads
/// persist until clear_grad().
template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<T> data) {
    check(shape_numel(shape) == data.size(),
          "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }

  static Tensor zeros(Shape shape) {
    std::vector<T> d(shape_numel(shape), T(0));
    return from(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, T v) {
    std::vector<T> d(shape_numel(shape), v);
    return from(std::move(shape), std::move(d));
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  /// Trainable leaf.
  static Tensor param(Shape shape, std::vector<T> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.n_->requires_grad = true;
    t.n_->needs_grad = true;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, T std_dev = T(1), T mean = T(0)) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = mean + std_dev * static_cast<T>(rng.normal());
    return from(std::move(shape), std::move(d));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->numel(); }
  std::size_t rows() const { return n_->shape.at(0); }
  std::size_t cols() const { return n_->shape.at(1); }
  bool is_scalar() const { return n_->numel() == 1 && n_->shape.empty(); }

  const std::vector<T>& value() const { return n_->value; }
  T item() const {
    check(n_->numel() == 1, "item() on non-scalar tensor");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool needs_grad() const { return n_->needs_grad; }

  void set_requires_grad(bool b) {
    n_->requires_grad = b;
    n_->needs_grad = b || !n_->parents.empty();
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    check(has_grad(), "tensor has no gradient accumulator");
    return n_->grad;
  }
  void clear_grad() {
    n_->grad.clear();
    n_->grad.shrink_to_fit();
  }

  /// In-place value access for optimizer updates on leaves.
  std::vector<T>& mutable_value() {
    check(n_->parents.empty(), "mutable_value() is only valid on leaf tensors");
    return n_->value;
  }

  /// Same values, no graph connection, not trainable.
  Tensor detach() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return Tensor(n);
  }

  NodePtr node() const { return n_; }

  /// Reverse-mode gradient of this scalar w.r.t. every reachable tensor that
  /// needs one. Gradients of nodes in the traversal are overwritten, not
  /// accumulated across separate backward() calls.
  void backward() const {
    check(n_->numel() == 1, "backward() requires a scalar loss");
    check(n_->needs_grad, "backward() on a graph with no trainable inputs");

    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    topo(n_.get(), seen, order);
    for (auto* nd : order) nd->grad.assign(nd->numel(), T(0));
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

 private:
  static void topo(detail::Node<T>* nd, std::unordered_set<detail::Node<T>*>& seen,
                   std::vector<detail::Node<T>*>& order) {
    if (!nd->needs_grad || seen.count(nd)) return;
    seen.insert(nd);
    for (auto& p : nd->parents) topo(p.get(), seen, order);
    order.push_back(nd);
  }

  NodePtr n_;
};

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_op_node(Shape shape, std::vector<T> value,
                                      std::vector<std::shared_ptr<Node<T>>> parents,
                                      std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (auto& p : parents) needs = needs || p->needs_grad;
  if (needs) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

template <typename T>
void add_into(Node<T>& p, const std::vector<T>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->needs_grad) detail::add_into(*an, self.grad);
        if (bn->needs_grad) detail::add_into(*bn, self.grad);
      }));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->needs_grad) detail::add_into(*an, self.grad);
        if (bn->needs_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
      }));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->needs_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        if (bn->needs_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
      }));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * c;
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an}, [an, c](detail::Node<T>& self) {
        if (an->needs_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
      }));
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.value()[i]);
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an}, [an](detail::Node<T>& self) {
        if (an->needs_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.value[i];
      }));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    T x = a.value()[i];
    v[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an}, [an](detail::Node<T>& self) {
        if (!an->needs_grad) return;
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          T x = an->value[i];
          T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
          an->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
      }));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v;
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      {}, {s}, {an}, [an](detail::Node<T>& self) {
        if (an->needs_grad)
          for (auto& g : an->grad) g += self.grad[0];
      }));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix products (2-D)
// ---------------------------------------------------------------------------

namespace detail {

// c[m,n] += a[m,k] * b[k,n], row-major; i-k-j order for locality
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = ar[p];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      cr[j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    const T* br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = ar[p];
      T* cr = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace detail

/// a[m,k] @ b[k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2, "matmul: 2-D tensors required");
  check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> v(m * n, T(0));
  detail::gemm_acc(a.value().data(), b.value().data(), v.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      {m, n}, std::move(v), {an, bn}, [an, bn, m, k, n](detail::Node<T>& self) {
        if (an->needs_grad) detail::gemm_nt_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        if (bn->needs_grad) detail::gemm_tn_acc(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n);
      }));
}

/// a[m,k] @ b[n,k]^T -> [m,n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2, "matmul_nt: 2-D tensors required");
  check(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<T> v(m * n, T(0));
  detail::gemm_nt_acc(a.value().data(), b.value().data(), v.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      {m, n}, std::move(v), {an, bn}, [an, bn, m, k, n](detail::Node<T>& self) {
        // dA = dC @ B, dB = dC^T @ A
        if (an->needs_grad) detail::gemm_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        if (bn->needs_grad) detail::gemm_tn_acc(self.grad.data(), an->value.data(), bn->grad.data(), m, n, k);
      }));
}

/// Broadcast-add a row vector v[n] to every row of a[m,n].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  check(a.shape().size() == 2 && v.shape().size() == 1 && a.cols() == v.numel(),
        "add_rowvec: need [m,n] and [n]");
  std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v.value()[j];
  auto an = a.node(), vn = v.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(out), {an, vn}, [an, vn, m, n](detail::Node<T>& self) {
        if (an->needs_grad) detail::add_into(*an, self.grad);
        if (vn->needs_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) vn->grad[j] += self.grad[i * n + j];
      }));
}

// ---------------------------------------------------------------------------
// Structure: reshape / slice / concat
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      std::move(shape), a.value(), {an}, [an](detail::Node<T>& self) {
        if (an->needs_grad) detail::add_into(*an, self.grad);
      }));
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t len) {
  check(a.shape().size() == 2, "slice_rows: 2-D tensor required");
  check(start + len <= a.rows(), "slice_rows: range out of bounds");
  std::size_t n = a.cols();
  std::vector<T> v(a.value().begin() + start * n, a.value().begin() + (start + len) * n);
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      {len, n}, std::move(v), {an}, [an, start, n](detail::Node<T>& self) {
        if (!an->needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[start * n + i] += self.grad[i];
      }));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t len) {
  check(a.shape().size() == 2, "slice_cols: 2-D tensor required");
  check(start + len <= a.cols(), "slice_cols: range out of bounds");
  std::size_t m = a.rows(), n = a.cols();
  std::vector<T> v(m * len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) v[i * len + j] = a.value()[i * n + start + j];
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      {m, len}, std::move(v), {an}, [an, start, m, n, len](detail::Node<T>& self) {
        if (!an->needs_grad) return;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < len; ++j) an->grad[i * n + start + j] += self.grad[i * len + j];
      }));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat_rows: empty input");
  std::size_t n = parts[0].cols(), total = 0;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.cols() == n, "concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<T> v;
  v.reserve(total * n);
  std::vector<typename Tensor<T>::NodePtr> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    v.insert(v.end(), p.value().begin(), p.value().end());
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.numel();
  }
  return Tensor<T>(detail::make_op_node<T>(
      {total, n}, std::move(v), nodes, [nodes, offsets](detail::Node<T>& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (!nodes[k]->needs_grad) continue;
          for (std::size_t i = 0; i < nodes[k]->numel(); ++i) nodes[k]->grad[i] += self.grad[offsets[k] + i];
        }
      }));
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  std::size_t m = parts[0].rows(), total = 0;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.rows() == m, "concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<T> v(m * total);
  std::vector<typename Tensor<T>::NodePtr> nodes;
  std::vector<std::size_t> col_off;
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy(p.value().begin() + i * p.cols(), p.value().begin() + (i + 1) * p.cols(),
                v.begin() + i * total + off);
    nodes.push_back(p.node());
    col_off.push_back(off);
    off += p.cols();
  }
  return Tensor<T>(detail::make_op_node<T>(
      {m, total}, std::move(v), nodes, [nodes, col_off, m, total](detail::Node<T>& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (!nodes[k]->needs_grad) continue;
          std::size_t w = nodes[k]->shape[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              nodes[k]->grad[i * w + j] += self.grad[i * total + col_off[k] + j];
        }
      }));
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax along rows of a 2-D tensor (or one 1-D row).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  bool vec = a.shape().size() == 1;
  std::size_t m = vec ? 1 : a.rows();
  std::size_t n = vec ? a.numel() : a.cols();
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = a.value().data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      v[i * n + j] = std::exp(row[j] - mx);
      z += v[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] /= z;
  }
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an}, [an, m, n](detail::Node<T>& self) {
        if (!an->needs_grad) return;
        for (std::size_t i = 0; i < m; ++i) {
          const T* y = self.value.data() + i * n;
          const T* dy = self.grad.data() + i * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += y[j] * (dy[j] - dot);
        }
      }));
}

/// Layer normalization over each row, with learnable gain/bias.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps = T(1e-5)) {
  check(x.shape().size() == 2, "layer_norm_rows: 2-D tensor required");
  std::size_t m = x.rows(), n = x.cols();
  check(gamma.numel() == n && beta.numel() == n, "layer_norm_rows: gain/bias length mismatch");
  std::vector<T> v(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.value().data() + i * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * is;
      v[i * n + j] = xhat[i * n + j] * gamma.value()[j] + beta.value()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return Tensor<T>(detail::make_op_node<T>(
      x.shape(), std::move(v), {xn, gn, bn},
      [xn, gn, bn, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        for (std::size_t i = 0; i < m; ++i) {
          const T* dy = self.grad.data() + i * n;
          const T* xh = xhat.data() + i * n;
          if (gn->needs_grad)
            for (std::size_t j = 0; j < n; ++j) gn->grad[j] += dy[j] * xh[j];
          if (bn->needs_grad)
            for (std::size_t j = 0; j < n; ++j) bn->grad[j] += dy[j];
          if (xn->needs_grad) {
            T sum_d = 0, sum_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              T d = dy[j] * gn->value[j];
              sum_d += d;
              sum_dx += d * xh[j];
            }
            T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              T d = dy[j] * gn->value[j];
              xn->grad[i * n + j] += inv_std[i] * (d - inv_n * sum_d - xh[j] * inv_n * sum_dx);
            }
          }
        }
      }));
}

/// Rows scaled to unit Euclidean norm. Errors on a zero-norm row.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a) {
  check(a.shape().size() == 2, "normalize_rows: 2-D tensor required");
  std::size_t m = a.rows(), n = a.cols();
  std::vector<T> v(m * n), inv_norm(m);
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += a.value()[i * n + j] * a.value()[i * n + j];
    check(s > T(0), "normalize_rows: zero-norm row (degenerate representation)");
    inv_norm[i] = T(1) / std::sqrt(s);
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = a.value()[i * n + j] * inv_norm[i];
  }
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      a.shape(), std::move(v), {an}, [an, m, n, inv_norm = std::move(inv_norm)](detail::Node<T>& self) {
        if (!an->needs_grad) return;
        for (std::size_t i = 0; i < m; ++i) {
          const T* y = self.value.data() + i * n;
          const T* dy = self.grad.data() + i * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += inv_norm[i] * (dy[j] - dot * y[j]);
        }
      }));
}

/// Per-row log(sum_{k != row} exp(a[row,k])) for a square matrix; the diagonal
/// is excluded from each row's sum. Returns a length-m vector.
template <typename T>
Tensor<T> logsumexp_rows_offdiag(const Tensor<T>& a) {
  check(a.shape().size() == 2 && a.rows() == a.cols(), "logsumexp_rows_offdiag: square matrix required");
  check(a.rows() >= 2, "logsumexp_rows_offdiag: need at least 2 rows");
  std::size_t n = a.rows();
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = a.value().data() + i * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) z += std::exp(row[j] - mx);
    v[i] = mx + std::log(z);
  }
  auto an = a.node();
  return Tensor<T>(detail::make_op_node<T>(
      {n}, std::move(v), {an}, [an, n](detail::Node<T>& self) {
        if (!an->needs_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            an->grad[i * n + j] += self.grad[i] * std::exp(an->value[i * n + j] - self.value[i]);
          }
        }
      }));
}

// ---------------------------------------------------------------------------
// Losses and similarity primitives
// ---------------------------------------------------------------------------

/// -log softmax(logits)[label] via the log-sum-exp stabilized form.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
  check(logits.shape().size() == 1, "cross_entropy: 1-D logits required");
  std::size_t n = logits.numel();
  check(label < n, "cross_entropy: label " + std::to_string(label) + " out of range for " + std::to_string(n) + " classes");
  for (T v : logits.value()) check(std::isfinite(v), "cross_entropy: non-finite logit");
  T mx = logits.value()[0];
  for (T v : logits.value()) mx = std::max(mx, v);
  T z = 0;
  for (T v : logits.value()) z += std::exp(v - mx);
  T lse = mx + std::log(z);
  auto ln = logits.node();
  return Tensor<T>(detail::make_op_node<T>(
      {}, {std::max(T(0), lse - logits.value()[label])}, {ln},
      [ln, label, mx, lse, n](detail::Node<T>& self) {
        if (!ln->needs_grad) return;
        (void)mx;
        for (std::size_t j = 0; j < n; ++j) {
          T p = std::exp(ln->value[j] - lse);
          ln->grad[j] += self.grad[0] * (p - (j == label ? T(1) : T(0)));
        }
      }));
}

/// Mean of per-row cross-entropies for logits [B,C] against labels[B].
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  check(logits.shape().size() == 2, "cross_entropy_mean: 2-D logits required");
  std::size_t b = logits.rows(), c = logits.cols();
  check(labels.size() == b, "cross_entropy_mean: label count mismatch");
  T total = 0;
  std::vector<T> lses(b);
  for (std::size_t i = 0; i < b; ++i) {
    check(labels[i] < c, "cross_entropy_mean: label " + std::to_string(labels[i]) + " out of range for " +
                             std::to_string(c) + " classes");
    const T* row = logits.value().data() + i * c;
    T mx = row[0];
    for (std::size_t j = 0; j < c; ++j) {
      check(std::isfinite(row[j]), "cross_entropy_mean: non-finite logit");
      mx = std::max(mx, row[j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    lses[i] = mx + std::log(z);
    total += std::max(T(0), lses[i] - row[labels[i]]);
  }
  total /= static_cast<T>(b);
  auto ln = logits.node();
  return Tensor<T>(detail::make_op_node<T>(
      {}, {total}, {ln}, [ln, labels, b, c, lses = std::move(lses)](detail::Node<T>& self) {
        if (!ln->needs_grad) return;
        T w = self.grad[0] / static_cast<T>(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            T p = std::exp(ln->value[i * c + j] - lses[i]);
            ln->grad[i * c + j] += w * (p - (j == labels[i] ? T(1) : T(0)));
          }
      }));
}

/// Mean over all elements of (a - b)^2.
template <typename T>
Tensor<T> mean_squared(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "mean_squared: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t n = a.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  s /= static_cast<T>(n);
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      {}, {s}, {an, bn}, [an, bn, n](detail::Node<T>& self) {
        T w = self.grad[0] * T(2) / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          T d = an->value[i] - bn->value[i];
          if (an->needs_grad) an->grad[i] += w * d;
          if (bn->needs_grad) bn->grad[i] -= w * d;
        }
      }));
}

/// a.b / (|a||b|) for 1-D vectors; errors on zero-norm input.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape().size() == 1 && b.shape().size() == 1 && a.numel() == b.numel(),
        "cosine_similarity: equal-length 1-D vectors required");
  std::size_t n = a.numel();
  T dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a.value()[i] * b.value()[i];
    na += a.value()[i] * a.value()[i];
    nb += b.value()[i] * b.value()[i];
  }
  check(na > T(0) && nb > T(0), "cosine_similarity: zero-norm input (degenerate representation)");
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  T cosv = dot / (na * nb);
  auto an = a.node(), bn = b.node();
  return Tensor<T>(detail::make_op_node<T>(
      {}, {cosv}, {an, bn}, [an, bn, n, na, nb, cosv](detail::Node<T>& self) {
        T g = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
          if (an->needs_grad)
            an->grad[i] += g * (bn->value[i] / (na * nb) - cosv * an->value[i] / (na * na));
          if (bn->needs_grad)
            bn->grad[i] += g * (an->value[i] / (na * nb) - cosv * bn->value[i] / (nb * nb));
        }
      }));
}

/// mu + exp(log_sigma) * eps. Gradients flow to mu and log_sigma, never eps.
template <typename T>
Tensor<T> gaussian_reparam_sample(const Tensor<T>& mu, const Tensor<T>& log_sigma, const Tensor<T>& eps) {
  check(mu.shape() == log_sigma.shape() && mu.shape() == eps.shape(),
        "gaussian_reparam_sample: shape mismatch");
  std::size_t n = mu.numel();
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = mu.value()[i] + std::exp(log_sigma.value()[i]) * eps.value()[i];
  auto mn = mu.node(), sn = log_sigma.node(), en = eps.node();
  // eps is a constant input: it is deliberately not a parent, so no gradient
  // accumulator can ever be produced for it through this op.
  (void)en;
  std::vector<T> eps_v = eps.value();
  return Tensor<T>(detail::make_op_node<T>(
      mu.shape(), std::move(v), {mn, sn},
      [mn, sn, n, eps_v = std::move(eps_v)](detail::Node<T>& self) {
        for (std::size_t i = 0; i < n; ++i) {
          if (mn->needs_grad) mn->grad[i] += self.grad[i];
          if (sn->needs_grad)
            sn->grad[i] += self.grad[i] * std::exp(sn->value[i]) * eps_v[i];
        }
      }));
}

}  // namespace hprompt
