// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff over dense double tensors.
//
// Execution model: ops compute eagerly. When a Tape is active on the current
// thread (via TapeScope) and an input lies on the gradient path, the op
// records a node with a backward closure; backward(loss) replays the
// recorded nodes in reverse creation order. Outside a TapeScope every op is
// a plain value computation (inference mode).
//
// Ownership: nodes hold shared_ptr links to their parents, so intermediate
// handles may be dropped freely during a forward pass. The tape breaks all
// links iteratively on clear(), which avoids deep recursive destruction of
// long graphs (Sinkhorn unrolls hundreds of iterations).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fairmoe/errors.hpp"

namespace fairmoe {

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by backward()
  bool requires_grad = false;  // leaf parameter flag
  bool needs_grad = false;     // on the gradient path
  std::uint64_t seq = 0;       // creation order on the tape; 0 for leaves
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::size_t numel() const { return value.size(); }
};

class Tape {
public:
  void record(const std::shared_ptr<Node>& n) {
    n->seq = next_seq_++;
    nodes_.push_back(n);
  }

  // Breaks parent links and closures before releasing the nodes, so no
  // destructor chain can recurse through a deep graph.
  void clear() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      (*it)->backprop = nullptr;
      (*it)->parents.clear();
    }
    nodes_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

  ~Tape() { clear(); }

private:
  std::vector<std::shared_ptr<Node>> nodes_;
  std::uint64_t next_seq_ = 1;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* t = nullptr;
  return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// RAII activation of a tape on the current thread. Nesting restores the
// previous tape on destruction.
class TapeScope {
public:
  explicit TapeScope(Tape& t) : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = &t; }
  ~TapeScope() { detail::active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

private:
  Tape* prev_;
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

class Tensor {
public:
  Tensor() = default;

  static Tensor constant(std::vector<int> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) throw DimensionError("shape/data size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor zeros(std::vector<int> shape) {
    std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<int> shape, double v) {
    std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return constant({1}, {v}); }

  static Tensor param(std::vector<int> shape, std::vector<double> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    t.node_->needs_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->numel(); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  int rows() const {
    if (ndim() != 2) throw DimensionError("rows(): not a matrix");
    return node_->shape[0];
  }
  int cols() const {
    if (ndim() != 2) throw DimensionError("cols(): not a matrix");
    return node_->shape[1];
  }

  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }

  double item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not scalar");
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const {
    return node_->value.at(r * static_cast<std::size_t>(cols()) + c);
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool needs_grad() const { return node_->needs_grad; }

  // Gradient of the last backward() pass; zeros if this tensor was untouched.
  std::vector<double> grad() const {
    if (node_->grad.size() == node_->numel()) return node_->grad;
    return std::vector<double>(node_->numel(), 0.0);
  }

  void zero_grad() { node_->grad.assign(node_->numel(), 0.0); }

  std::shared_ptr<Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(std::vector<int> shape, std::vector<double> value,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  Tape* tape = active_tape();
  bool needs = false;
  for (const auto& p : parents)
    if (p->needs_grad) needs = true;
  if (tape != nullptr && needs) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
    tape->record(n);
  }
  return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    std::ostringstream os;
    os << op << ": shape mismatch";
    throw DimensionError(os.str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
    Node *pa = n.parents[0].get(), *pb = n.parents[1].get();
    for (std::size_t i = 0; i < n.numel(); ++i) {
      if (pa->needs_grad) pa->grad[i] += n.grad[i];
      if (pb->needs_grad) pb->grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
    Node *pa = n.parents[0].get(), *pb = n.parents[1].get();
    for (std::size_t i = 0; i < n.numel(); ++i) {
      if (pa->needs_grad) pa->grad[i] += n.grad[i];
      if (pb->needs_grad) pb->grad[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
    Node *pa = n.parents[0].get(), *pb = n.parents[1].get();
    for (std::size_t i = 0; i < n.numel(); ++i) {
      if (pa->needs_grad) pa->grad[i] += n.grad[i] * pb->value[i];
      if (pb->needs_grad) pb->grad[i] += n.grad[i] * pa->value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [s](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i] * s;
  });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_const(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i];
  });
}

// y = x * s for a learnable scalar s (1-element tensor).
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: scale must be a 1-element tensor");
  const double sv = s.values()[0];
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
  return detail::make_op(x.shape(), std::move(out), {x.node(), s.node()}, [sv](Node& n) {
    Node *px = n.parents[0].get(), *ps = n.parents[1].get();
    double acc = 0.0;
    for (std::size_t i = 0; i < n.numel(); ++i) {
      if (px->needs_grad) px->grad[i] += n.grad[i] * sv;
      acc += n.grad[i] * px->value[i];
    }
    if (ps->needs_grad) ps->grad[0] += acc;
  });
}

// Elementwise multiply by a constant 0/1 (or arbitrary) mask. The mask is not
// part of the gradient path: sparsification masks behave as constants during
// backward (straight-through on kept entries).
inline Tensor mask_mul(const Tensor& x, std::vector<double> mask) {
  if (mask.size() != x.numel()) throw DimensionError("mask_mul: mask size mismatch");
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [m = std::move(mask)](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i] * m[i];
  });
}

// Elementwise add of a constant offset vector (e.g. attention masks).
inline Tensor mask_add(const Tensor& x, const std::vector<double>& mask) {
  if (mask.size() != x.numel()) throw DimensionError("mask_add: mask size mismatch");
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + mask[i];
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i];
  });
}

inline Tensor exp_t(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i] * n.value[i];
  });
}

inline Tensor log_t(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i] / p->value[i];
  });
}

// y = min(x, c); gradient is zero where the clamp is active.
inline Tensor min_const(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(xv[i], c);
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [c](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i)
      if (p->value[i] < c) p->grad[i] += n.grad[i];
  });
}

inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [=](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) {
      const double v = p->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      p->grad[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i)
      if (p->value[i] > 0.0) p->grad[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("matmul: operands must be matrices");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) throw DimensionError("matmul: inner dimensions disagree");
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const double ail = av[i * k + l];
      const double* brow = bv + static_cast<std::size_t>(l) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += ail * brow[j];
    }
  }
  return detail::make_op({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& nd) {
    Node *pa = nd.parents[0].get(), *pb = nd.parents[1].get();
    const double* g = nd.grad.data();
    if (pa->needs_grad) {
      // dA = dY * B^T
      const double* bv = pb->value.data();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<std::size_t>(i) * n;
        double* arow = pa->grad.data() + static_cast<std::size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
          const double* brow = bv + static_cast<std::size_t>(l) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          arow[l] += acc;
        }
      }
    }
    if (pb->needs_grad) {
      // dB = A^T * dY
      const double* av = pa->value.data();
      for (int l = 0; l < k; ++l)
        for (int i = 0; i < m; ++i) {
          const double ail = av[i * k + l];
          if (ail == 0.0) continue;
          const double* grow = g + static_cast<std::size_t>(i) * n;
          double* brow = pb->grad.data() + static_cast<std::size_t>(l) * n;
          for (int j = 0; j < n; ++j) brow[j] += ail * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = xv[static_cast<std::size_t>(i) * c + j];
  return detail::make_op({c, r}, std::move(out), {x.node()}, [r, c](Node& n) {
    Node* p = n.parents[0].get();
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i)
        p->grad[static_cast<std::size_t>(i) * c + j] += n.grad[static_cast<std::size_t>(j) * r + i];
  });
}

// x[i,j] + v[j]
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  const int r = x.rows(), c = x.cols();
  if (static_cast<int>(v.numel()) != c) throw DimensionError("add_rowvec: width mismatch");
  std::vector<double> out(x.numel());
  const auto &xv = x.values(), &vv = v.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = xv[static_cast<std::size_t>(i) * c + j] + vv[j];
  return detail::make_op(x.shape(), std::move(out), {x.node(), v.node()}, [r, c](Node& n) {
    Node *px = n.parents[0].get(), *pv = n.parents[1].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const double g = n.grad[static_cast<std::size_t>(i) * c + j];
        if (px->needs_grad) px->grad[static_cast<std::size_t>(i) * c + j] += g;
        if (pv->needs_grad) pv->grad[j] += g;
      }
  });
}

// x[i,j] + v[i]
inline Tensor add_colvec(const Tensor& x, const Tensor& v) {
  const int r = x.rows(), c = x.cols();
  if (static_cast<int>(v.numel()) != r) throw DimensionError("add_colvec: height mismatch");
  std::vector<double> out(x.numel());
  const auto &xv = x.values(), &vv = v.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = xv[static_cast<std::size_t>(i) * c + j] + vv[i];
  return detail::make_op(x.shape(), std::move(out), {x.node(), v.node()}, [r, c](Node& n) {
    Node *px = n.parents[0].get(), *pv = n.parents[1].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const double g = n.grad[static_cast<std::size_t>(i) * c + j];
        if (px->needs_grad) px->grad[static_cast<std::size_t>(i) * c + j] += g;
        if (pv->needs_grad) pv->grad[i] += g;
      }
  });
}

// x[i,j] * v[i] — scales each row by a scalar.
inline Tensor mul_colvec(const Tensor& x, const Tensor& v) {
  const int r = x.rows(), c = x.cols();
  if (static_cast<int>(v.numel()) != r) throw DimensionError("mul_colvec: height mismatch");
  std::vector<double> out(x.numel());
  const auto &xv = x.values(), &vv = v.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = xv[static_cast<std::size_t>(i) * c + j] * vv[i];
  return detail::make_op(x.shape(), std::move(out), {x.node(), v.node()}, [r, c](Node& n) {
    Node *px = n.parents[0].get(), *pv = n.parents[1].get();
    for (int i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int j = 0; j < c; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * c + j;
        const double g = n.grad[idx];
        if (px->needs_grad) px->grad[idx] += g * pv->value[i];
        acc += g * px->value[idx];
      }
      if (pv->needs_grad) pv->grad[i] += acc;
    }
  });
}

// (u_i - v_j) as an [n x m] matrix.
inline Tensor outer_sub(const Tensor& u, const Tensor& v) {
  const int n = static_cast<int>(u.numel()), m = static_cast<int>(v.numel());
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  const auto &uv = u.values(), &vv = v.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(i) * m + j] = uv[i] - vv[j];
  return detail::make_op({n, m}, std::move(out), {u.node(), v.node()}, [n, m](Node& nd) {
    Node *pu = nd.parents[0].get(), *pv = nd.parents[1].get();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        const double g = nd.grad[static_cast<std::size_t>(i) * m + j];
        if (pu->needs_grad) pu->grad[i] += g;
        if (pv->needs_grad) pv->grad[j] -= g;
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_op({1}, {s}, {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += n.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return detail::make_op({1}, {s * inv}, {x.node()}, [inv](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += n.grad[0] * inv;
  });
}

// Sum down each column: [r x c] -> [c].
inline Tensor colwise_sum(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(c, 0.0);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j] += xv[static_cast<std::size_t>(i) * c + j];
  return detail::make_op({c}, std::move(out), {x.node()}, [r, c](Node& n) {
    Node* p = n.parents[0].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) p->grad[static_cast<std::size_t>(i) * c + j] += n.grad[j];
  });
}

inline Tensor colwise_mean(const Tensor& x) { return scale(colwise_sum(x), 1.0 / x.rows()); }

// Sum along each row: [r x c] -> [r].
inline Tensor rowwise_sum(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(r, 0.0);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[i] += xv[static_cast<std::size_t>(i) * c + j];
  return detail::make_op({r}, std::move(out), {x.node()}, [r, c](Node& n) {
    Node* p = n.parents[0].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) p->grad[static_cast<std::size_t>(i) * c + j] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

// Numerically stabilized row softmax (row-max subtraction).
inline Tensor softmax_rows(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    double* orow = out.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < c; ++j) orow[j] *= inv;
  }
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [r, c](Node& n) {
    Node* p = n.parents[0].get();
    for (int i = 0; i < r; ++i) {
      const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
      const double* g = n.grad.data() + static_cast<std::size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += y[j] * g[j];
      double* pg = p->grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) pg[j] += y[j] * (g[j] - dot);
    }
  });
}

// log(sum(exp(row))) per row, max-stabilized: [r x c] -> [r].
inline Tensor logsumexp_rows(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(r);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    out[i] = mx + std::log(z);
  }
  return detail::make_op({r}, std::move(out), {x.node()}, [r, c](Node& n) {
    Node* p = n.parents[0].get();
    for (int i = 0; i < r; ++i) {
      const double* row = p->value.data() + static_cast<std::size_t>(i) * c;
      double* pg = p->grad.data() + static_cast<std::size_t>(i) * c;
      const double lse = n.value[i], g = n.grad[i];
      if (g == 0.0) continue;
      for (int j = 0; j < c; ++j) pg[j] += g * std::exp(row[j] - lse);
    }
  });
}

// Per-row standardization with affine transform. Variance uses 1/c
// normalization; epsilon 1e-5 inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const int r = x.rows(), c = x.cols();
  if (c < 2) throw ContractError("layer_norm: needs at least 2 columns");
  if (static_cast<int>(gain.numel()) != c || static_cast<int>(bias.numel()) != c)
    throw DimensionError("layer_norm: gain/bias width mismatch");
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(r);
  const auto &xv = x.values(), &gv = gain.values(), &bv = bias.values();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = rs;
    for (int j = 0; j < c; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * c + j;
      xhat[idx] = (row[j] - mu) * rs;
      out[idx] = xhat[idx] * gv[j] + bv[j];
    }
  }
  return detail::make_op(x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
                         [r, c, xh = std::move(xhat), rstd = std::move(rstd)](Node& n) {
                           Node *px = n.parents[0].get(), *pg = n.parents[1].get(), *pb = n.parents[2].get();
                           for (int i = 0; i < r; ++i) {
                             const double* g = n.grad.data() + static_cast<std::size_t>(i) * c;
                             const double* xhr = xh.data() + static_cast<std::size_t>(i) * c;
                             double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                             for (int j = 0; j < c; ++j) {
                               const double dxhat = g[j] * pg->value[j];
                               sum_dxhat += dxhat;
                               sum_dxhat_xhat += dxhat * xhr[j];
                               if (pg->needs_grad) pg->grad[j] += g[j] * xhr[j];
                               if (pb->needs_grad) pb->grad[j] += g[j];
                             }
                             if (px->needs_grad) {
                               double* pxg = px->grad.data() + static_cast<std::size_t>(i) * c;
                               const double inv_c = 1.0 / c;
                               for (int j = 0; j < c; ++j) {
                                 const double dxhat = g[j] * pg->value[j];
                                 pxg[j] += rstd[i] * (dxhat - inv_c * sum_dxhat - xhr[j] * inv_c * sum_dxhat_xhat);
                               }
                             }
                           }
                         });
}

// Row L2 normalization. Rows with near-zero norm are a contract violation.
inline Tensor l2_normalize_rows(const Tensor& x, double min_norm = 1e-12) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.numel());
  std::vector<double> norms(r);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += row[j] * row[j];
    const double nrm = std::sqrt(s);
    if (!(nrm > min_norm)) throw ContractError("l2_normalize_rows: zero-norm row");
    norms[i] = nrm;
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = row[j] / nrm;
  }
  return detail::make_op(x.shape(), std::move(out), {x.node()}, [r, c, norms = std::move(norms)](Node& n) {
    Node* p = n.parents[0].get();
    for (int i = 0; i < r; ++i) {
      const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
      const double* g = n.grad.data() + static_cast<std::size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += y[j] * g[j];
      double* pg = p->grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) pg[j] += (g[j] - y[j] * dot) / norms[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel()) throw DimensionError("reshape: element count mismatch");
  return detail::make_op(std::move(shape), x.values(), {x.node()}, [](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i] += n.grad[i];
  });
}

inline Tensor as_row(const Tensor& x) { return reshape(x, {1, static_cast<int>(x.numel())}); }
inline Tensor flatten(const Tensor& x) { return reshape(x, {static_cast<int>(x.numel())}); }

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  const int r = x.rows(), c = x.cols();
  if (r0 < 0 || r1 > r || r0 >= r1) throw DimensionError("slice_rows: bad range");
  std::vector<double> out(static_cast<std::size_t>(r1 - r0) * c);
  std::copy_n(x.values().data() + static_cast<std::size_t>(r0) * c, out.size(), out.data());
  return detail::make_op({r1 - r0, c}, std::move(out), {x.node()}, [r0, c](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[static_cast<std::size_t>(r0) * c + i] += n.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  const int r = x.rows(), c = x.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw DimensionError("slice_cols: bad range");
  const int w = c1 - c0;
  std::vector<double> out(static_cast<std::size_t>(r) * w);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(i) * w + j] = xv[static_cast<std::size_t>(i) * c + c0 + j];
  return detail::make_op({r, w}, std::move(out), {x.node()}, [r, c, c0, w](Node& n) {
    Node* p = n.parents[0].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        p->grad[static_cast<std::size_t>(i) * c + c0 + j] += n.grad[static_cast<std::size_t>(i) * w + j];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input");
  const int c = parts[0].cols();
  int r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    r += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(r) * c);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<int> row_counts;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
    row_counts.push_back(p.rows());
  }
  return detail::make_op({r, c}, std::move(out), std::move(parents), [c, rc = std::move(row_counts)](Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      Node* p = n.parents[k].get();
      const std::size_t cnt = static_cast<std::size_t>(rc[k]) * c;
      if (p->needs_grad)
        for (std::size_t i = 0; i < cnt; ++i) p->grad[i] += n.grad[off + i];
      off += cnt;
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  const int r = parts[0].rows();
  int c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
    c += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<int> widths;
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    const auto& pv = p.values();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(i) * c + off + j] = pv[static_cast<std::size_t>(i) * w + j];
    parents.push_back(p.node());
    widths.push_back(w);
    off += w;
  }
  return detail::make_op({r, c}, std::move(out), std::move(parents), [r, c, ws = std::move(widths)](Node& n) {
    int off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      Node* p = n.parents[k].get();
      const int w = ws[k];
      if (p->needs_grad)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            p->grad[static_cast<std::size_t>(i) * w + j] += n.grad[static_cast<std::size_t>(i) * c + off + j];
      off += w;
    }
  });
}

inline Tensor pick_diag(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  if (r != c) throw DimensionError("pick_diag: matrix is not square");
  std::vector<double> out(r);
  for (int i = 0; i < r; ++i) out[i] = x.values()[static_cast<std::size_t>(i) * c + i];
  return detail::make_op({r}, std::move(out), {x.node()}, [c](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t i = 0; i < n.numel(); ++i) p->grad[i * c + i] += n.grad[i];
  });
}

// Element gather from a 1-D tensor; duplicate indices accumulate gradient.
inline Tensor gather(const Tensor& x, const std::vector<int>& indices) {
  const int n = static_cast<int>(x.numel());
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= n) throw ContractError("gather: index out of range");
    out[i] = x.values()[indices[i]];
  }
  return detail::make_op({static_cast<int>(indices.size())}, std::move(out), {x.node()}, [indices](Node& nd) {
    Node* p = nd.parents[0].get();
    for (std::size_t i = 0; i < indices.size(); ++i) p->grad[indices[i]] += nd.grad[i];
  });
}

// Row gather from an embedding table; duplicate ids accumulate gradient.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t l = 0; l < ids.size(); ++l) {
    if (ids[l] < 0 || ids[l] >= v) throw ContractError("embedding_rows: id out of range");
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[l]) * d, d, out.data() + l * d);
  }
  return detail::make_op({static_cast<int>(ids.size()), d}, std::move(out), {table.node()}, [d, ids](Node& n) {
    Node* p = n.parents[0].get();
    for (std::size_t l = 0; l < ids.size(); ++l)
      for (int j = 0; j < d; ++j) p->grad[static_cast<std::size_t>(ids[l]) * d + j] += n.grad[l * d + j];
  });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. All gradients reachable from the
// loss are zeroed first, so repeated sweeps over the same tape are
// bit-identical. Parameters not reachable from the loss are left untouched
// (their grad() reads as zero if never visited).
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
  Node* root = loss.node().get();

  std::vector<Node*> reachable;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    reachable.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  for (Node* n : reachable)
    if (n->needs_grad) n->grad.assign(n->numel(), 0.0);

  if (!root->needs_grad) return;  // detached loss: nothing to propagate
  root->grad.assign(1, 1.0);

  std::sort(reachable.begin(), reachable.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  for (Node* n : reachable)
    if (n->backprop && n->seq > 0) n->backprop(*n);
}

// Gradient map over a named parameter list. Parameters the loss never
// touched report zero gradients.
inline std::vector<std::pair<std::string, Tensor>> gradient_map(
    const Tensor& loss, const std::vector<std::pair<std::string, Tensor>>& params) {
  backward(loss);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.emplace_back(name, Tensor::constant(p.shape(), p.grad()));
  return out;
}

}  // namespace fairmoe
