#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Tape records one node per operation. Nodes are appended in evaluation
// order, so a node's parents always have smaller ids and a single reverse
// sweep over the ids is a valid topological backward pass. Nodes live in a
// deque so references handed out by Var::value() stay valid while the graph
// grows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "adp/errors.hpp"
#include "adp/parallel.hpp"
#include "adp/tensor.hpp"

namespace adp {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    if (!value.all_finite()) throw NumericError("leaf: non-finite input value");
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, false, "leaf", nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. The backward closure is kept only when some parent
  /// participates in differentiation.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents,
                BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var<T>>(parents), std::move(backward));
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& parents,
                BackwardFn backward) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
    Node node{std::move(value), {}, {}, false, false, op, nullptr};
    for (const auto& p : parents) {
      if (p.tape() != this) throw Error("tape", std::string(op) + ": operand from another tape");
      node.parents.push_back(p.id());
      node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id()); }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, zero-initialised on first use. Backward
  /// closures accumulate into it.
  Tensor<T>& grad_slot(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape(), T{0});
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw Error("tape", "backward: loss recorded on another tape");
    if (loss.value().size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_slot(loss.id())[0] = T{1};
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradient of the last backward() w.r.t. a node; zeros when the node did
  /// not receive any.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.has_grad) return Tensor<T>(n.value.shape(), T{0});
    return n.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    bool requires_grad = false;
    bool has_grad = false;
    const char* op = "";
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
};

namespace detail {

template <typename T>
Tape<T>& tape_of(const char* op, std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw Error("tape", std::string(op) + ": uninitialised operand");
    if (tape && v.tape() != tape) throw Error("tape", std::string(op) + ": operands on different tapes");
    tape = v.tape();
  }
  return *tape;
}

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_matrix(const char* op, const Tensor<T>& t) {
  require(t.rank() == 2, op, "expected a matrix, got " + shape_str(t.shape()));
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, 16, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      T* ci = c + i * n;
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = ai[p];
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  });
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, 16, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] += acc;
      }
    }
  });
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(k, 4, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* ai = a + i * k;
      const T* bi = b + i * n;
      for (std::size_t p = begin; p < end; ++p) {
        const T aip = ai[p];
        T* cp = c + p * n;
        for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
      }
    }
  });
}

template <typename T, typename F, typename D>
Var<T> unary(const char* op, const Var<T>& x, F f, D dfdx) {
  Tape<T>& tape = tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const std::size_t xid = x.id();
  std::size_t yid = tape.size();
  return tape.record(op, std::move(y), {x}, [xid, yid, dfdx](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xid);
    const Tensor<T>& yv = t.value(yid);
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

template <typename T>
T log_sigmoid_value(T z) {
  return std::min(z, T{0}) - std::log1p(std::exp(-std::abs(z)));
}

// sigmoid(-z), computed without overflow.
template <typename T>
T sigmoid_neg(T z) {
  if (z >= T{0}) {
    const T e = std::exp(-z);
    return e / (T{1} + e);
  }
  return T{1} / (T{1} + std::exp(z));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  constexpr const char* op = "matmul";
  Tape<T>& tape = detail::tape_of(op, {a, b});
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(op, av);
  detail::require_matrix(op, bv);
  detail::require(av.cols() == bv.rows(), op,
                  "inner dimensions differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> c(Shape{m, n});
  detail::gemm_nn(av.data(), bv.data(), c.data(), m, k, n);
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(op, std::move(c), {a, b}, [aid, bid, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(aid))
      detail::gemm_nt(g.data(), t.value(bid).data(), t.grad_slot(aid).data(), m, n, k);
    if (t.requires_grad(bid))
      detail::gemm_tn(t.value(aid).data(), g.data(), t.grad_slot(bid).data(), m, k, n);
  });
}

/// a * b^T without materialising the transpose.
template <typename T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b) {
  constexpr const char* op = "matmul_bt";
  Tape<T>& tape = detail::tape_of(op, {a, b});
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(op, av);
  detail::require_matrix(op, bv);
  detail::require(av.cols() == bv.cols(), op,
                  "inner dimensions differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor<T> c(Shape{m, n});
  detail::gemm_nt(av.data(), bv.data(), c.data(), m, k, n);
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(op, std::move(c), {a, b}, [aid, bid, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    // dA = G B, dB = G^T A
    if (t.requires_grad(aid))
      detail::gemm_nn(g.data(), t.value(bid).data(), t.grad_slot(aid).data(), m, n, k);
    if (t.requires_grad(bid))
      detail::gemm_tn(g.data(), t.value(aid).data(), t.grad_slot(bid).data(), m, n, k);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  constexpr const char* op = "transpose";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y(j, i) = xv(i, j);
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, m, n](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += g(j, i);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  constexpr const char* op = "reshape";
  Tape<T>& tape = detail::tape_of(op, {x});
  detail::require(shape_size(shape) == x.value().size(), op,
                  shape_str(x.shape()) + " -> " + shape_str(shape));
  const std::size_t xid = x.id();
  return tape.record(op, x.value().reshaped(std::move(shape)), {x},
                     [xid](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>& gx = t.grad_slot(xid);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename F>
Var<T> binary_same_shape(const char* op, const Var<T>& a, const Var<T>& b, F f, T da, T db_sign,
                         bool product) {
  Tape<T>& tape = tape_of(op, {a, b});
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.shape() == bv.shape(), op,
          "shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor<T> c(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) c[i] = f(av[i], bv[i]);
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(op, std::move(c), {a, b},
                     [aid, bid, da, db_sign, product](Tape<T>& t, const Tensor<T>& g) {
                       if (t.requires_grad(aid)) {
                         Tensor<T>& ga = t.grad_slot(aid);
                         if (product) {
                           const Tensor<T>& bv = t.value(bid);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                         } else {
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += da * g[i];
                         }
                       }
                       if (t.requires_grad(bid)) {
                         Tensor<T>& gb = t.grad_slot(bid);
                         if (product) {
                           const Tensor<T>& av = t.value(aid);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                         } else {
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] += db_sign * g[i];
                         }
                       }
                     });
}

// Row broadcast of a length-n vector over an m x n matrix.
// kind: 0 add, 1 subtract, 2 multiply.
template <typename T>
Var<T> row_broadcast(const char* op, const Var<T>& x, const Var<T>& v, int kind) {
  Tape<T>& tape = tape_of(op, {x, v});
  const Tensor<T>& xv = x.value();
  const Tensor<T>& vv = v.value();
  require_matrix(op, xv);
  require(vv.rank() == 1 && vv.size() == xv.cols(), op,
          "row vector " + shape_str(vv.shape()) + " does not match " + shape_str(xv.shape()));
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T a = xv(i, j), b = vv[j];
      y(i, j) = kind == 0 ? a + b : (kind == 1 ? a - b : a * b);
    }
  const std::size_t xid = x.id(), vid = v.id();
  return tape.record(op, std::move(y), {x, v}, [xid, vid, m, n, kind](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& vv = t.value(vid);
    if (t.requires_grad(xid)) {
      Tensor<T>& gx = t.grad_slot(xid);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx(i, j) += kind == 2 ? g(i, j) * vv[j] : g(i, j);
    }
    if (t.requires_grad(vid)) {
      const Tensor<T>& xv = t.value(xid);
      Tensor<T>& gv = t.grad_slot(vid);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T gij = g(i, j);
          gv[j] += kind == 0 ? gij : (kind == 1 ? -gij : gij * xv(i, j));
        }
    }
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary_same_shape<T>("add", a, b, [](T x, T y) { return x + y; }, T{1}, T{1}, false);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary_same_shape<T>("sub", a, b, [](T x, T y) { return x - y; }, T{1}, T{-1}, false);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary_same_shape<T>("mul", a, b, [](T x, T y) { return x * y; }, T{0}, T{0}, true);
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& v) {
  return detail::row_broadcast("add_row", x, v, 0);
}

template <typename T>
Var<T> sub_row(const Var<T>& x, const Var<T>& v) {
  return detail::row_broadcast("sub_row", x, v, 1);
}

template <typename T>
Var<T> mul_row(const Var<T>& x, const Var<T>& v) {
  return detail::row_broadcast("mul_row", x, v, 2);
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary("scale", x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  for (T v : x.value().values())
    if (!(v > T{0})) throw NumericError("log: non-positive input");
  return detail::unary("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  for (T v : x.value().values())
    if (v < T{0}) throw NumericError("sqrt: negative input");
  return detail::unary("sqrt", x, [](T v) { return std::sqrt(v); },
                       [](T, T y) { return T{0.5} / y; });
}

/// log(sigmoid(z)) = min(z, 0) - log(1 + exp(-|z|)); finite for any finite z.
template <typename T>
Var<T> log_sigmoid(const Var<T>& x) {
  return detail::unary("log_sigmoid", x, [](T v) { return detail::log_sigmoid_value(v); },
                       [](T v, T) { return detail::sigmoid_neg(v); });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  return detail::unary(
      "gelu", x,
      [](T v) { return T{0.5} * v * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T{0.5} * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T{-0.5} * v * v) / std::sqrt(T{2} * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      });
}

// ---------------------------------------------------------------------------
// Reductions and row-wise ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  constexpr const char* op = "sum";
  Tape<T>& tape = detail::tape_of(op, {x});
  T acc{0};
  for (T v : x.value().values()) acc += v;
  const std::size_t xid = x.id();
  return tape.record(op, Tensor<T>::scalar(acc), {x}, [xid](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.value().size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Per-row sum of a matrix -> vector of length rows.
template <typename T>
Var<T> sum_rows(const Var<T>& x) {
  constexpr const char* op = "sum_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += xv(i, j);
    y[i] = acc;
  }
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, m, n](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += g[i];
  });
}

/// Per-row squared L2 norm.
template <typename T>
Var<T> sum_sq_rows(const Var<T>& x) {
  constexpr const char* op = "sum_sq_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += xv(i, j) * xv(i, j);
    y[i] = acc;
  }
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, m, n](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xid);
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += T{2} * g[i] * xv(i, j);
  });
}

/// Per-row L2 norm. The gradient at a zero row is taken as zero.
template <typename T>
Var<T> l2norm_rows(const Var<T>& x) {
  constexpr const char* op = "l2norm_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += xv(i, j) * xv(i, j);
    y[i] = std::sqrt(acc);
  }
  const std::size_t xid = x.id();
  const std::size_t yid = tape.size();
  return tape.record(op, std::move(y), {x}, [xid, yid, m, n](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xid);
    const Tensor<T>& yv = t.value(yid);
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < m; ++i) {
      if (yv[i] == T{0}) continue;
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += g[i] * xv(i, j) / yv[i];
    }
  });
}

/// Scales every row to unit L2 norm. Zero rows are rejected since their
/// direction (and any cosine built on it) is undefined.
template <typename T>
Var<T> normalize_rows(const Var<T>& x) {
  constexpr const char* op = "normalize_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(xv.shape());
  std::vector<T> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += xv(i, j) * xv(i, j);
    norms[i] = std::sqrt(acc);
    if (!(norms[i] > T{0}))
      throw NumericError(std::string(op) + ": zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) y(i, j) = xv(i, j) / norms[i];
  }
  const std::size_t xid = x.id();
  const std::size_t yid = tape.size();
  return tape.record(op, std::move(y), {x},
                     [xid, yid, m, n, norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& yv = t.value(yid);
                       Tensor<T>& gx = t.grad_slot(xid);
                       for (std::size_t i = 0; i < m; ++i) {
                         T dot{0};
                         for (std::size_t j = 0; j < n; ++j) dot += yv(i, j) * g(i, j);
                         for (std::size_t j = 0; j < n; ++j)
                           gx(i, j) += (g(i, j) - yv(i, j) * dot) / norms[i];
                       }
                     });
}

/// Row-wise cosine similarity of two equally shaped matrices.
template <typename T>
Var<T> cosine_rows(const Var<T>& a, const Var<T>& b) {
  return sum_rows(mul(normalize_rows(a), normalize_rows(b)));
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  constexpr const char* op = "softmax_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(xv.shape());
  parallel_for(m, 64, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv(i, j));
      T z{0};
      for (std::size_t j = 0; j < n; ++j) {
        y(i, j) = std::exp(xv(i, j) - mx);
        z += y(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) y(i, j) /= z;
    }
  });
  const std::size_t xid = x.id();
  const std::size_t yid = tape.size();
  return tape.record(op, std::move(y), {x}, [xid, yid, m, n](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& yv = t.value(yid);
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < m; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * yv(i, j);
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += yv(i, j) * (g(i, j) - dot);
    }
  });
}

/// Normalises each row to zero mean and unit (biased) variance. The affine
/// part of a layer norm is applied separately with mul_row/add_row.
template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, T eps = T(1e-5)) {
  constexpr const char* op = "layer_norm_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(xv.shape());
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<T>(n);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y(i, j) = (xv(i, j) - mu) * inv_std[i];
  }
  const std::size_t xid = x.id();
  const std::size_t yid = tape.size();
  return tape.record(op, std::move(y), {x},
                     [xid, yid, m, n, inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& yv = t.value(yid);
                       Tensor<T>& gx = t.grad_slot(xid);
                       const T inv_n = T{1} / static_cast<T>(n);
                       for (std::size_t i = 0; i < m; ++i) {
                         T gm{0}, gy{0};
                         for (std::size_t j = 0; j < n; ++j) {
                           gm += g(i, j);
                           gy += g(i, j) * yv(i, j);
                         }
                         gm *= inv_n;
                         gy *= inv_n;
                         for (std::size_t j = 0; j < n; ++j)
                           gx(i, j) += inv_std[i] * (g(i, j) - gm - yv(i, j) * gy);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  constexpr const char* op = "concat_rows";
  if (parts.empty()) throw ShapeError(std::string(op) + ": no operands");
  Tape<T>& tape = *parts.front().tape();
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_matrix(op, p.value());
    detail::require(p.value().cols() == n, op, "column count mismatch");
    m += p.value().rows();
  }
  Tensor<T> y(Shape{m, n});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), y.data() + off * n);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().rows();
  }
  return tape.record(op, std::move(y), parts, [ids, offsets, n](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor<T>& gp = t.grad_slot(ids[k]);
      const T* src = g.data() + offsets[k] * n;
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  constexpr const char* op = "concat_cols";
  if (parts.empty()) throw ShapeError(std::string(op) + ": no operands");
  Tape<T>& tape = *parts.front().tape();
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_matrix(op, p.value());
    detail::require(p.value().rows() == m, op, "row count mismatch");
    n += p.value().cols();
  }
  Tensor<T> y(Shape{m, n});
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) y(i, off + j) = pv(i, j);
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(pv.cols());
    off += pv.cols();
  }
  return tape.record(op, std::move(y), parts, [ids, offsets, widths, m](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor<T>& gp = t.grad_slot(ids[k]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) gp(i, j) += g(i, offsets[k] + j);
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count) {
  constexpr const char* op = "slice_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  detail::require(begin + count <= xv.rows(), op, "row range out of bounds");
  const std::size_t n = xv.cols();
  Tensor<T> y(Shape{count, n},
              std::vector<T>(xv.data() + begin * n, xv.data() + (begin + count) * n));
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, begin, n](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    T* dst = gx.data() + begin * n;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t count) {
  constexpr const char* op = "slice_cols";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  detail::require(begin + count <= xv.cols(), op, "column range out of bounds");
  const std::size_t m = xv.rows();
  Tensor<T> y(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) y(i, j) = xv(i, begin + j);
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, begin, m, count](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) += g(i, j);
  });
}

/// Rows of x selected by index (repeats allowed).
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> index) {
  constexpr const char* op = "gather_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  const std::size_t n = xv.cols();
  Tensor<T> y(Shape{index.size(), n});
  for (std::size_t r = 0; r < index.size(); ++r) {
    detail::require(index[r] < xv.rows(), op, "row index out of bounds");
    std::copy_n(xv.data() + index[r] * n, n, y.data() + r * n);
  }
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, n, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) gx(index[r], j) += g(r, j);
  });
}

/// out[i] = x(i, cols[i]).
template <typename T>
Var<T> pick(const Var<T>& x, std::vector<std::size_t> cols) {
  constexpr const char* op = "pick";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  detail::require(cols.size() == xv.rows(), op, "one column index per row required");
  Tensor<T> y(Shape{cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    detail::require(cols[i] < xv.cols(), op, "column index out of bounds");
    y[i] = xv(i, cols[i]);
  }
  const std::size_t xid = x.id();
  return tape.record(op, std::move(y), {x}, [xid, cols = std::move(cols)](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_slot(xid);
    for (std::size_t i = 0; i < cols.size(); ++i) gx(i, cols[i]) += g[i];
  });
}

/// log(sum_j mask(i,j) * exp(x(i,j))) per row. Rows whose mask is empty
/// yield 0 and receive no gradient; callers decide how to treat them.
template <typename T>
Var<T> masked_logsumexp_rows(const Var<T>& x, std::vector<std::uint8_t> mask) {
  constexpr const char* op = "masked_logsumexp_rows";
  Tape<T>& tape = detail::tape_of(op, {x});
  const Tensor<T>& xv = x.value();
  detail::require_matrix(op, xv);
  detail::require(mask.size() == xv.size(), op, "mask size does not match input");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> y(Shape{m});
  parallel_for(m, 64, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (mask[i * n + j]) mx = std::max(mx, xv(i, j));
      if (mx == -std::numeric_limits<T>::infinity()) {
        y[i] = T{0};
        continue;
      }
      T z{0};
      for (std::size_t j = 0; j < n; ++j)
        if (mask[i * n + j]) z += std::exp(xv(i, j) - mx);
      y[i] = mx + std::log(z);
    }
  });
  const std::size_t xid = x.id();
  const std::size_t yid = tape.size();
  return tape.record(op, std::move(y), {x},
                     [xid, yid, m, n, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& xv = t.value(xid);
                       const Tensor<T>& yv = t.value(yid);
                       Tensor<T>& gx = t.grad_slot(xid);
                       for (std::size_t i = 0; i < m; ++i) {
                         if (g[i] == T{0}) continue;
                         for (std::size_t j = 0; j < n; ++j)
                           if (mask[i * n + j]) gx(i, j) += g[i] * std::exp(xv(i, j) - yv[i]);
                       }
                     });
}

}  // namespace adp
