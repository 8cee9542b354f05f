#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape owns an append-only list of nodes. Each primitive computes its
// forward value eagerly and records a closure that accumulates its
// vector-Jacobian product into the parents' gradients. Nodes that do not
// depend on any leaf (constants, data) carry no gradient and are skipped in
// the backward sweep.
//
// Array layout conventions: images are [C, H, W] row-major; convolution
// weights are [out, in, k, k]; 1x1 convolution weights are [out, in];
// scalars are shape {1}.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pglode/error.hpp"

namespace pglode::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw DataError("Tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                      to_string(shape_));
    }
  }
  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const { return data_.at(0); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class OpKind {
  kLeaf, kConstant, kAdd, kSub, kMul, kScale, kAddScalar, kMatmul, kConv2d, kConv1x1,
  kSigmoid, kTanh, kRelu, kExp, kLog, kClamp, kSum, kMean, kMaxPool, kAvgPool,
  kUpsampleNearest, kConcatChannels, kSliceChannels
};

inline std::string_view op_name(OpKind op) {
  constexpr std::string_view names[] = {
      "leaf", "constant", "add", "sub", "mul", "scale", "add_scalar", "matmul", "conv2d", "conv1x1",
      "sigmoid", "tanh", "relu", "exp", "log", "clamp", "sum", "mean", "max_pool", "avg_pool",
      "upsample_nearest", "concat_channels", "slice_channels"};
  return names[static_cast<int>(op)];
}

/// Shape error naming the primitive and the offending shapes.
class ShapeError : public DataError {
 public:
  ShapeError(OpKind op, const Shape& a, const Shape& b, const std::string& rule)
      : DataError(std::string(op_name(op)) + ": incompatible shapes " + to_string(a) + " and " +
                  to_string(b) + " (" + rule + ")") {}
  ShapeError(OpKind op, const Shape& a, const std::string& rule)
      : DataError(std::string(op_name(op)) + ": invalid shape " + to_string(a) + " (" + rule + ")") {}
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  const Tensor& grad() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) { return push(OpKind::kLeaf, std::move(value), {}, nullptr, true); }
  /// Non-differentiable input (data, frozen parameters).
  Var constant(Tensor value) { return push(OpKind::kConstant, std::move(value), {}, nullptr, false); }

  /// Record a primitive. Requires-grad is inherited from the parents.
  Var record(OpKind op, Tensor value, std::vector<std::size_t> parents, Backward backward) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    return push(op, std::move(value), std::move(parents), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  OpKind op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer; empty tensor of the right shape until backward runs.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  Tensor& grad_mut(std::size_t id) { return nodes_[id].grad; }

  void backward(const Var& loss) {
    if (loss.value().size() != 1) {
      throw ShapeError(op(loss.id()), loss.shape(), "backward requires a scalar loss");
    }
    if (backward_done_) throw Error("backward: called twice without reset_grads()");
    backward_done_ = true;
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad = Tensor(n.value.shape(), 0.0);
    }
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

  void reset_grads() {
    for (auto& n : nodes_) n.grad = Tensor();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    OpKind op;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad;
  };

  Var push(OpKind op, Tensor value, std::vector<std::size_t> parents, Backward backward, bool needs) {
    nodes_.push_back({std::move(value), Tensor(), op, std::move(parents), std::move(backward), needs});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline bool wants(Tape& t, std::size_t id) { return t.requires_grad(id); }

inline void same_tape(OpKind op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op_name(op)) + ": operands on different tapes");
}

/// Broadcasting for elementwise binary ops: identical shapes, a single-element
/// operand, or [1,H,W] against [C,H,W].
struct Broadcast {
  Shape out;
  std::size_t a_mod = 0;  // index into a = i % a_mod (a_mod == out size for identity)
  std::size_t b_mod = 0;
};

inline Broadcast broadcast(OpKind op, const Shape& a, const Shape& b) {
  const std::size_t na = numel(a);
  const std::size_t nb = numel(b);
  if (a == b) return {a, na, nb};
  if (na == 1) return {b, 1, nb};
  if (nb == 1) return {a, na, 1};
  if (a.size() == 3 && b.size() == 3 && a[1] == b[1] && a[2] == b[2]) {
    if (a[0] == 1) return {b, a[1] * a[2], nb};
    if (b[0] == 1) return {a, na, b[1] * b[2]};
  }
  throw ShapeError(op, a, b, "shapes must match, be scalar, or broadcast [1,H,W] over [C,H,W]");
}

template <typename F>
Var unary(OpKind op, const Var& x, F&& forward, std::function<double(double x, double y)> dydx) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(op, std::move(out), {xid}, [xid, dydx](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(xid);
    const auto& yv = t.value(self);
    auto& gx = t.grad_mut(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dydx(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(OpKind::kAdd, a, b);
  const auto bc = detail::broadcast(OpKind::kAdd, a.shape(), b.shape());
  Tensor out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i % bc.a_mod] + bv[i % bc.b_mod];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kAdd, std::move(out), {ia, ib}, [ia, ib, bc](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.a_mod] += g[i];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.b_mod] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(OpKind::kSub, a, b);
  const auto bc = detail::broadcast(OpKind::kSub, a.shape(), b.shape());
  Tensor out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i % bc.a_mod] - bv[i % bc.b_mod];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kSub, std::move(out), {ia, ib}, [ia, ib, bc](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.a_mod] += g[i];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.b_mod] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(OpKind::kMul, a, b);
  const auto bc = detail::broadcast(OpKind::kMul, a.shape(), b.shape());
  Tensor out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i % bc.a_mod] * bv[i % bc.b_mod];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kMul, std::move(out), {ia, ib}, [ia, ib, bc](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.a_mod] += g[i] * bv[i % bc.b_mod];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.b_mod] += g[i] * av[i % bc.a_mod];
    }
  });
}

inline Var scale(const Var& x, double c) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kScale, std::move(out), {ix}, [ix, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

inline Var add_scalar(const Var& x, double c) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kAddScalar, std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(OpKind::kSigmoid, x, stable_sigmoid,
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& x) {
  return detail::unary(OpKind::kTanh, x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& x) {
  return detail::unary(OpKind::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(const Var& x) {
  return detail::unary(OpKind::kExp, x, [](double v) { return std::exp(v); },
                       [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary(OpKind::kLog, x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

/// Clamp to [lo, hi]; gradient passes only where lo <= x <= hi.
inline Var clamp(const Var& x, double lo, double hi) {
  return detail::unary(OpKind::kClamp, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                       [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kSum, Tensor::scalar(s), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& gx = t.grad_mut(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

inline Var mean(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const auto n = static_cast<double>(x.value().size());
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kMean, Tensor::scalar(s / n), {ix}, [ix, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / n;
    auto& gx = t.grad_mut(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n].
inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(OpKind::kMatmul, a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw ShapeError(OpKind::kMatmul, as, bs, "expected [m,k] x [k,n]");
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor out({m, n});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kMatmul, std::move(out), {ia, ib},
                         [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

namespace detail {

/// out [M,N] (+)= a [M,P] * b [P,N], row-major. Columns are processed in
/// cache-sized blocks with a 2-row x 4-inner register tile.
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t p,
                     std::size_t n, bool accumulate) {
  constexpr std::size_t kBlock = 128;
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, n - j0);
    std::size_t i = 0;
    for (; i + 2 <= m; i += 2) {
      double* r0 = out + i * n + j0;
      double* r1 = r0 + n;
      if (!accumulate) {
        std::fill(r0, r0 + jn, 0.0);
        std::fill(r1, r1 + jn, 0.0);
      }
      const double* a0 = a + i * p;
      const double* a1 = a0 + p;
      std::size_t q = 0;
      for (; q + 4 <= p; q += 4) {
        const double w00 = a0[q], w01 = a0[q + 1], w02 = a0[q + 2], w03 = a0[q + 3];
        const double w10 = a1[q], w11 = a1[q + 1], w12 = a1[q + 2], w13 = a1[q + 3];
        const double* b0 = b + q * n + j0;
        const double* b1 = b0 + n;
        const double* b2 = b1 + n;
        const double* b3 = b2 + n;
        for (std::size_t j = 0; j < jn; ++j) {
          const double x0 = b0[j], x1 = b1[j], x2 = b2[j], x3 = b3[j];
          r0[j] += w00 * x0 + w01 * x1 + w02 * x2 + w03 * x3;
          r1[j] += w10 * x0 + w11 * x1 + w12 * x2 + w13 * x3;
        }
      }
      for (; q < p; ++q) {
        const double w0 = a0[q], w1 = a1[q];
        const double* bq = b + q * n + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          r0[j] += w0 * bq[j];
          r1[j] += w1 * bq[j];
        }
      }
    }
    for (; i < m; ++i) {
      double* r = out + i * n + j0;
      if (!accumulate) std::fill(r, r + jn, 0.0);
      const double* ai = a + i * p;
      std::size_t q = 0;
      for (; q + 4 <= p; q += 4) {
        const double w0 = ai[q], w1 = ai[q + 1], w2 = ai[q + 2], w3 = ai[q + 3];
        const double* b0 = b + q * n + j0;
        const double* b1 = b0 + n;
        const double* b2 = b1 + n;
        const double* b3 = b2 + n;
        for (std::size_t j = 0; j < jn; ++j) r[j] += w0 * b0[j] + w1 * b1[j] + w2 * b2[j] + w3 * b3[j];
      }
      for (; q < p; ++q) {
        const double wq = ai[q];
        const double* bq = b + q * n + j0;
        for (std::size_t j = 0; j < jn; ++j) r[j] += wq * bq[j];
      }
    }
  }
}

inline std::vector<double> transpose(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

/// out[o, :] = bias[o] + sum_k w[o, k] * in[k, :], shapes [O,K] x [K,N].
inline void gemm_rows(const double* w, const double* in, const double* bias, double* out,
                      std::size_t o_count, std::size_t k_count, std::size_t n) {
  for (std::size_t o = 0; o < o_count; ++o) std::fill(out + o * n, out + (o + 1) * n, bias ? bias[o] : 0.0);
  gemm_acc(w, in, out, o_count, k_count, n, true);
}

/// Backward of gemm_rows: accumulates into gw [O,K] and gb [O] (both optional);
/// gin [K,N] (optional) is accumulated into, or overwritten when `overwrite_gin`.
inline void gemm_rows_backward(const double* g, const double* w, const double* in, double* gw,
                               double* gin, double* gb, std::size_t o_count, std::size_t k_count,
                               std::size_t n, bool overwrite_gin = false) {
  if (gb) {
    for (std::size_t o = 0; o < o_count; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[o * n + j];
      gb[o] += s;
    }
  }
  if (gw) gemm_acc(g, transpose(in, k_count, n).data(), gw, o_count, n, k_count, true);
  if (gin) gemm_acc(transpose(w, o_count, k_count).data(), g, gin, k_count, o_count, n, !overwrite_gin);
}

/// im2col for a k x k same-padded (zero boundary) stride-1 convolution.
inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   double* col) {
  const long pad = static_cast<long>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = col + ((ci * k + ky) * k + kx) * hw;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          double* drow = dst + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(drow, drow + w, 0.0);
            continue;
          }
          const double* srow = x + ci * hw + static_cast<std::size_t>(sy) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + dx;
            drow[xx] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : srow[sx];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, std::size_t c, std::size_t h, std::size_t w,
                       std::size_t k, double* gx) {
  const long pad = static_cast<long>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* src = col + ((ci * k + ky) * k + kx) * hw;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          double* grow = gx + ci * hw + static_cast<std::size_t>(sy) * w;
          const double* srow = src + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + dx;
            if (sx >= 0 && sx < static_cast<long>(w)) grow[sx] += srow[xx];
          }
        }
      }
    }
  }
}

inline Var conv_impl(OpKind op, const Var& x, const Var& weight, const Var* bias) {
  detail::same_tape(op, x, weight);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 3) throw ShapeError(op, xs, "input must be [C,H,W]");
  std::size_t k = 1;
  if (op == OpKind::kConv2d) {
    if (ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0) {
      throw ShapeError(op, xs, ws, "weight must be [out, C, k, k] with odd k");
    }
    k = ws[2];
  } else if (!(ws.size() == 2 && ws[1] == xs[0]) &&
             !(ws.size() == 4 && ws[1] == xs[0] && ws[2] == 1 && ws[3] == 1)) {
    throw ShapeError(op, xs, ws, "weight must be [out, C] or [out, C, 1, 1]");
  }
  const std::size_t c = xs[0], h = xs[1], w = xs[2], o = ws[0];
  if (bias) {
    detail::same_tape(op, x, *bias);
    if (bias->value().size() != o) throw ShapeError(op, ws, bias->shape(), "bias must have one entry per output channel");
  }
  const std::size_t hw = h * w;
  const std::size_t kk = c * k * k;
  std::shared_ptr<std::vector<double>> col;
  const double* in = x.value().data().data();
  if (k > 1) {
    col = std::make_shared<std::vector<double>>(kk * hw);
    im2col(in, c, h, w, k, col->data());
    in = col->data();
  }
  Tensor out({o, h, w});
  gemm_rows(weight.value().data().data(), in, bias ? bias->value().data().data() : nullptr,
            out.data().data(), o, kk, hw);

  const std::size_t ix = x.id(), iw = weight.id();
  const std::size_t ib = bias ? bias->id() : ix;
  const bool has_bias = bias != nullptr;
  std::vector<std::size_t> parents{ix, iw};
  if (has_bias) parents.push_back(ib);
  return x.tape().record(op, std::move(out), std::move(parents),
                         [=](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data().data();
    const double* wv = t.value(iw).data().data();
    const double* inv = col ? col->data() : t.value(ix).data().data();
    double* gw = wants(t, iw) ? t.grad_mut(iw).data().data() : nullptr;
    double* gb = (has_bias && wants(t, ib)) ? t.grad_mut(ib).data().data() : nullptr;
    const bool need_x = wants(t, ix);
    if (!need_x) {
      gemm_rows_backward(g, wv, inv, gw, nullptr, gb, o, kk, hw);
    } else if (k == 1) {
      gemm_rows_backward(g, wv, inv, gw, t.grad_mut(ix).data().data(), gb, o, kk, hw);
    } else {
      std::vector<double> gcol(kk * hw);
      gemm_rows_backward(g, wv, inv, gw, gcol.data(), gb, o, kk, hw, true);
      col2im_add(gcol.data(), c, h, w, k, t.grad_mut(ix).data().data());
    }
  });
}

}  // namespace detail

/// Stride-1, zero same-padded convolution. x [C,H,W], weight [O,C,k,k], bias [O].
inline Var conv2d(const Var& x, const Var& weight) { return detail::conv_impl(OpKind::kConv2d, x, weight, nullptr); }
inline Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  return detail::conv_impl(OpKind::kConv2d, x, weight, &bias);
}

/// Pointwise channel mixing. x [C,H,W], weight [O,C], bias [O].
inline Var conv1x1(const Var& x, const Var& weight) { return detail::conv_impl(OpKind::kConv1x1, x, weight, nullptr); }
inline Var conv1x1(const Var& x, const Var& weight, const Var& bias) {
  return detail::conv_impl(OpKind::kConv1x1, x, weight, &bias);
}

// ---------------------------------------------------------------------------
// Resampling and channel plumbing

namespace detail {

inline void check_pool(OpKind op, const Shape& s, std::size_t k) {
  if (s.size() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0) {
    throw ShapeError(op, s, "expected [C,H,W] with H and W divisible by " + std::to_string(k));
  }
}

}  // namespace detail

/// k x k max pooling with stride k; ties resolve to the first (row-major) element.
inline Var max_pool(const Var& x, std::size_t k = 2) {
  detail::check_pool(OpKind::kMaxPool, x.shape(), k);
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = h / k, ow = w / k;
  Tensor out({c, oh, ow});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.value();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (ci * h + y * k) * w + xx * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (ci * h + y * k + dy) * w + xx * k + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ci * oh + y) * ow + xx;
        out[o] = xv[best];
        (*arg)[o] = best;
      }
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kMaxPool, std::move(out), {ix}, [ix, arg](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ix);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*arg)[o]] += g[o];
  });
}

/// k x k average pooling with stride k.
inline Var avg_pool(const Var& x, std::size_t k) {
  detail::check_pool(OpKind::kAvgPool, x.shape(), k);
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(ci * oh + y / k) * ow + xx / k] += xv[(ci * h + y) * w + xx];
  for (auto& v : out.vec()) v *= inv;
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kAvgPool, std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ix);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          gx[(ci * h + y) * w + xx] += inv * g[(ci * oh + y / k) * ow + xx / k];
  });
}

/// Nearest-neighbour upsampling by an integer factor.
inline Var upsample_nearest(const Var& x, std::size_t factor = 2) {
  const auto& s = x.shape();
  if (s.size() != 3 || factor == 0) throw ShapeError(OpKind::kUpsampleNearest, s, "expected [C,H,W]");
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out({c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(ci * oh + y) * ow + xx] = xv[(ci * h + y / factor) * w + xx / factor];
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kUpsampleNearest, std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ix);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          gx[(ci * h + y / factor) * w + xx / factor] += g[(ci * oh + y) * ow + xx];
  });
}

/// Concatenate [C_i,H,W] arrays along the channel axis.
inline Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError(OpKind::kConcatChannels, Shape{}, "no inputs");
  const auto& s0 = parts[0].shape();
  if (s0.size() != 3) throw ShapeError(OpKind::kConcatChannels, s0, "expected [C,H,W]");
  std::size_t channels = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::same_tape(OpKind::kConcatChannels, parts[0], p);
    const auto& s = p.shape();
    if (s.size() != 3 || s[1] != s0[1] || s[2] != s0[2]) {
      throw ShapeError(OpKind::kConcatChannels, s0, s, "spatial dims must agree");
    }
    offsets.push_back(channels * s0[1] * s0[2]);
    channels += s[0];
    ids.push_back(p.id());
  }
  Tensor out({channels, s0[1], s0[2]});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = parts[i].value().vec();
    std::copy(v.begin(), v.end(), out.vec().begin() + static_cast<std::ptrdiff_t>(offsets[i]));
  }
  return parts[0].tape().record(OpKind::kConcatChannels, std::move(out), ids,
                                [ids, offsets](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!detail::wants(t, ids[i])) continue;
      auto& gp = t.grad_mut(ids[i]);
      for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += g[offsets[i] + j];
    }
  });
}

inline Var concat_channels(std::initializer_list<Var> parts) {
  return concat_channels(std::span<const Var>(parts.begin(), parts.size()));
}

/// Channels [begin, begin + count) of a [C,H,W] array.
inline Var slice_channels(const Var& x, std::size_t begin, std::size_t count) {
  const auto& s = x.shape();
  if (s.size() != 3 || count == 0 || begin + count > s[0]) {
    throw ShapeError(OpKind::kSliceChannels, s,
                     "slice [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of range");
  }
  const std::size_t plane = s[1] * s[2];
  const std::size_t offset = begin * plane;
  Tensor out({count, s[1], s[2]});
  std::copy_n(x.value().vec().begin() + static_cast<std::ptrdiff_t>(offset), out.size(), out.vec().begin());
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::kSliceChannels, std::move(out), {ix}, [ix, offset](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ix);
    for (std::size_t j = 0; j < g.size(); ++j) gx[offset + j] += g[j];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

/// Builds a scalar loss from leaves placed on a fresh tape.
using GraphBuilder = std::function<Var(Tape&, std::span<const Var>)>;

namespace detail {

inline double evaluate(const GraphBuilder& f, const std::vector<Tensor>& point) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : point) leaves.push_back(tape.constant(p));
  const double v = f(tape, leaves).value().item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

/// Reverse-mode gradients of f at `point`, one tensor per leaf.
inline std::vector<Tensor> gradients(const GraphBuilder& f, const std::vector<Tensor>& point) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : point) leaves.push_back(tape.leaf(p));
  const Var loss = f(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (const auto& l : leaves) grads.push_back(l.grad());
  return grads;
}

/// max_i |g_ad - g_fd| / (|g_fd| + 1e-8), central differences with `step`.
inline double grad_check(const GraphBuilder& f, const std::vector<Tensor>& point, double step = 1e-5) {
  const auto analytic = gradients(f, point);
  for (const auto& g : analytic) {
    if (!g.all_finite()) throw NumericalError("grad_check: non-finite analytic gradient");
  }
  double worst = 0.0;
  std::vector<Tensor> probe = point;
  for (std::size_t l = 0; l < probe.size(); ++l) {
    for (std::size_t i = 0; i < probe[l].size(); ++i) {
      const double orig = probe[l][i];
      probe[l][i] = orig + step;
      const double fp = detail::evaluate(f, probe);
      probe[l][i] = orig - step;
      const double fm = detail::evaluate(f, probe);
      probe[l][i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[l][i] - fd) / (std::abs(fd) + 1e-8));
    }
  }
  return worst;
}

}  // namespace pglode::ad
