#pragma once

// Tape-based reverse-mode differentiation over a fixed vocabulary of dense
// tensor operations. Each op records its inputs and forward value; backward()
// walks the tape once in reverse.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/tensor.hpp"

namespace clwf {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  matmul,
  affine,
  relu,
  tanh,
  exp,
  log,
  square,
  mean,
  sum,
  concat,
  slice,
  scale,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::scale: return "scale";
  }
  return "?";
}

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> g) : grads_(std::move(g)) {}

  /// Gradient of the loss with respect to `v`; an empty tensor means the loss
  /// does not depend on it.
  const Tensor& operator[](Var v) const { return grads_.at(v.id); }

 private:
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  Var constant(Tensor value) { return push_leaf(std::move(value), false); }
  Var parameter(Tensor value) { return push_leaf(std::move(value), true); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }

  Gradients backward(Var loss) const;

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    std::size_t axis = 0;
    std::size_t begin = 0;
    double factor = 1.0;
  };

  Var push_leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var push(Node n) {
    for (auto i : n.inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  friend Var record(OpKind, std::initializer_list<Var>, Tensor, std::size_t,
                    std::size_t, double);
  friend Var record_many(OpKind, const std::vector<Var>&, Tensor, std::size_t);

  std::vector<Node> nodes_;
};

namespace detail {

[[noreturn]] inline void shape_error(OpKind k, const Shape& a, const Shape& b,
                                     const std::string& what) {
  throw std::invalid_argument(std::string(op_name(k)) + ": " + what + " " +
                              shape_string(a) + " vs " + shape_string(b));
}

inline Tape* same_tape(OpKind k, std::initializer_list<Var> vs) {
  Tape* t = vs.begin()->tape;
  for (const Var& v : vs) {
    if (v.tape != t || t == nullptr) {
      throw std::invalid_argument(std::string(op_name(k)) +
                                  ": inputs live on different tapes");
    }
  }
  return t;
}

// Strides for treating a tensor as (outer, axis, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C(m,n) += A(m,k) * B(k,n)
inline void gemm_acc(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// dA(m,k) += dC(m,n) * B(k,n)^T
inline void gemm_nt_acc(const double* dc, const double* b, double* da,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* dci = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += dci[j] * bp[j];
      da[i * k + p] += s;
    }
  }
}

// dB(k,n) += A(m,k)^T * dC(m,n)
inline void gemm_tn_acc(const double* a, const double* dc, double* db,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* dci = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * dci[j];
    }
  }
}

inline void check_finite(OpKind k, const Tensor& t) {
  if (!t.all_finite()) {
    throw std::domain_error(std::string(op_name(k)) +
                            ": produced non-finite values");
  }
}

}  // namespace detail

inline Var record(OpKind kind, std::initializer_list<Var> inputs, Tensor value,
                  std::size_t axis = 0, std::size_t begin = 0,
                  double factor = 1.0) {
  Tape* tape = detail::same_tape(kind, inputs);
  Tape::Node n;
  n.kind = kind;
  for (const Var& v : inputs) n.inputs.push_back(v.id);
  n.value = std::move(value);
  n.axis = axis;
  n.begin = begin;
  n.factor = factor;
  return tape->push(std::move(n));
}

inline Var record_many(OpKind kind, const std::vector<Var>& inputs,
                       Tensor value, std::size_t axis) {
  Tape* tape = inputs.front().tape;
  Tape::Node n;
  n.kind = kind;
  for (const Var& v : inputs) {
    if (v.tape != tape) {
      throw std::invalid_argument(std::string(op_name(kind)) +
                                  ": inputs live on different tapes");
    }
    n.inputs.push_back(v.id);
  }
  n.value = std::move(value);
  n.axis = axis;
  return tape->push(std::move(n));
}

inline const Tensor& value_of(Var v) { return v.tape->value(v); }

// ---------------------------------------------------------------------------
// Forward ops

inline Var binary_elementwise(OpKind kind, Var a, Var b) {
  const Tensor& x = value_of(a);
  const Tensor& y = value_of(b);
  if (x.shape() != y.shape()) detail::shape_error(kind, x.shape(), y.shape(), "shape mismatch");
  Tensor out(x.shape());
  auto o = out.data();
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    switch (kind) {
      case OpKind::add: o[i] = xs[i] + ys[i]; break;
      case OpKind::sub: o[i] = xs[i] - ys[i]; break;
      default: o[i] = xs[i] * ys[i]; break;
    }
  }
  return record(kind, {a, b}, std::move(out));
}

inline Var add(Var a, Var b) { return binary_elementwise(OpKind::add, a, b); }
inline Var sub(Var a, Var b) { return binary_elementwise(OpKind::sub, a, b); }
inline Var mul(Var a, Var b) { return binary_elementwise(OpKind::mul, a, b); }

inline Var matmul(Var a, Var b) {
  const Tensor& x = value_of(a);
  const Tensor& y = value_of(b);
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    detail::shape_error(OpKind::matmul, x.shape(), y.shape(), "incompatible shapes");
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out(Shape{m, n});
  detail::gemm_acc(x.data().data(), y.data().data(), out.data().data(), m, k, n);
  return record(OpKind::matmul, {a, b}, std::move(out));
}

/// x(m,k) * w(k,n) + bias(1,n), bias added to every row.
inline Var affine(Var x, Var w, Var bias) {
  const Tensor& xv = value_of(x);
  const Tensor& wv = value_of(w);
  const Tensor& bv = value_of(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0)) {
    detail::shape_error(OpKind::affine, xv.shape(), wv.shape(), "incompatible input/weight");
  }
  const std::size_t m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
  if (bv.size() != n) {
    detail::shape_error(OpKind::affine, wv.shape(), bv.shape(), "bias length mismatch");
  }
  Tensor out(Shape{m, n});
  auto o = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = bv[j];
  }
  detail::gemm_acc(xv.data().data(), wv.data().data(), o.data(), m, k, n);
  return record(OpKind::affine, {x, w, bias}, std::move(out));
}

inline Var unary(OpKind kind, Var a) {
  const Tensor& x = value_of(a);
  Tensor out(x.shape());
  auto o = out.data();
  auto xs = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = xs[i];
    switch (kind) {
      case OpKind::relu: o[i] = v > 0.0 ? v : 0.0; break;
      case OpKind::tanh: o[i] = std::tanh(v); break;
      case OpKind::exp: o[i] = std::exp(v); break;
      case OpKind::log:
        if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
        o[i] = std::log(v);
        break;
      default: o[i] = v * v; break;
    }
  }
  if (kind == OpKind::exp) detail::check_finite(kind, out);
  return record(kind, {a}, std::move(out));
}

inline Var relu(Var a) { return unary(OpKind::relu, a); }
inline Var tanh(Var a) { return unary(OpKind::tanh, a); }
inline Var exp(Var a) { return unary(OpKind::exp, a); }
inline Var log(Var a) { return unary(OpKind::log, a); }
inline Var square(Var a) { return unary(OpKind::square, a); }

inline Var sum(Var a) {
  return record(OpKind::sum, {a}, Tensor::scalar(clwf::sum(value_of(a))));
}

inline Var mean(Var a) {
  const Tensor& x = value_of(a);
  if (x.empty()) throw std::invalid_argument("mean: empty tensor");
  return record(OpKind::mean, {a},
                Tensor::scalar(clwf::sum(x) / static_cast<double>(x.size())));
}

/// Multiply by a fixed scalar.
inline Var scale(Var a, double factor) {
  const Tensor& x = value_of(a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
  return record(OpKind::scale, {a}, std::move(out), 0, 0, factor);
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = value_of(parts.front()).shape();
  if (axis >= first.size()) {
    throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                " out of range for " + shape_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = value_of(p).shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) detail::shape_error(OpKind::concat, first, s, "incompatible shapes");
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const auto outer_split = detail::split_axis(out_shape, axis);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = value_of(p);
    const auto s = detail::split_axis(x.shape(), axis);
    const std::size_t block = s.extent * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.data().begin() + o * block, block,
                  out.data().begin() + o * outer_split.extent * s.inner + offset * s.inner);
    }
    offset += s.extent;
  }
  return record_many(OpKind::concat, parts, std::move(out), axis);
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& x = value_of(a);
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") on axis " +
                                std::to_string(axis) + " invalid for " +
                                shape_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const auto s = detail::split_axis(x.shape(), axis);
  const std::size_t len = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().begin() + (o * s.extent + begin) * s.inner, len,
                out.data().begin() + o * len);
  }
  return record(OpKind::slice, {a}, std::move(out), axis, begin);
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double f, Var a) { return scale(a, f); }

// ---------------------------------------------------------------------------
// Reverse pass

inline Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) throw std::invalid_argument("backward: loss is not on this tape");
  const Tensor& lv = nodes_.at(loss.id).value;
  if (lv.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(lv.shape()));
  }
  std::vector<Tensor> g(nodes_.size());
  g[loss.id] = Tensor(lv.shape(), 1.0);

  auto accum = [&](std::size_t id) -> Tensor& {
    if (g[id].empty() && !nodes_[id].value.empty()) g[id] = Tensor(nodes_[id].value.shape());
    return g[id];
  };

  for (std::size_t idx = loss.id + 1; idx-- > 0;) {
    const Node& n = nodes_[idx];
    if (n.kind == OpKind::leaf || !n.requires_grad || g[idx].empty()) continue;
    const auto go = g[idx].data();
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
    const Tensor& out = n.value;

    switch (n.kind) {
      case OpKind::add:
      case OpKind::sub: {
        if (wants(0)) {
          auto ga = accum(n.inputs[0]).data();
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (wants(1)) {
          auto gb = accum(n.inputs[1]).data();
          const double sgn = n.kind == OpKind::add ? 1.0 : -1.0;
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += sgn * go[i];
        }
        break;
      }
      case OpKind::mul: {
        const auto x = nodes_[n.inputs[0]].value.data();
        const auto y = nodes_[n.inputs[1]].value.data();
        if (wants(0)) {
          auto ga = accum(n.inputs[0]).data();
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
        }
        if (wants(1)) {
          auto gb = accum(n.inputs[1]).data();
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * x[i];
        }
        break;
      }
      case OpKind::matmul:
      case OpKind::affine: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        const Tensor& w = nodes_[n.inputs[1]].value;
        const std::size_t m = x.dim(0), k = x.dim(1), cols = w.dim(1);
        if (wants(0)) {
          detail::gemm_nt_acc(go.data(), w.data().data(),
                              accum(n.inputs[0]).data().data(), m, k, cols);
        }
        if (wants(1)) {
          detail::gemm_tn_acc(x.data().data(), go.data(),
                              accum(n.inputs[1]).data().data(), m, k, cols);
        }
        if (n.kind == OpKind::affine && wants(2)) {
          auto gb = accum(n.inputs[2]).data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < cols; ++j) gb[j] += go[i * cols + j];
          }
        }
        break;
      }
      case OpKind::relu:
      case OpKind::tanh:
      case OpKind::exp:
      case OpKind::log:
      case OpKind::square: {
        if (!wants(0)) break;
        const auto x = nodes_[n.inputs[0]].value.data();
        const auto y = out.data();
        auto ga = accum(n.inputs[0]).data();
        for (std::size_t i = 0; i < go.size(); ++i) {
          double d = 0.0;
          switch (n.kind) {
            case OpKind::relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
            case OpKind::tanh: d = 1.0 - y[i] * y[i]; break;
            case OpKind::exp: d = y[i]; break;
            case OpKind::log: d = 1.0 / x[i]; break;
            default: d = 2.0 * x[i]; break;
          }
          ga[i] += go[i] * d;
        }
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        if (!wants(0)) break;
        auto ga = accum(n.inputs[0]).data();
        const double s = n.kind == OpKind::sum ? go[0] : go[0] / static_cast<double>(ga.size());
        for (double& v : ga) v += s;
        break;
      }
      case OpKind::scale: {
        if (!wants(0)) break;
        auto ga = accum(n.inputs[0]).data();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += n.factor * go[i];
        break;
      }
      case OpKind::concat: {
        const auto os = detail::split_axis(out.shape(), n.axis);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& x = nodes_[n.inputs[k]].value;
          const auto s = detail::split_axis(x.shape(), n.axis);
          if (wants(k)) {
            auto ga = accum(n.inputs[k]).data();
            const std::size_t block = s.extent * s.inner;
            for (std::size_t o = 0; o < s.outer; ++o) {
              const double* src = go.data() + o * os.extent * s.inner + offset * s.inner;
              double* dst = ga.data() + o * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          offset += s.extent;
        }
        break;
      }
      case OpKind::slice: {
        if (!wants(0)) break;
        const Tensor& x = nodes_[n.inputs[0]].value;
        const auto s = detail::split_axis(x.shape(), n.axis);
        const std::size_t width = out.shape()[n.axis];
        const std::size_t len = width * s.inner;
        auto ga = accum(n.inputs[0]).data();
        for (std::size_t o = 0; o < s.outer; ++o) {
          double* dst = ga.data() + (o * s.extent + n.begin) * s.inner;
          const double* src = go.data() + o * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        break;
      }
      case OpKind::leaf:
        break;
    }
  }
  return Gradients(std::move(g));
}

}  // namespace clwf
