#pragma once

// Small multilayer perceptrons on the tape, plus the Adam optimizer and
// global-norm gradient clipping used by both trainers.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/autodiff.hpp"
#include "clwf/random.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

enum class Activation : std::uint32_t { relu = 0, tanh = 1 };

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + s + "' (expected relu|tanh)");
}

inline const char* activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

struct Dense {
  Tensor weight;  // (in, out)
  Tensor bias;    // (1, out)

  friend bool operator==(const Dense&, const Dense&) = default;
};

/// Fully connected network; activation on hidden layers, linear output.
struct Mlp {
  std::vector<Dense> layers;
  Activation activation = Activation::tanh;

  std::size_t input_dim() const { return layers.front().weight.dim(0); }
  std::size_t output_dim() const { return layers.back().weight.dim(1); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

/// Weights ~ N(0, 1/fan_in), biases zero.
inline Mlp make_mlp(std::span<const std::size_t> dims, Activation act, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output dims");
  Mlp net;
  net.activation = act;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] == 0 || dims[i + 1] == 0) throw std::invalid_argument("make_mlp: zero layer width");
    Dense d;
    d.weight = normal_tensor(Shape{dims[i], dims[i + 1]},
                             1.0 / std::sqrt(static_cast<double>(dims[i])), rng);
    d.bias = Tensor(Shape{1, dims[i + 1]});
    net.layers.push_back(std::move(d));
  }
  return net;
}

/// Parameters of `net` registered on `tape`, in Mlp::parameters() order.
inline std::vector<Var> bind(Tape& tape, const Mlp& net) {
  std::vector<Var> vars;
  for (const auto& l : net.layers) {
    vars.push_back(tape.parameter(l.weight));
    vars.push_back(tape.parameter(l.bias));
  }
  return vars;
}

inline Var mlp_forward(const Mlp& net, std::span<const Var> params, Var input) {
  Var h = input;
  const std::size_t n = net.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    h = affine(h, params[2 * i], params[2 * i + 1]);
    if (i + 1 < n) h = net.activation == Activation::relu ? relu(h) : tanh(h);
  }
  return h;
}

inline std::vector<Tensor> collect_gradients(const Gradients& g, std::span<const Var> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (Var p : params) {
    const Tensor& gp = g[p];
    out.push_back(gp.empty() ? Tensor(value_of(p).shape()) : gp);
  }
  return out;
}

inline double global_norm(std::span<const Tensor> grads) {
  double s = 0.0;
  for (const auto& g : grads) s += squared_norm(g.data());
  return std::sqrt(s);
}

/// Rescales so the global L2 norm is at most max_norm; returns the norm before clipping.
inline double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.data()) v *= f;
    }
  }
  return norm;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update in place.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                      AdamState& state, double lr, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->data();
    auto g = grads[k].data();
    if (g.size() != p.size()) {
      throw std::invalid_argument("adam_step: shape mismatch " + shape_string(params[k]->shape()) +
                                  " vs " + shape_string(grads[k].shape()));
    }
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

/// Linear decay from `base` toward zero across `epochs`.
inline double linear_lr(double base, std::size_t epoch, std::size_t epochs) {
  return base * (1.0 - static_cast<double>(epoch) / static_cast<double>(epochs));
}

}  // namespace clwf
