#pragma once

// Conditional velocity field: an MLP over
//   [x_t, x_cond, cond_mask, sinusoidal(t)]
// producing one velocity per state coordinate.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/autodiff.hpp"
#include "clwf/nn.hpp"
#include "clwf/random.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

struct ModelParams {
  std::size_t K = 0;
  std::size_t L = 0;
  std::size_t time_embed_dim = 32;
  std::vector<std::size_t> hidden_dims;
  Mlp net;

  std::size_t state_dim() const { return K * L; }
  std::size_t input_dim() const { return 3 * K * L + time_embed_dim; }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// One series worth of model input. Tensors are (K, L) or flat (K*L).
struct ConditionalInput {
  Tensor x_t;
  Tensor x_cond;
  Tensor cond_mask;
  double t = 0.0;
};

inline ModelParams init_params(std::size_t K, std::size_t L, std::vector<std::size_t> hidden_dims,
                               std::size_t time_embed_dim, std::uint64_t seed,
                               Activation act = Activation::tanh) {
  if (K == 0 || L == 0 || time_embed_dim == 0 || time_embed_dim % 2 != 0) {
    throw std::invalid_argument("init_params: K, L must be positive and time_embed_dim positive and even");
  }
  ModelParams p;
  p.K = K;
  p.L = L;
  p.time_embed_dim = time_embed_dim;
  p.hidden_dims = std::move(hidden_dims);
  std::vector<std::size_t> dims{p.input_dim()};
  dims.insert(dims.end(), p.hidden_dims.begin(), p.hidden_dims.end());
  dims.push_back(p.state_dim());
  Rng rng = make_rng(seed, 0x76656c);
  p.net = make_mlp(dims, act, rng);
  return p;
}

/// (B, dim) rows of [sin(f_i t), cos(f_i t)] with frequencies spaced
/// geometrically from 1 to 64 rad per unit time.
inline Tensor time_embedding(std::span<const double> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor out(Shape{t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double frac = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
      const double freq = std::exp(frac * std::log(64.0));
      out(b, i) = std::sin(freq * t[b]);
      out(b, half + i) = std::cos(freq * t[b]);
    }
  }
  return out;
}

/// Batched forward on the tape. State tensors are (B, K*L); `params_vars`
/// comes from bind(tape, params.net).
inline Var velocity_forward(Tape& tape, const ModelParams& params, std::span<const Var> params_vars,
                            const Tensor& x_t, const Tensor& x_cond, const Tensor& cond_mask,
                            std::span<const double> t) {
  const std::size_t d = params.state_dim();
  const std::size_t b = t.size();
  for (const Tensor* x : {&x_t, &x_cond, &cond_mask}) {
    if (x->size() != b * d) {
      throw std::invalid_argument("velocity_forward: expected " + std::to_string(b) + " x " +
                                  std::to_string(d) + " state, got " + shape_string(x->shape()));
    }
  }
  const Shape rows{b, d};
  Var input = concat({tape.constant(x_t.reshaped(rows)), tape.constant(x_cond.reshaped(rows)),
                      tape.constant(cond_mask.reshaped(rows)),
                      tape.constant(time_embedding(t, params.time_embed_dim))},
                     1);
  return mlp_forward(params.net, params_vars, input);
}

/// Velocity for a batch without keeping the tape around.
inline Tensor predict_velocity(const ModelParams& params, const Tensor& x_t, const Tensor& x_cond,
                               const Tensor& cond_mask, std::span<const double> t) {
  Tape tape;
  const auto vars = bind(tape, params.net);
  return tape.value(velocity_forward(tape, params, vars, x_t, x_cond, cond_mask, t));
}

/// Single-series forward; output has the shape of input.x_t.
inline Tensor forward(const ModelParams& params, const ConditionalInput& input) {
  const double t[1] = {input.t};
  Tensor v = predict_velocity(params, input.x_t, input.x_cond, input.cond_mask, t);
  return v.reshaped(input.x_t.shape());
}

}  // namespace clwf
