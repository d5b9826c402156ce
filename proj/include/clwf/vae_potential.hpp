#pragma once

// VAE over observed series and the potential correction derived from its
// reconstruction residual: v = -(x - VAE(x)) / sigma_p^2.

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

struct VaeParams {
  std::size_t K = 0;
  std::size_t L = 0;
  std::size_t latent_dim = 0;
  Mlp encoder;  // [x * mask, mask] (2*K*L) -> [mean, log_var] (2*latent)
  Mlp decoder;  // latent -> K*L

  std::size_t state_dim() const { return K * L; }

  friend bool operator==(const VaeParams&, const VaeParams&) = default;
};

struct PotentialConfig {
  double sigma_p_sq = 0.01;

  void validate() const {
    if (!(sigma_p_sq > 0.0)) throw std::invalid_argument("potential: sigma_p_sq must be > 0");
  }
};

inline VaeParams init_vae(std::size_t K, std::size_t L, const std::vector<std::size_t>& hidden_dims,
                          std::size_t latent_dim, std::uint64_t seed,
                          Activation act = Activation::tanh) {
  if (K == 0 || L == 0 || latent_dim == 0) throw std::invalid_argument("init_vae: dims must be positive");
  VaeParams p;
  p.K = K;
  p.L = L;
  p.latent_dim = latent_dim;
  Rng rng = make_rng(seed, 0x766165);
  std::vector<std::size_t> enc{2 * K * L};
  enc.insert(enc.end(), hidden_dims.begin(), hidden_dims.end());
  enc.push_back(2 * latent_dim);
  std::vector<std::size_t> dec{latent_dim};
  dec.insert(dec.end(), hidden_dims.rbegin(), hidden_dims.rend());
  dec.push_back(K * L);
  p.encoder = make_mlp(enc, act, rng);
  p.decoder = make_mlp(dec, act, rng);
  return p;
}

struct VaeVars {
  std::vector<Var> encoder;
  std::vector<Var> decoder;

  std::vector<Var> all() const {
    std::vector<Var> v = encoder;
    v.insert(v.end(), decoder.begin(), decoder.end());
    return v;
  }
};

inline VaeVars bind(Tape& tape, const VaeParams& p) {
  return VaeVars{bind(tape, p.encoder), bind(tape, p.decoder)};
}

inline std::vector<Tensor*> parameters(VaeParams& p) {
  auto v = p.encoder.parameters();
  auto d = p.decoder.parameters();
  v.insert(v.end(), d.begin(), d.end());
  return v;
}

struct VaeOutputs {
  Var reconstruction;  // (B, K*L)
  Var mean;            // (B, latent)
  Var log_var;         // (B, latent)
};

/// z = mean + exp(log_var / 2) * eps; `eps` is (B, latent), zero for the
/// deterministic path. Missing entries of x must already be zero-filled.
inline VaeOutputs vae_forward(Tape& tape, const VaeParams& p, const VaeVars& vars, const Tensor& x,
                              const Tensor& mask, const Tensor& eps) {
  const std::size_t d = p.state_dim();
  const std::size_t b = x.size() / d;
  if (x.size() != b * d || mask.size() != x.size() || eps.size() != b * p.latent_dim) {
    throw std::invalid_argument("vae_forward: shape mismatch x " + shape_string(x.shape()) +
                                " mask " + shape_string(mask.shape()) + " eps " +
                                shape_string(eps.shape()));
  }
  const Shape rows{b, d};
  Var input = concat({tape.constant(x.reshaped(rows)), tape.constant(mask.reshaped(rows))}, 1);
  Var stats = mlp_forward(p.encoder, vars.encoder, input);
  Var mean = slice(stats, 1, 0, p.latent_dim);
  Var log_var = slice(stats, 1, p.latent_dim, 2 * p.latent_dim);
  Var noise = tape.constant(eps.reshaped(Shape{b, p.latent_dim}));
  Var z = add(mean, mul(exp(scale(log_var, 0.5)), noise));
  return VaeOutputs{mlp_forward(p.decoder, vars.decoder, z), mean, log_var};
}

inline VaeOutputs vae_forward(Tape& tape, const VaeParams& p, const VaeVars& vars, const Tensor& x,
                              const Tensor& mask, Rng& rng) {
  const std::size_t b = x.size() / p.state_dim();
  return vae_forward(tape, p, vars, x, mask, normal_tensor(Shape{b, p.latent_dim}, 1.0, rng));
}

/// Masked reconstruction MSE over observed entries plus beta * KL(q || N(0, I)),
/// KL summed over latent dims and averaged over the batch.
inline Var vae_loss(Tape& tape, const VaeParams& p, const VaeVars& vars, const Tensor& x,
                    const Tensor& mask, const Tensor& eps, double beta) {
  double observed = 0.0;
  for (double m : mask.data()) observed += m;
  if (observed <= 0.0) throw std::invalid_argument("vae_loss: mask has no observed entries");
  const VaeOutputs out = vae_forward(tape, p, vars, x, mask, eps);
  const std::size_t b = x.size() / p.state_dim();
  const Shape rows{b, p.state_dim()};
  Var target = tape.constant(x.reshaped(rows));
  Var m = tape.constant(mask.reshaped(rows));
  Var recon = scale(sum(mul(square(sub(out.reconstruction, target)), m)), 1.0 / observed);
  Var kl_terms = sub(add(square(out.mean), exp(out.log_var)), out.log_var);
  Var offset = tape.constant(Tensor::scalar(-static_cast<double>(b * p.latent_dim)));
  Var kl = scale(add(sum(kl_terms), offset), 0.5 / static_cast<double>(b));
  return add(recon, scale(kl, beta));
}

inline Tensor draw_latent_noise(const VaeParams& p, std::size_t batch, Rng& rng) {
  return normal_tensor(Shape{batch, p.latent_dim}, 1.0, rng);
}

/// Deterministic reconstruction (eps = 0) of fully observed states (B, K*L).
inline Tensor reconstruct(const VaeParams& p, const Tensor& x) {
  const std::size_t b = x.size() / p.state_dim();
  Tape tape;
  const VaeVars vars = bind(tape, p);
  const Tensor ones(x.shape(), 1.0);
  const Tensor eps(Shape{b, p.latent_dim});
  return tape.value(vae_forward(tape, p, vars, x, ones, eps).reconstruction).reshaped(x.shape());
}

/// v = -(x_t - VAE(x_t)) / sigma_p^2 with the reconstruction held constant.
inline Tensor potential_gradient(const VaeParams& p, const Tensor& x_t, const PotentialConfig& cfg) {
  cfg.validate();
  const Tensor r = reconstruct(p, x_t);
  Tensor v(x_t.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -(x_t[i] - r[i]) / cfg.sigma_p_sq;
  return v;
}

}  // namespace clwf
