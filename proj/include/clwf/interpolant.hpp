#pragma once

#include <cmath>
#include <stdexcept>

#include "clwf/random.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

struct InterpolantConfig {
  double horizon = 1.0;        // T
  double sigma_gamma = 0.001;  // std of the target jitter
  double alpha = 0.0;          // weight of the bridge noise, constant in t
  double sigma_0 = 0.1;        // std of the source noise

  void validate() const {
    if (!(horizon > 0.0)) throw std::invalid_argument("interpolant: horizon must be > 0");
    if (!(sigma_gamma >= 0.0)) throw std::invalid_argument("interpolant: sigma_gamma must be >= 0");
    if (!(alpha >= 0.0)) throw std::invalid_argument("interpolant: alpha must be >= 0");
    if (!(sigma_0 > 0.0)) throw std::invalid_argument("interpolant: sigma_0 must be > 0");
  }
};

struct InterpolantSample {
  double t = 0.0;
  Tensor x_t;
  Tensor u_target;
};

inline double sample_time(const InterpolantConfig& cfg, Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, cfg.horizon)(rng);
}

/// x_t = (t/T)(xT + gamma) + (1 - t/T) x0 + alpha sqrt(t(T-t)/T) eps,
/// gamma ~ N(0, sigma_gamma^2 I), eps ~ N(0, I), both drawn fresh per call.
inline Tensor interpolate(const Tensor& x0, const Tensor& xT, double t, const InterpolantConfig& cfg,
                          Rng& rng) {
  if (x0.shape() != xT.shape()) {
    throw std::invalid_argument("interpolate: endpoint shapes differ " + shape_string(x0.shape()) +
                                " vs " + shape_string(xT.shape()));
  }
  if (t < 0.0 || t > cfg.horizon) throw std::invalid_argument("interpolate: t outside [0, T]");
  const double w = t / cfg.horizon;
  const double bridge = cfg.alpha * std::sqrt(t * (cfg.horizon - t) / cfg.horizon);
  std::normal_distribution<double> unit(0.0, 1.0);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double gamma = cfg.sigma_gamma * unit(rng);
    const double eps = unit(rng);
    out[i] = w * (xT[i] + gamma) + (1.0 - w) * x0[i] + bridge * eps;
  }
  return out;
}

/// (xT - x0) / T, without the jitter term.
inline Tensor target_velocity(const Tensor& x0, const Tensor& xT, const InterpolantConfig& cfg) {
  if (x0.shape() != xT.shape()) {
    throw std::invalid_argument("target_velocity: endpoint shapes differ " +
                                shape_string(x0.shape()) + " vs " + shape_string(xT.shape()));
  }
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (xT[i] - x0[i]) / cfg.horizon;
  return out;
}

inline InterpolantSample make_interpolant_sample(const Tensor& x0, const Tensor& xT,
                                                 const InterpolantConfig& cfg, Rng& rng) {
  InterpolantSample s;
  s.t = sample_time(cfg, rng);
  s.x_t = interpolate(x0, xT, s.t, cfg, rng);
  s.u_target = target_velocity(x0, xT, cfg);
  return s;
}

}  // namespace clwf
