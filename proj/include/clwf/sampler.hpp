#pragma once

// Euler integration of the learned ODE from noise to imputation, with an
// optional potential correction after each base step, Monte-Carlo averaging
// and kinetic-energy diagnostics.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "clwf/random.hpp"
#include "clwf/tensor.hpp"
#include "clwf/vae_potential.hpp"
#include "clwf/velocity_model.hpp"

namespace clwf {

struct SampleConfig {
  std::size_t steps = 15;        // N
  std::size_t mc_samples = 50;   // M
  bool rao_blackwell = false;
  std::uint64_t seed = 0;
  double horizon = 1.0;          // T
  double sigma_0 = 0.1;
  PotentialConfig potential;
  std::size_t threads = 1;

  void validate() const {
    if (steps == 0) throw std::invalid_argument("sampler: steps must be >= 1");
    if (mc_samples == 0) throw std::invalid_argument("sampler: mc_samples must be >= 1");
    if (!(horizon > 0.0)) throw std::invalid_argument("sampler: horizon must be > 0");
    if (!(sigma_0 > 0.0)) throw std::invalid_argument("sampler: sigma_0 must be > 0");
    potential.validate();
  }
};

/// states[k] is the (B, D) state at times[k] = k T / N. velocities[k] is the
/// base field and corrections[k] the potential step (empty without RB).
struct Trajectory {
  std::vector<Tensor> states;
  std::vector<double> times;
  std::vector<Tensor> velocities;
  std::vector<Tensor> corrections;
  double dt = 0.0;

  const Tensor& final_state() const { return states.back(); }
};

using VectorField = std::function<Tensor(const Tensor& x, double t)>;

/// x <- x + field(x, t_k) dt; then, with a corrector, x <- x + corrector(x, t_k) dt.
/// Both sub-steps share t_k.
inline Trajectory integrate(const VectorField& field, Tensor x0, std::size_t steps, double horizon,
                            const VectorField& corrector = {}) {
  if (steps == 0) throw std::invalid_argument("integrate: steps must be >= 1");
  Trajectory tr;
  tr.dt = horizon / static_cast<double>(steps);
  tr.states.reserve(steps + 1);
  tr.states.push_back(std::move(x0));
  tr.times.push_back(0.0);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * horizon / static_cast<double>(steps);
    Tensor x = tr.states.back();
    Tensor v = field(x, t);
    if (v.size() != x.size()) throw std::invalid_argument("integrate: field output size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += v[i] * tr.dt;
    tr.velocities.push_back(std::move(v));
    if (corrector) {
      Tensor c = corrector(x, t);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += c[i] * tr.dt;
      tr.corrections.push_back(std::move(c));
    }
    tr.states.push_back(std::move(x));
    tr.times.push_back(static_cast<double>(k + 1) * horizon / static_cast<double>(steps));
  }
  return tr;
}

namespace detail {

inline Tensor tile_rows(const Tensor& row, std::size_t times) {
  const std::size_t d = row.size();
  Tensor out(Shape{times, d});
  for (std::size_t r = 0; r < times; ++r) std::copy(row.data().begin(), row.data().end(), out.row(r).begin());
  return out;
}

}  // namespace detail

/// Field of a trained model for fixed conditioning; x_cond/cond_mask are
/// (B, D) matching the state batch.
inline VectorField model_field(const ModelParams& params, Tensor x_cond, Tensor cond_mask) {
  return [&params, x_cond = std::move(x_cond), cond_mask = std::move(cond_mask)](const Tensor& x, double t) {
    const std::vector<double> ts(x.dim(0), t);
    return predict_velocity(params, x, x_cond, cond_mask, ts);
  };
}

/// Potential correction evaluated on the full series: observed values at
/// condition positions, the current state elsewhere. Applied only off the
/// condition positions.
inline VectorField potential_field(const VaeParams& vae, const PotentialConfig& pc, Tensor x_cond,
                                   Tensor cond_mask) {
  return [&vae, pc, x_cond = std::move(x_cond), cond_mask = std::move(cond_mask)](const Tensor& x, double) {
    Tensor full(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) full[i] = cond_mask[i] != 0.0 ? x_cond[i] : x[i];
    Tensor v = potential_gradient(vae, full, pc);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (cond_mask[i] != 0.0) v[i] = 0.0;
    }
    return v;
  };
}

/// Trajectories for a batch of conditions (B, D), starting from
/// x_0 ~ N(0, sigma_0^2 I) drawn from `rng`.
inline Trajectory euler_trajectory(const ModelParams& params, const Tensor& x_cond, const Tensor& cond_mask,
                                   const SampleConfig& cfg, Rng& rng, const VaeParams* vae = nullptr) {
  cfg.validate();
  if (cfg.rao_blackwell && vae == nullptr) {
    throw std::invalid_argument("euler_trajectory: rao_blackwell requested but no VAE provided");
  }
  const std::size_t d = params.state_dim();
  if (x_cond.size() % d != 0 || x_cond.size() != cond_mask.size() || x_cond.empty()) {
    throw std::invalid_argument("euler_trajectory: condition shape " + shape_string(x_cond.shape()) +
                                " incompatible with K*L=" + std::to_string(d));
  }
  const Shape rows{x_cond.size() / d, d};
  Tensor xc = x_cond.reshaped(rows), cm = cond_mask.reshaped(rows);
  Tensor x0 = normal_tensor(rows, cfg.sigma_0, rng);
  VectorField corrector;
  if (cfg.rao_blackwell) corrector = potential_field(*vae, cfg.potential, xc, cm);
  return integrate(model_field(params, xc, cm), std::move(x0), cfg.steps, cfg.horizon, corrector);
}

struct Imputation {
  Tensor point;    // (D)
  Tensor samples;  // (M, D)
};

/// M trajectories for one series (batched together); the point estimate is
/// their elementwise mean. Condition positions are overwritten with the
/// observed values in both outputs.
inline Imputation impute(const ModelParams& params, const Tensor& x_cond, const Tensor& cond_mask,
                         const SampleConfig& cfg, const VaeParams* vae = nullptr) {
  cfg.validate();
  const std::size_t d = params.state_dim();
  if (x_cond.size() != d || cond_mask.size() != d) {
    throw std::invalid_argument("impute: expected a single series of " + std::to_string(d) + " entries, got " +
                                shape_string(x_cond.shape()));
  }
  Rng rng = make_rng(cfg.seed, 0x696d70);
  const Tensor flat_c = x_cond.reshaped(Shape{d});
  const Tensor flat_m = cond_mask.reshaped(Shape{d});
  const Trajectory tr = euler_trajectory(params, detail::tile_rows(flat_c, cfg.mc_samples),
                                         detail::tile_rows(flat_m, cfg.mc_samples), cfg, rng, vae);
  Imputation out{Tensor(Shape{d}), tr.final_state()};
  for (std::size_t m = 0; m < cfg.mc_samples; ++m) {
    auto row = out.samples.row(m);
    for (std::size_t i = 0; i < d; ++i) {
      if (flat_m[i] != 0.0) row[i] = flat_c[i];
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t m = 0; m < cfg.mc_samples; ++m) s += out.samples(m, i);
    out.point[i] = flat_m[i] != 0.0 ? flat_c[i] : s / static_cast<double>(cfg.mc_samples);
  }
  return out;
}

/// Imputes every series of a (B, D) batch. Series b uses seed stream b, so
/// results do not depend on the thread count.
inline std::vector<Imputation> impute_batch(const ModelParams& params, const Tensor& x_cond,
                                            const Tensor& cond_mask, const SampleConfig& cfg,
                                            const VaeParams* vae = nullptr) {
  const std::size_t d = params.state_dim();
  const std::size_t b = x_cond.size() / d;
  std::vector<Imputation> out(b);
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < b; i += stride) {
      SampleConfig c = cfg;
      c.seed = cfg.seed * 1000003ull + i;
      const Tensor xc(Shape{d}, std::vector<double>(x_cond.data().begin() + i * d,
                                                     x_cond.data().begin() + (i + 1) * d));
      const Tensor cm(Shape{d}, std::vector<double>(cond_mask.data().begin() + i * d,
                                                     cond_mask.data().begin() + (i + 1) * d));
      out[i] = impute(params, xc, cm, c, vae);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, b));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
  }
  return out;
}

/// Per-row (T/N) sum_k 0.5 |total step velocity_k|^2.
inline std::vector<double> kinetic_energies(const Trajectory& tr) {
  if (tr.velocities.empty()) throw std::invalid_argument("kinetic_energy: empty trajectory");
  const Tensor& first = tr.velocities.front();
  const std::size_t rows = first.rank() >= 2 ? first.dim(0) : 1;
  const std::size_t d = first.size() / rows;
  std::vector<double> e(rows, 0.0);
  for (std::size_t k = 0; k < tr.velocities.size(); ++k) {
    const Tensor& v = tr.velocities[k];
    const Tensor* c = tr.corrections.empty() ? nullptr : &tr.corrections[k];
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double total = v[r * d + i] + (c ? (*c)[r * d + i] : 0.0);
        s += total * total;
      }
      e[r] += 0.5 * s * tr.dt;
    }
  }
  return e;
}

/// Mean kinetic energy over the trajectory batch.
inline double kinetic_energy(const Trajectory& tr) {
  const auto e = kinetic_energies(tr);
  double s = 0.0;
  for (double x : e) s += x;
  return s / static_cast<double>(e.size());
}

struct PairedTest {
  std::size_t count = 0;
  double mean_difference = 0.0;
  double t_statistic = 0.0;
  double p_value = 1.0;  // one-sided, H1: mean difference < 0
};

/// One-sided paired t-test on per-pair differences.
inline PairedTest paired_t_test(std::span<const double> diff) {
  PairedTest r;
  r.count = diff.size();
  if (diff.empty()) throw std::invalid_argument("paired_t_test: no pairs");
  const double n = static_cast<double>(r.count);
  for (double d : diff) r.mean_difference += d;
  r.mean_difference /= n;
  if (r.count < 2) return r;
  double ss = 0.0;
  for (double d : diff) ss += (d - r.mean_difference) * (d - r.mean_difference);
  const double se = std::sqrt(ss / (n - 1.0) / n);
  if (se == 0.0) {
    r.p_value = r.mean_difference < 0.0 ? 0.0 : (r.mean_difference > 0.0 ? 1.0 : 0.5);
    return r;
  }
  r.t_statistic = r.mean_difference / se;
  boost::math::students_t dist(n - 1.0);
  r.p_value = boost::math::cdf(dist, r.t_statistic);
  return r;
}

struct RbReport {
  std::size_t count = 0;
  double mse_base = 0.0;
  double mse_rb = 0.0;
  double mean_difference = 0.0;  // mean of (rb sq err - base sq err)
  double t_statistic = 0.0;      // paired, negative favours RB
  double p_value = 1.0;          // one-sided, H1: RB error smaller
  std::vector<double> base_sq_err;
  std::vector<double> rb_sq_err;
};

/// Paired comparison of squared errors of two estimators against the same truth.
inline RbReport rb_variance_test(std::span<const double> base, std::span<const double> rb,
                                 std::span<const double> truth) {
  if (base.size() != truth.size() || rb.size() != truth.size()) {
    throw std::invalid_argument("rb_variance_test: length mismatch (" + std::to_string(base.size()) + ", " +
                                std::to_string(rb.size()) + ", " + std::to_string(truth.size()) + ")");
  }
  if (truth.empty()) throw std::invalid_argument("rb_variance_test: no entries");
  RbReport r;
  r.count = truth.size();
  std::vector<double> diff(r.count);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    r.base_sq_err.push_back((base[i] - truth[i]) * (base[i] - truth[i]));
    r.rb_sq_err.push_back((rb[i] - truth[i]) * (rb[i] - truth[i]));
    r.mse_base += r.base_sq_err.back();
    r.mse_rb += r.rb_sq_err.back();
    diff[i] = r.rb_sq_err.back() - r.base_sq_err.back();
  }
  r.mse_base /= static_cast<double>(r.count);
  r.mse_rb /= static_cast<double>(r.count);
  const PairedTest pt = paired_t_test(diff);
  r.mean_difference = pt.mean_difference;
  r.t_statistic = pt.t_statistic;
  r.p_value = pt.p_value;
  return r;
}

}  // namespace clwf
