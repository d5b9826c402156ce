#pragma once

// Built-in end-to-end experiments: Gaussian flow recovery, coupling vs.
// kinetic energy, Euler order, sinusoid imputation and the potential-correction
// ablation. Each returns its measurements and, given an output directory,
// writes plain TSV point files for plotting.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/checkpoint.hpp"
#include "clwf/config.hpp"
#include "clwf/data_eval.hpp"
#include "clwf/sampler.hpp"
#include "clwf/trainer.hpp"

namespace clwf {

namespace detail {

class TsvWriter {
 public:
  TsvWriter(const std::string& dir, const std::string& name, const std::vector<std::string>& header) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    path_ = (std::filesystem::path(dir) / name).string();
    out_.open(path_);
    if (!out_) throw std::runtime_error("cannot write '" + path_ + "'");
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "\t" : "") << header[i];
    out_ << '\n';
  }

  bool enabled() const { return out_.is_open(); }

  template <class... Cells>
  void row(const Cells&... cells) {
    if (!enabled()) return;
    std::size_t i = 0;
    ((out_ << (i++ ? "\t" : "") << cell(cells)), ...);
    out_ << '\n';
  }

 private:
  static std::string cell(double v) { return format_number(v); }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  template <class I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }

  std::string path_;
  std::ofstream out_;
};

inline void write_trajectories(TsvWriter& w, const Trajectory& tr, std::size_t max_rows, const std::string& tag = {}) {
  if (!w.enabled()) return;
  const std::size_t rows = std::min(max_rows, tr.states.front().dim(0));
  const std::size_t d = tr.states.front().size() / tr.states.front().dim(0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
      const double x = tr.states[k][r * d], y = d > 1 ? tr.states[k][r * d + 1] : 0.0;
      if (tag.empty()) {
        w.row(r, k, tr.times[k], x, y);
      } else {
        w.row(tag, r, k, tr.times[k], x, y);
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gaussian -> Gaussian

/// OT between N(0, s0^2 I) and N(m, s1^2 I) is x -> m + (s1/s0) x; along the
/// straight interpolation the velocity at (x, t) is m + (s1/s0 - 1) x0 with
/// x0 = (x - t m) / (1 - t + t s1/s0), for horizon 1.
struct AffineGaussianOt {
  std::array<double, 2> mean{2.0, 0.0};
  double source_std = 0.1;
  double target_std = 0.3;

  std::array<double, 2> velocity(std::array<double, 2> x, double t) const {
    const double r = target_std / source_std;
    std::array<double, 2> v{};
    for (int i = 0; i < 2; ++i) {
      const double x0 = (x[i] - t * mean[i]) / (1.0 - t + t * r);
      v[i] = mean[i] + (r - 1.0) * x0;
    }
    return v;
  }
};

struct GaussianFlowResult {
  double grid_mse = 0.0;  // mean over grid points of |learned - analytic|^2
  std::array<double, 2> sample_mean{};
  std::array<double, 4> sample_cov{};  // row-major 2x2
  double mean_error = 0.0;             // |sample mean - target mean|
  double cov_rel_error = 0.0;          // Frobenius, relative to target covariance
  std::vector<EpochLog> log;
};

inline RunConfig gauss2d_defaults() {
  RunConfig c;
  c.dataset = DatasetKind::two_gaussians_2d;
  c.synthetic.centers = {{2.0, 0.0}};
  c.synthetic.mode_std = 0.3;
  c.synthetic.num_series = 4096;
  c.test_series = 4000;
  c.train.split_masks = false;
  c.train.hidden_dims = {64, 64};
  c.train.time_embed_dim = 16;
  c.train.epochs = 60;
  c.train.learning_rate = 2e-3;
  c.sync();
  return c;
}

inline GaussianFlowResult run_gauss2d(const RunConfig& cfg, const std::string& out_dir = {}) {
  if (cfg.synthetic.centers.size() != 1) throw std::invalid_argument("gauss2d: expects a single target center");
  const SeriesBatch data = make_synthetic(SyntheticKind::two_gaussians_2d, cfg.synthetic, cfg.seed).batch;
  TrainConfig tc = cfg.train;
  tc.log_path = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / "gauss2d_train_log.tsv").string();
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  const FlowTrainResult trained = train_flow(data, tc);
  GaussianFlowResult res;
  res.log = trained.log;

  const AffineGaussianOt ot{{cfg.synthetic.centers[0].first, cfg.synthetic.centers[0].second},
                            cfg.train.interpolant.sigma_0,
                            cfg.synthetic.mode_std};
  detail::TsvWriter field(out_dir, "gauss2d_field.tsv", {"t", "x", "y", "u_x", "u_y", "ot_x", "ot_y"});
  // Grid over mean +- 2 std of the OT interpolant at each time.
  const std::vector<double> times{0.1, 0.3, 0.5, 0.7, 0.9};
  const int side = 9;
  double se = 0.0;
  std::size_t points = 0;
  for (double t : times) {
    const double sd = (1.0 - t) * ot.source_std + t * ot.target_std;
    Tensor x(Shape{static_cast<std::size_t>(side * side), 2});
    for (int i = 0; i < side; ++i) {
      for (int j = 0; j < side; ++j) {
        const std::size_t r = static_cast<std::size_t>(i * side + j);
        x(r, 0) = t * ot.mean[0] + sd * (-2.0 + 4.0 * i / (side - 1));
        x(r, 1) = t * ot.mean[1] + sd * (-2.0 + 4.0 * j / (side - 1));
      }
    }
    const std::vector<double> ts(x.dim(0), t);
    const Tensor zeros(x.shape());
    const Tensor u = predict_velocity(trained.params, x, zeros, zeros, ts);
    for (std::size_t r = 0; r < x.dim(0); ++r) {
      const auto v = ot.velocity({x(r, 0), x(r, 1)}, t);
      se += (u(r, 0) - v[0]) * (u(r, 0) - v[0]) + (u(r, 1) - v[1]) * (u(r, 1) - v[1]);
      ++points;
      field.row(t, x(r, 0), x(r, 1), u(r, 0), u(r, 1), v[0], v[1]);
    }
  }
  res.grid_mse = se / static_cast<double>(points);

  const std::size_t n = cfg.test_series;
  Rng rng = make_rng(cfg.seed, 0x67617573);
  const Trajectory tr = euler_trajectory(trained.params, Tensor(Shape{n, 2}), Tensor(Shape{n, 2}), cfg.sample, rng);
  const Tensor& xs = tr.final_state();
  for (std::size_t r = 0; r < n; ++r) {
    res.sample_mean[0] += xs(r, 0) / static_cast<double>(n);
    res.sample_mean[1] += xs(r, 1) / static_cast<double>(n);
  }
  for (std::size_t r = 0; r < n; ++r) {
    const double a = xs(r, 0) - res.sample_mean[0], b = xs(r, 1) - res.sample_mean[1];
    res.sample_cov[0] += a * a;
    res.sample_cov[1] += a * b;
    res.sample_cov[3] += b * b;
  }
  for (double& c : res.sample_cov) c /= static_cast<double>(n - 1);
  res.sample_cov[2] = res.sample_cov[1];
  res.mean_error = std::hypot(res.sample_mean[0] - ot.mean[0], res.sample_mean[1] - ot.mean[1]);
  const double var = ot.target_std * ot.target_std;
  double num = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double target = (i == 0 || i == 3) ? var : 0.0;
    num += (res.sample_cov[i] - target) * (res.sample_cov[i] - target);
  }
  res.cov_rel_error = std::sqrt(num) / std::sqrt(2.0 * var * var);

  detail::TsvWriter traj(out_dir, "gauss2d_trajectories.tsv", {"traj", "step", "t", "x", "y"});
  detail::write_trajectories(traj, tr, 64);
  detail::TsvWriter samples(out_dir, "gauss2d_samples.tsv", {"x", "y"});
  for (std::size_t r = 0; samples.enabled() && r < n; ++r) samples.row(xs(r, 0), xs(r, 1));
  return res;
}

// ---------------------------------------------------------------------------
// Coupling and kinetic energy

struct CouplingResult {
  std::vector<double> ke_exact;
  std::vector<double> ke_independent;
  PairedTest test;  // on ke_exact - ke_independent
};

inline RunConfig coupling_defaults() {
  RunConfig c = gauss2d_defaults();
  c.synthetic.centers = {{-2.0, 0.0}, {2.0, 0.0}};
  // A near-point source cannot be split into two modes by a small network.
  c.train.interpolant.sigma_0 = 1.0;
  c.test_series = 100;
  c.sync();
  return c;
}

/// Trains one model per coupling on the same data and seed, then integrates
/// both from the same noise draws.
inline CouplingResult run_coupling(const RunConfig& cfg, const std::string& out_dir = {}) {
  const SeriesBatch data = make_synthetic(SyntheticKind::two_gaussians_2d, cfg.synthetic, cfg.seed).batch;
  const std::size_t n = cfg.test_series;
  CouplingResult res;
  detail::TsvWriter traj(out_dir, "coupling_trajectories.tsv", {"coupling", "traj", "step", "t", "x", "y"});
  for (CouplingMode mode : {CouplingMode::exact, CouplingMode::independent}) {
    TrainConfig tc = cfg.train;
    tc.coupling = mode;
    const FlowTrainResult trained = train_flow(data, tc);
    Rng rng = make_rng(cfg.seed, 0x6b696e);
    const Trajectory tr =
        euler_trajectory(trained.params, Tensor(Shape{n, 2}), Tensor(Shape{n, 2}), cfg.sample, rng);
    (mode == CouplingMode::exact ? res.ke_exact : res.ke_independent) = kinetic_energies(tr);
    detail::write_trajectories(traj, tr, 64, coupling_mode_name(mode));
  }
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = res.ke_exact[i] - res.ke_independent[i];
  res.test = paired_t_test(diff);
  detail::TsvWriter ke(out_dir, "coupling_kinetic.tsv", {"traj", "ke_exact", "ke_independent"});
  for (std::size_t i = 0; ke.enabled() && i < n; ++i) ke.row(i, res.ke_exact[i], res.ke_independent[i]);
  return res;
}

// ---------------------------------------------------------------------------
// Euler order on the linear field dx/dt = -x

struct EulerOrderResult {
  std::vector<std::size_t> steps;
  std::vector<double> errors;
  std::vector<double> ratios;  // errors[i] / errors[i + 1]
};

inline EulerOrderResult run_euler_order(std::vector<std::size_t> steps = {15, 30, 60}, double horizon = 1.0,
                                        const std::string& out_dir = {}) {
  EulerOrderResult res;
  res.steps = std::move(steps);
  const VectorField decay = [](const Tensor& x, double) {
    Tensor v(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) v[i] = -x[i];
    return v;
  };
  const Tensor x0(Shape{1, 1}, {1.0});
  for (std::size_t n : res.steps) {
    const double final = integrate(decay, x0, n, horizon).final_state()[0];
    res.errors.push_back(std::abs(final - std::exp(-horizon)));
  }
  for (std::size_t i = 0; i + 1 < res.errors.size(); ++i) res.ratios.push_back(res.errors[i] / res.errors[i + 1]);
  detail::TsvWriter w(out_dir, "euler_order.tsv", {"steps", "abs_error"});
  for (std::size_t i = 0; w.enabled() && i < res.steps.size(); ++i) w.row(res.steps[i], res.errors[i]);
  return res;
}

// ---------------------------------------------------------------------------
// Sinusoid imputation

struct SinusoidSplit {
  SyntheticData train;  // raw units
  SyntheticData test;   // raw units; eval_mask marks the hidden targets
  SeriesBatch train_norm;
  SeriesBatch test_norm;
};

inline SinusoidSplit make_sinusoid_split(const RunConfig& cfg, std::uint64_t seed) {
  SinusoidSplit s;
  s.train = make_synthetic(SyntheticKind::sinusoid_mix, cfg.synthetic, seed);
  SyntheticParams tp = cfg.synthetic;
  tp.num_series = cfg.test_series;
  s.test = make_synthetic(SyntheticKind::sinusoid_mix, tp, seed, 0x74657374);
  fit_normalization(s.train.batch);
  share_normalization(s.train.batch, s.test.batch);
  s.train_norm = normalize(s.train.batch);
  s.test_norm = normalize(s.test.batch);
  return s;
}

struct ImputedSet {
  Tensor point;    // (B, K, L) data units
  Tensor samples;  // (M, B, K, L) data units
};

/// Imputes every series of a normalized batch and maps the result back to
/// data units with the batch's statistics.
inline ImputedSet impute_dataset(const ModelParams& params, const SeriesBatch& norm, const SampleConfig& sc,
                                 const VaeParams* vae = nullptr) {
  const auto results = impute_batch(params, norm.flat_values(), norm.flat_mask(), sc, vae);
  const std::size_t d = norm.state_dim(), m = sc.mc_samples, total = norm.B * d;
  ImputedSet out{Tensor(norm.values.shape()), Tensor(Shape{m, norm.B, norm.K, norm.L})};
  for (std::size_t b = 0; b < norm.B; ++b) {
    for (std::size_t i = 0; i < d; ++i) {
      const std::size_t k = i / norm.L;
      const double sd = norm.feature_stds[k], mu = norm.feature_means[k];
      out.point[b * d + i] = results[b].point[i] * sd + mu;
      for (std::size_t s = 0; s < m; ++s) out.samples[s * total + b * d + i] = results[b].samples(s, i) * sd + mu;
    }
  }
  return out;
}

/// Per-feature training mean at every entry.
inline Tensor mean_imputation(const SeriesBatch& train, const SeriesBatch& target) {
  Tensor out(target.values.shape());
  for (std::size_t b = 0; b < target.B; ++b) {
    for (std::size_t k = 0; k < target.K; ++k) {
      for (std::size_t l = 0; l < target.L; ++l) out[(b * target.K + k) * target.L + l] = train.feature_means[k];
    }
  }
  return out;
}

struct SinusoidResult {
  MetricReport clwf;         // M = sample.mc_samples
  MetricReport single;       // M = 1
  MetricReport mean_baseline;
  std::vector<EpochLog> log;
};

inline RunConfig sinusoid_defaults() {
  RunConfig c;
  c.dataset = DatasetKind::sinusoid_mix;
  c.synthetic.K = 4;
  c.synthetic.L = 32;
  c.synthetic.num_series = 512;
  c.synthetic.eval_mask_ratio = 0.2;
  c.test_series = 128;
  c.train.hidden_dims = {256, 256};
  c.train.epochs = 200;
  c.train.loss_mask = LossMask::target_only;
  c.vae.hidden_dims = {128};
  c.vae.latent_dim = 16;
  c.vae.beta = 1e-3;
  c.vae.epochs = 200;
  c.sample.steps = 15;
  c.sample.mc_samples = 50;
  c.sync();
  return c;
}

inline SinusoidResult run_sinusoid(const RunConfig& cfg, const std::string& out_dir = {}) {
  const SinusoidSplit split = make_sinusoid_split(cfg, cfg.seed);
  TrainConfig tc = cfg.train;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    tc.log_path = (std::filesystem::path(out_dir) / "sinusoid_train_log.tsv").string();
  }
  const FlowTrainResult trained = train_flow(split.train_norm, tc);
  SinusoidResult res;
  res.log = trained.log;
  const Tensor& truth = split.test.truth;
  const Tensor& eval = split.test.eval_mask;

  const ImputedSet full = impute_dataset(trained.params, split.test_norm, cfg.sample);
  res.clwf = metrics(full.point, truth, eval, &full.samples);
  SampleConfig one = cfg.sample;
  one.mc_samples = 1;
  const ImputedSet single = impute_dataset(trained.params, split.test_norm, one);
  res.single = metrics(single.point, truth, eval, &single.samples);
  res.mean_baseline = metrics(mean_imputation(split.train.batch, split.test.batch), truth, eval);

  detail::TsvWriter table(out_dir, "sinusoid_metrics.tsv", {"method", "rmse", "mae", "crps", "count"});
  auto crps = [](const MetricReport& r) { return r.crps ? format_number(*r.crps) : std::string("nan"); };
  table.row("clwf_M" + std::to_string(cfg.sample.mc_samples), res.clwf.rmse, res.clwf.mae, crps(res.clwf),
            res.clwf.count);
  table.row("clwf_M1", res.single.rmse, res.single.mae, crps(res.single), res.single.count);
  table.row("feature_mean", res.mean_baseline.rmse, res.mean_baseline.mae, crps(res.mean_baseline),
            res.mean_baseline.count);

  detail::TsvWriter series(out_dir, "sinusoid_series.tsv",
                           {"series", "feature", "step", "truth", "eval_target", "imputed", "q05", "q95"});
  const std::size_t m = cfg.sample.mc_samples, total = truth.size();
  const SeriesBatch& tb = split.test.batch;
  for (std::size_t b = 0; series.enabled() && b < std::min<std::size_t>(4, tb.B); ++b) {
    for (std::size_t k = 0; k < tb.K; ++k) {
      for (std::size_t l = 0; l < tb.L; ++l) {
        const std::size_t idx = (b * tb.K + k) * tb.L + l;
        std::vector<double> draws(m);
        for (std::size_t s = 0; s < m; ++s) draws[s] = full.samples[s * total + idx];
        std::sort(draws.begin(), draws.end());
        const auto q = [&](double p) { return draws[static_cast<std::size_t>(p * static_cast<double>(m - 1))]; };
        series.row(b, k, l, truth[idx], static_cast<int>(eval[idx]), full.point[idx], q(0.05), q(0.95));
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Potential-correction ablation

struct RbSeedResult {
  std::uint64_t seed = 0;
  RbReport report;
};

struct RbAblationResult {
  std::vector<RbSeedResult> seeds;
};

inline RunConfig rb_ablation_defaults() {
  RunConfig c = sinusoid_defaults();
  // A larger corpus at the same number of optimizer steps; the VAE needs it.
  c.synthetic.num_series = 2048;
  c.train.epochs = 50;
  c.vae.epochs = 60;
  c.sample.mc_samples = 10;
  // Per-step pull is (T/N)/sigma_p_sq; at the library default 0.01 the Euler
  // update overshoots.
  c.sample.potential.sigma_p_sq = 5.0;
  c.sync();
  return c;
}

/// For each seed: train the flow and the VAE, impute the held-out series with
/// and without the correction from identical noise, and compare squared errors
/// on the evaluation entries.
inline RbAblationResult run_rb_ablation(const RunConfig& cfg, std::size_t num_seeds = 5,
                                        const std::string& out_dir = {}) {
  RbAblationResult res;
  detail::TsvWriter table(out_dir, "rb_ablation.tsv",
                          {"seed", "mse_base", "mse_rb", "mean_difference", "t_statistic", "p_value", "count"});
  for (std::size_t i = 0; i < num_seeds; ++i) {
    const std::uint64_t seed = cfg.seed + i;
    const SinusoidSplit split = make_sinusoid_split(cfg, seed);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    VaeTrainConfig vc = cfg.vae;
    vc.seed = seed;
    const FlowTrainResult flow = train_flow(split.train_norm, tc);
    const VaeTrainResult vae = train_vae(split.train_norm, vc);
    SampleConfig base = cfg.sample;
    base.seed = seed;
    base.rao_blackwell = false;
    SampleConfig rb = base;
    rb.rao_blackwell = true;
    const ImputedSet a = impute_dataset(flow.params, split.test_norm, base);
    const ImputedSet b = impute_dataset(flow.params, split.test_norm, rb, &vae.params);
    std::vector<double> pa, pb, truth;
    for (std::size_t k = 0; k < split.test.truth.size(); ++k) {
      if (split.test.eval_mask[k] == 0.0) continue;
      pa.push_back(a.point[k]);
      pb.push_back(b.point[k]);
      truth.push_back(split.test.truth[k]);
    }
    res.seeds.push_back({seed, rb_variance_test(pa, pb, truth)});
    const RbReport& r = res.seeds.back().report;
    table.row(seed, r.mse_base, r.mse_rb, r.mean_difference, r.t_statistic, r.p_value, r.count);
  }
  return res;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"gauss2d", "coupling", "euler_order", "sinusoid", "rb_ablation"};
  return names;
}

inline RunConfig experiment_defaults(const std::string& name) {
  if (name == "gauss2d") return gauss2d_defaults();
  if (name == "coupling") return coupling_defaults();
  if (name == "euler_order") return RunConfig{};
  if (name == "sinusoid") return sinusoid_defaults();
  if (name == "rb_ablation") return rb_ablation_defaults();
  std::string list;
  for (const auto& n : experiment_names()) list += (list.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown experiment '" + name + "'; available: " + list);
}

}  // namespace clwf
