#pragma once

// Simulation-free training: split observed entries into condition/target,
// couple noise with target states by mini-batch OT, interpolate, and regress
// the velocity network onto (x_tar - x0) / T. Also trains the VAE potential.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/autodiff.hpp"
#include "clwf/data_eval.hpp"
#include "clwf/interpolant.hpp"
#include "clwf/nn.hpp"
#include "clwf/ot_coupling.hpp"
#include "clwf/random.hpp"
#include "clwf/vae_potential.hpp"
#include "clwf/velocity_model.hpp"

namespace clwf {

enum class LossMask { all, target_only };

inline LossMask parse_loss_mask(const std::string& s) {
  if (s == "all") return LossMask::all;
  if (s == "target_only") return LossMask::target_only;
  throw std::invalid_argument("unknown loss_mask '" + s + "' (expected all|target_only)");
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  InterpolantConfig interpolant;
  CouplingMode coupling = CouplingMode::exact;
  SinkhornOptions sinkhorn;
  // Fraction of observed entries moved into the regression target.
  double target_mask_ratio = 0.5;
  // false: every observed entry is a target and nothing is conditioned on.
  bool split_masks = true;
  LossMask loss_mask = LossMask::all;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::string log_path;
  EpochCallback on_epoch;

  // Velocity network shape.
  std::vector<std::size_t> hidden_dims{128, 128};
  std::size_t time_embed_dim = 32;
  Activation activation = Activation::tanh;

  void validate() const {
    interpolant.validate();
    if (epochs == 0 || batch_size == 0) throw std::invalid_argument("train: epochs and batch_size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be positive");
    if (split_masks && !(target_mask_ratio > 0.0 && target_mask_ratio < 1.0)) {
      throw std::invalid_argument("train: target_mask_ratio must lie in (0, 1)");
    }
  }
};

struct MaskSplit {
  Tensor cond_mask;
  Tensor target_mask;
};

/// Uniformly random subset of round(ratio * count) observed entries becomes
/// the target (at least one, leaving at least one condition entry).
inline MaskSplit mask_split(const Tensor& obs_mask, double ratio, Rng& rng) {
  std::vector<std::size_t> observed;
  for (std::size_t i = 0; i < obs_mask.size(); ++i) {
    if (obs_mask[i] != 0.0) observed.push_back(i);
  }
  if (observed.size() < 2) {
    throw std::invalid_argument("mask_split: need at least 2 observed entries, found " +
                                std::to_string(observed.size()));
  }
  const auto count = static_cast<double>(observed.size());
  auto n_target = static_cast<std::size_t>(std::llround(ratio * count));
  n_target = std::clamp<std::size_t>(n_target, 1, observed.size() - 1);
  std::shuffle(observed.begin(), observed.end(), rng);
  MaskSplit s{obs_mask, Tensor(obs_mask.shape())};
  for (std::size_t k = 0; k < n_target; ++k) {
    s.cond_mask[observed[k]] = 0.0;
    s.target_mask[observed[k]] = 1.0;
  }
  return s;
}

/// Everything the loss needs for one mini-batch, drawn up front so the loss
/// is a deterministic function of the parameters. All tensors are (B, K*L).
struct FlowBatch {
  Tensor x0;
  Tensor x_target;  // values at target positions, 0 elsewhere
  Tensor x_cond;    // values at condition positions, 0 elsewhere
  Tensor cond_mask;
  Tensor target_mask;
  Tensor x_t;
  Tensor u_target;
  std::vector<double> t;
};

/// Builds a FlowBatch from normalized values and observation masks (B, K*L).
inline FlowBatch prepare_flow_batch(const Tensor& values, const Tensor& obs_mask, const TrainConfig& cfg,
                                    Rng& rng) {
  const std::size_t b = values.dim(0);
  const std::size_t d = values.size() / b;
  const Shape rows{b, d};
  FlowBatch fb;
  Tensor cond(rows), target(rows), x_cond(rows), x_tar(rows);
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor m(Shape{d}, std::vector<double>(obs_mask.row(i).begin(), obs_mask.row(i).end()));
    MaskSplit split;
    if (cfg.split_masks) {
      split = mask_split(m, cfg.target_mask_ratio, rng);
    } else {
      split = MaskSplit{Tensor(Shape{d}), m};
    }
    for (std::size_t k = 0; k < d; ++k) {
      const double v = values[i * d + k];
      cond(i, k) = split.cond_mask[k];
      target(i, k) = split.target_mask[k];
      x_cond(i, k) = split.cond_mask[k] != 0.0 ? v : 0.0;
      x_tar(i, k) = split.target_mask[k] != 0.0 ? v : 0.0;
    }
  }
  const Tensor noise = normal_tensor(rows, cfg.interpolant.sigma_0, rng);
  // Noise rows follow the coupling; conditions stay attached to their targets.
  const Pairing pairs = couple_minibatch(noise, x_tar, cfg.coupling, rng, cfg.sinkhorn);
  std::vector<std::size_t> src_for_target(b);
  if (cfg.coupling == CouplingMode::sinkhorn) {
    fb.x0 = gather_rows(noise, pairs.source);
    fb.x_target = gather_rows(x_tar, pairs.target);
    fb.x_cond = gather_rows(x_cond, pairs.target);
    fb.cond_mask = gather_rows(cond, pairs.target);
    fb.target_mask = gather_rows(target, pairs.target);
  } else {
    for (std::size_t i = 0; i < b; ++i) src_for_target[pairs.target[i]] = pairs.source[i];
    fb.x0 = gather_rows(noise, src_for_target);
    fb.x_target = std::move(x_tar);
    fb.x_cond = std::move(x_cond);
    fb.cond_mask = std::move(cond);
    fb.target_mask = std::move(target);
  }
  fb.x_t = Tensor(rows);
  fb.u_target = target_velocity(fb.x0, fb.x_target, cfg.interpolant);
  fb.t.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    fb.t[i] = sample_time(cfg.interpolant, rng);
    const Tensor a(Shape{d}, std::vector<double>(fb.x0.row(i).begin(), fb.x0.row(i).end()));
    const Tensor z(Shape{d}, std::vector<double>(fb.x_target.row(i).begin(), fb.x_target.row(i).end()));
    const Tensor xt = interpolate(a, z, fb.t[i], cfg.interpolant, rng);
    std::copy(xt.data().begin(), xt.data().end(), fb.x_t.row(i).begin());
  }
  return fb;
}

/// Mean over the batch of |u_target - predicted|^2 (summed over coordinates,
/// or over target coordinates only).
inline Var flow_matching_loss(Tape& tape, Var predicted, const Tensor& u_target, const Tensor& target_mask,
                              LossMask mode) {
  const Shape& s = value_of(predicted).shape();
  Var diff = sub(tape.constant(u_target.reshaped(s)), predicted);
  if (mode == LossMask::target_only) diff = mul(diff, tape.constant(target_mask.reshaped(s)));
  return scale(sum(square(diff)), 1.0 / static_cast<double>(s[0]));
}

inline Var flow_matching_loss(Tape& tape, const ModelParams& params, std::span<const Var> vars,
                              const FlowBatch& fb, LossMask mode) {
  Var pred = velocity_forward(tape, params, vars, fb.x_t, fb.x_cond, fb.cond_mask, fb.t);
  return flow_matching_loss(tape, pred, fb.u_target, fb.target_mask, mode);
}

/// Loss value for a freshly drawn batch.
inline double flow_matching_loss(const ModelParams& params, const Tensor& values, const Tensor& obs_mask,
                                 const TrainConfig& cfg, Rng& rng) {
  const FlowBatch fb = prepare_flow_batch(values, obs_mask, cfg, rng);
  Tape tape;
  const auto vars = bind(tape, params.net);
  return tape.value(flow_matching_loss(tape, params, vars, fb, cfg.loss_mask)).item();
}

inline void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write training log '" + path + "'");
  out << "epoch\tloss\tlearning_rate\tseconds\n";
  for (const auto& e : log) {
    out << e.epoch << '\t' << format_number(e.mean_loss) << '\t' << format_number(e.learning_rate) << '\t'
        << e.seconds << '\n';
  }
}

struct FlowTrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    out.emplace_back(order.begin() + start, order.begin() + std::min(n, start + batch));
  }
  return out;
}

}  // namespace detail

/// Trains the velocity field on a normalized dataset.
inline FlowTrainResult train_flow(const SeriesBatch& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.B == 0) throw std::invalid_argument("train_flow: empty dataset");
  FlowTrainResult res;
  res.params = init_params(data.K, data.L, cfg.hidden_dims, cfg.time_embed_dim, cfg.seed, cfg.activation);
  const Tensor values = data.flat_values();
  const Tensor mask = data.flat_mask();
  Rng rng = make_rng(cfg.seed, 0x666c6f77);
  AdamState adam;
  auto params = res.params.net.parameters();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = linear_lr(cfg.learning_rate, epoch, cfg.epochs);
    const auto batches = detail::epoch_batches(data.B, cfg.batch_size, rng);
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const FlowBatch fb = prepare_flow_batch(gather_rows(values, batches[bi]), gather_rows(mask, batches[bi]),
                                              cfg, rng);
      Tape tape;
      const auto vars = bind(tape, res.params.net);
      const Var loss = flow_matching_loss(tape, res.params, vars, fb, cfg.loss_mask);
      const double lv = tape.value(loss).item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_flow: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(bi));
      }
      total += lv;
      auto grads = collect_gradients(tape.backward(loss), vars);
      clip_grad_norm(grads, cfg.grad_clip);
      adam_step(params, grads, adam, lr);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back({epoch, total / static_cast<double>(batches.size()), lr, secs});
    if (cfg.on_epoch) cfg.on_epoch(res.log.back());
  }
  write_train_log(cfg.log_path, res.log);
  return res;
}

struct VaeTrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double beta = 1.0;
  double grad_clip = 1.0;
  std::vector<std::size_t> hidden_dims{128};
  std::size_t latent_dim = 16;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
  std::string log_path;
  EpochCallback on_epoch;
};

struct VaeTrainResult {
  VaeParams params;
  std::vector<EpochLog> log;
};

/// Trains the VAE on normalized observed data (missing entries zero, masked out).
inline VaeTrainResult train_vae(const SeriesBatch& data, const VaeTrainConfig& cfg) {
  if (data.B == 0) throw std::invalid_argument("train_vae: empty dataset");
  if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0)) {
    throw std::invalid_argument("train_vae: epochs, batch_size and learning_rate must be positive");
  }
  VaeTrainResult res;
  res.params = init_vae(data.K, data.L, cfg.hidden_dims, cfg.latent_dim, cfg.seed, cfg.activation);
  const Tensor values = data.flat_values();
  const Tensor mask = data.flat_mask();
  Rng rng = make_rng(cfg.seed, 0x766165);
  AdamState adam;
  auto params = parameters(res.params);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = linear_lr(cfg.learning_rate, epoch, cfg.epochs);
    const auto batches = detail::epoch_batches(data.B, cfg.batch_size, rng);
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Tensor x = gather_rows(values, batches[bi]);
      const Tensor m = gather_rows(mask, batches[bi]);
      const Tensor eps = draw_latent_noise(res.params, batches[bi].size(), rng);
      Tape tape;
      const VaeVars vv = bind(tape, res.params);
      const Var loss = vae_loss(tape, res.params, vv, x, m, eps, cfg.beta);
      const double lv = tape.value(loss).item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_vae: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(bi));
      }
      total += lv;
      auto grads = collect_gradients(tape.backward(loss), vv.all());
      clip_grad_norm(grads, cfg.grad_clip);
      adam_step(params, grads, adam, lr);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back({epoch, total / static_cast<double>(batches.size()), lr, secs});
    if (cfg.on_epoch) cfg.on_epoch(res.log.back());
  }
  write_train_log(cfg.log_path, res.log);
  return res;
}

}  // namespace clwf
