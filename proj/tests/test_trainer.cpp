#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "clwf/checkpoint.hpp"
#include "clwf/trainer.hpp"
#include "fd_oracle.hpp"

using namespace clwf;
using clwf::testing::central_difference;
using clwf::testing::max_relative_error;

namespace {

SeriesBatch gaussian_toy(std::size_t n, std::vector<std::pair<double, double>> centers, std::uint64_t seed) {
  SyntheticParams sp;
  sp.num_series = n;
  sp.centers = std::move(centers);
  return make_synthetic(SyntheticKind::two_gaussians_2d, sp, seed).batch;
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.split_masks = false;
  cfg.hidden_dims = {32, 32};
  cfg.time_embed_dim = 8;
  cfg.batch_size = 64;
  cfg.learning_rate = 5e-3;
  cfg.seed = 3;
  return cfg;
}

double sample_variance_total(const Tensor& u) {
  const std::size_t b = u.dim(0), d = u.size() / b;
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      s += u[i * d + j];
      ss += u[i * d + j] * u[i * d + j];
    }
    total += (ss - s * s / static_cast<double>(b)) / static_cast<double>(b - 1);
  }
  return total;
}

}  // namespace

TEST(MaskSplit, HalfOfTenObserved) {
  Tensor obs(Shape{12}, 1.0);
  obs[4] = 0.0;
  obs[9] = 0.0;
  Rng rng = make_rng(1);
  const MaskSplit s = mask_split(obs, 0.5, rng);
  double targets = 0.0, conds = 0.0;
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(s.cond_mask[i] * s.target_mask[i], 0.0);
    EXPECT_EQ(s.cond_mask[i] + s.target_mask[i], obs[i]);
    targets += s.target_mask[i];
    conds += s.cond_mask[i];
  }
  EXPECT_EQ(targets, 5.0);
  EXPECT_EQ(conds, 5.0);
}

TEST(MaskSplit, UniformOverObservedEntries) {
  Tensor obs(Shape{12}, 1.0);
  obs[0] = 0.0;
  obs[7] = 0.0;
  Rng rng = make_rng(2);
  std::vector<double> hits(12, 0.0);
  const int draws = 10000;
  for (int r = 0; r < draws; ++r) {
    const MaskSplit s = mask_split(obs, 0.5, rng);
    for (std::size_t i = 0; i < 12; ++i) hits[i] += s.target_mask[i];
  }
  for (std::size_t i = 0; i < 12; ++i) {
    if (obs[i] == 0.0) {
      EXPECT_EQ(hits[i], 0.0);
    } else {
      EXPECT_NEAR(hits[i] / draws, 0.5, 0.02) << "entry " << i;
    }
  }
}

TEST(MaskSplit, TooFewObservedThrows) {
  Tensor obs(Shape{5});
  obs[2] = 1.0;
  Rng rng = make_rng(3);
  EXPECT_THROW(mask_split(obs, 0.5, rng), std::invalid_argument);
}

TEST(MaskSplit, ExtremeRatiosKeepBothSidesNonEmpty) {
  const Tensor obs(Shape{4}, 1.0);
  Rng rng = make_rng(4);
  for (double ratio : {0.01, 0.99}) {
    const MaskSplit s = mask_split(obs, ratio, rng);
    EXPECT_GE(sum(s.target_mask), 1.0);
    EXPECT_GE(sum(s.cond_mask), 1.0);
  }
}

TEST(FlowLoss, HandComputedSingleSample) {
  InterpolantConfig ic;
  const Tensor u = target_velocity(Tensor(Shape{1, 1}, {0.0}), Tensor(Shape{1, 1}, {2.0}), ic);
  Tape tape;
  const Var pred = tape.constant(Tensor(Shape{1, 1}));
  EXPECT_EQ(tape.value(flow_matching_loss(tape, pred, u, Tensor(Shape{1, 1}, 1.0), LossMask::all)).item(), 4.0);
}

TEST(FlowLoss, ZeroWhenPredictionIsTargetVelocity) {
  Rng rng = make_rng(5);
  const Tensor u = normal_tensor({4, 3}, 1.0, rng);
  Tape tape;
  const Var pred = tape.constant(u);
  EXPECT_EQ(tape.value(flow_matching_loss(tape, pred, u, Tensor(Shape{4, 3}, 1.0), LossMask::all)).item(), 0.0);
}

TEST(FlowLoss, TargetOnlyIgnoresOtherCoordinates) {
  const Tensor u(Shape{1, 3}, {1.0, 2.0, 3.0});
  const Tensor target(Shape{1, 3}, {1.0, 0.0, 1.0});
  Tape tape;
  const Var pred = tape.constant(Tensor(Shape{1, 3}));
  EXPECT_EQ(tape.value(flow_matching_loss(tape, pred, u, target, LossMask::target_only)).item(), 10.0);
  EXPECT_EQ(tape.value(flow_matching_loss(tape, pred, u, target, LossMask::all)).item(), 14.0);
}

TEST(FlowLoss, NonNegativeOnRandomBatches) {
  const ModelParams p = init_params(2, 4, {16}, 8, 1);
  SyntheticParams sp;
  sp.K = 2;
  sp.L = 4;
  sp.num_series = 16;
  const SeriesBatch data = make_synthetic(SyntheticKind::sinusoid_mix, sp, 1).batch;
  TrainConfig cfg;
  Rng rng = make_rng(6);
  for (int r = 0; r < 20; ++r) EXPECT_GE(flow_matching_loss(p, data.flat_values(), data.flat_mask(), cfg, rng), 0.0);
}

TEST(FlowBatch, ConditionAndTargetArePartitionOfObservations) {
  SyntheticParams sp;
  sp.K = 2;
  sp.L = 8;
  sp.num_series = 8;
  const SeriesBatch data = make_synthetic(SyntheticKind::sinusoid_mix, sp, 2).batch;
  const Tensor v = data.flat_values(), m = data.flat_mask();
  for (CouplingMode mode : {CouplingMode::exact, CouplingMode::independent, CouplingMode::sinkhorn}) {
    TrainConfig cfg;
    cfg.coupling = mode;
    Rng rng = make_rng(7);
    const FlowBatch fb = prepare_flow_batch(v, m, cfg, rng);
    // Each batch row must be one of the dataset rows with its values intact.
    for (std::size_t i = 0; i < 8; ++i) {
      bool matched = false;
      for (std::size_t r = 0; r < 8 && !matched; ++r) {
        bool same = true;
        for (std::size_t k = 0; k < 16; ++k) {
          const double merged = fb.cond_mask(i, k) != 0.0 ? fb.x_cond(i, k) : fb.x_target(i, k);
          const double mk = fb.cond_mask(i, k) + fb.target_mask(i, k);
          if (mk != m(r, k) || (mk != 0.0 && merged != v(r, k))) same = false;
        }
        matched = same;
      }
      EXPECT_TRUE(matched) << coupling_mode_name(mode) << " row " << i;
    }
  }
}

TEST(FlowLoss, EndToEndGradientMatchesFiniteDifferences) {
  ModelParams p = init_params(2, 3, {6}, 4, 9);
  SyntheticParams sp;
  sp.K = 2;
  sp.L = 3;
  sp.num_series = 5;
  const SeriesBatch data = make_synthetic(SyntheticKind::sinusoid_mix, sp, 3).batch;
  TrainConfig cfg;
  cfg.interpolant.alpha = 0.3;
  Rng rng = make_rng(8);
  const FlowBatch fb = prepare_flow_batch(data.flat_values(), data.flat_mask(), cfg, rng);
  for (LossMask mode : {LossMask::all, LossMask::target_only}) {
    auto value = [&] {
      Tape tape;
      const auto vars = bind(tape, p.net);
      return tape.value(flow_matching_loss(tape, p, vars, fb, mode)).item();
    };
    Tape tape;
    const auto vars = bind(tape, p.net);
    const auto analytic = collect_gradients(tape.backward(flow_matching_loss(tape, p, vars, fb, mode)), vars);
    auto params = p.net.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      EXPECT_LT(max_relative_error(analytic[k], central_difference(value, *params[k])), 1e-4) << "tensor " << k;
    }
  }
}

// Independent pairing: the per-batch loss is an unbiased estimate of the
// population loss at fixed parameters.
TEST(FlowLoss, SmallBatchEstimatorIsUnbiased) {
  const ModelParams p = init_params(2, 1, {16}, 8, 4);
  const SeriesBatch data = gaussian_toy(4000, {{-2.0, 0.0}, {2.0, 0.0}}, 5);
  TrainConfig cfg = toy_config();
  cfg.coupling = CouplingMode::independent;
  const Tensor v = data.flat_values(), m = data.flat_mask();
  Rng rng = make_rng(9);
  std::uniform_int_distribution<std::size_t> pick(0, data.B - 1);
  auto estimate = [&](std::size_t batch, std::size_t reps, double& mean, double& se) {
    double s = 0.0, ss = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
      std::vector<std::size_t> idx(batch);
      for (auto& i : idx) i = pick(rng);
      const double l = flow_matching_loss(p, gather_rows(v, idx), gather_rows(m, idx), cfg, rng);
      s += l;
      ss += l * l;
    }
    mean = s / reps;
    se = std::sqrt((ss / reps - mean * mean) / (reps - 1));
  };
  double small_mean = 0, small_se = 0, big_mean = 0, big_se = 0;
  estimate(8, 2000, small_mean, small_se);
  estimate(800, 20, big_mean, big_se);
  EXPECT_LT(std::abs(small_mean - big_mean), 3.0 * std::hypot(small_se, big_se))
      << small_mean << " vs " << big_mean;
}

TEST(FlowBatch, OtCouplingReducesTargetVelocityVariance) {
  const SeriesBatch data = gaussian_toy(64, {{-2.0, 0.0}, {2.0, 0.0}}, 6);
  TrainConfig cfg = toy_config();
  cfg.interpolant.sigma_0 = 1.0;
  double ot = 0.0, indep = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    for (CouplingMode mode : {CouplingMode::exact, CouplingMode::independent}) {
      cfg.coupling = mode;
      Rng rng = make_rng(s);
      const FlowBatch fb = prepare_flow_batch(data.flat_values(), data.flat_mask(), cfg, rng);
      (mode == CouplingMode::exact ? ot : indep) += sample_variance_total(fb.u_target);
    }
  }
  EXPECT_LT(ot / indep, 1.0);
}

TEST(TrainFlow, OneEpochIsDeterministic) {
  const SeriesBatch data = gaussian_toy(128, {{2.0, 0.0}}, 7);
  TrainConfig cfg = toy_config();
  cfg.epochs = 1;
  const FlowTrainResult a = train_flow(data, cfg);
  const FlowTrainResult b = train_flow(data, cfg);
  EXPECT_EQ(serialize(a.params), serialize(b.params));
  EXPECT_EQ(a.log[0].mean_loss, b.log[0].mean_loss);
}

TEST(TrainFlow, GaussianToyLossDropsTenfold) {
  const SeriesBatch data = gaussian_toy(512, {{2.0, 0.0}}, 8);
  TrainConfig cfg = toy_config();
  cfg.epochs = 40;
  const FlowTrainResult r = train_flow(data, cfg);
  ASSERT_EQ(r.log.size(), 40u);
  EXPECT_LT(r.log.back().mean_loss, 0.1 * r.log.front().mean_loss)
      << r.log.front().mean_loss << " -> " << r.log.back().mean_loss;
  EXPECT_DOUBLE_EQ(r.log[0].learning_rate, cfg.learning_rate);
  EXPECT_LT(r.log.back().learning_rate, r.log.front().learning_rate);
}

TEST(TrainFlow, WritesOneLogLinePerEpoch) {
  const SeriesBatch data = gaussian_toy(32, {{2.0, 0.0}}, 9);
  TrainConfig cfg = toy_config();
  cfg.epochs = 3;
  cfg.log_path = (std::filesystem::temp_directory_path() / "clwf_train_log.tsv").string();
  train_flow(data, cfg);
  std::ifstream in(cfg.log_path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 3);
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
  std::filesystem::remove(cfg.log_path);
}

TEST(TrainFlow, InvalidConfigRejected) {
  const SeriesBatch data = gaussian_toy(8, {{2.0, 0.0}}, 1);
  TrainConfig cfg = toy_config();
  cfg.split_masks = true;
  cfg.target_mask_ratio = 1.0;
  EXPECT_THROW(train_flow(data, cfg), std::invalid_argument);
}

namespace {

SyntheticData vae_corpus(std::size_t n, std::uint64_t seed) {
  SyntheticParams sp;
  sp.K = 2;
  sp.L = 16;
  sp.num_series = n;
  return make_synthetic(SyntheticKind::sinusoid_mix, sp, seed);
}

VaeTrainConfig vae_config() {
  VaeTrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 32;
  cfg.learning_rate = 3e-3;
  cfg.beta = 1e-3;
  cfg.hidden_dims = {64};
  cfg.latent_dim = 8;
  cfg.seed = 11;
  return cfg;
}

const VaeTrainResult& trained_vae() {
  static const VaeTrainResult r = train_vae(vae_corpus(256, 1).batch, vae_config());
  return r;
}

}  // namespace

TEST(TrainVae, DeterministicPerSeed) {
  VaeTrainConfig cfg = vae_config();
  cfg.epochs = 2;
  const SeriesBatch data = vae_corpus(64, 2).batch;
  EXPECT_EQ(serialize(train_vae(data, cfg).params), serialize(train_vae(data, cfg).params));
}

TEST(TrainVae, LossHalves) {
  const auto& log = trained_vae().log;
  EXPECT_LT(log.back().mean_loss, 0.5 * log.front().mean_loss);
}

TEST(TrainVae, BeatsMeanBaselineOnHeldOutSeries) {
  const SyntheticData held = vae_corpus(64, 99);
  const std::size_t d = 32;
  const Tensor truth = held.truth.reshaped(Shape{64, d});
  double se_vae = 0.0, se_mean = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    const Tensor x(Shape{1, d}, std::vector<double>(truth.row(i).begin(), truth.row(i).end()));
    const Tensor r = reconstruct(trained_vae().params, x);
    for (std::size_t k = 0; k < d; ++k) {
      se_vae += (r[k] - x[k]) * (r[k] - x[k]);
      se_mean += x[k] * x[k];  // the corpus mean is 0
    }
  }
  EXPECT_LT(se_vae, se_mean) << "vae " << std::sqrt(se_vae / (64 * d)) << " mean " << std::sqrt(se_mean / (64 * d));
}

TEST(Potential, CorrectionDenoisesCorruptedSinusoid) {
  const SyntheticData held = vae_corpus(32, 77);
  const std::size_t d = 32;
  const Tensor truth = held.truth.reshaped(Shape{32, d});
  Rng rng = make_rng(12);
  const PotentialConfig pc{1.0};
  const double eta = 0.2;
  double before = 0.0, after = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    Tensor x(Shape{1, d});
    for (std::size_t k = 0; k < d; ++k) x[k] = truth(i, k) + 0.5 * standard_normal(rng);
    const Tensor v = potential_gradient(trained_vae().params, x, pc);
    for (std::size_t k = 0; k < d; ++k) {
      before += (x[k] - truth(i, k)) * (x[k] - truth(i, k));
      const double y = x[k] + eta * v[k];
      after += (y - truth(i, k)) * (y - truth(i, k));
    }
  }
  EXPECT_LT(after, before);
}
