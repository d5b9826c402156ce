#pragma once

// Command-line front end: train, impute, eval and toy. Exit codes are 0 on
// success, 1 on runtime failure and 2 on usage or configuration errors.

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "clwf/checkpoint.hpp"
#include "clwf/config.hpp"
#include "clwf/data_eval.hpp"
#include "clwf/experiments.hpp"
#include "clwf/sampler.hpp"
#include "clwf/trainer.hpp"

namespace clwf {

namespace cli_detail {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string input;
  std::string imputed;
  std::string truth;
  std::string mask;
  std::string samples;
  std::string experiment;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> mc;
  std::optional<std::string> coupling;
  bool rao_blackwell = false;
  std::size_t num_seeds = 5;
};

inline spdlog::level::level_enum log_level_from_env() {
  const char* v = std::getenv("CLWF_LOG");
  const std::string s = v ? v : "info";
  if (s == "quiet") return spdlog::level::off;
  if (s == "info" || s.empty()) return spdlog::level::info;
  if (s == "debug") return spdlog::level::debug;
  throw UsageError("CLWF_LOG must be quiet, info or debug (got '" + s + "')");
}

inline std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  auto log = std::make_shared<spdlog::logger>("clwf", sink);
  log->set_pattern("[%l] %v");
  log->set_level(log_level_from_env());
  return log;
}

/// Config file (if any) on top of `base`, then command-line overrides.
inline RunConfig resolve_config(const Options& o, RunConfig base = {}) {
  RunConfig cfg = o.config.empty() ? std::move(base) : load_config(o.config, std::move(base));
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.steps) cfg.sample.steps = *o.steps;
  if (o.mc) cfg.sample.mc_samples = *o.mc;
  if (o.rao_blackwell) cfg.sample.rao_blackwell = true;
  if (o.coupling) cfg.train.coupling = parse_coupling_mode(*o.coupling);
  cfg.sync();
  return cfg;
}

inline void attach_epoch_logging(RunConfig& cfg, const std::shared_ptr<spdlog::logger>& log) {
  cfg.train.on_epoch = [log](const EpochLog& e) {
    log->debug("flow epoch {} loss {:.6g} lr {:.3g} ({:.1f}s)", e.epoch, e.mean_loss, e.learning_rate, e.seconds);
  };
  cfg.vae.on_epoch = [log](const EpochLog& e) {
    log->debug("vae epoch {} loss {:.6g} ({:.1f}s)", e.epoch, e.mean_loss, e.seconds);
  };
}

inline fs::path ensure_dir(const std::string& dir) {
  const fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
  fs::create_directories(p);
  return p;
}

inline void write_normalization(const fs::path& path, const SeriesBatch& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "feature\tmean\tstd\n";
  for (std::size_t k = 0; k < b.K; ++k) {
    const std::string name = k < b.feature_names.size() ? b.feature_names[k] : "f" + std::to_string(k);
    out << name << '\t' << format_number(b.feature_means[k]) << '\t' << format_number(b.feature_stds[k]) << '\n';
  }
}

inline void read_normalization(const fs::path& path, SeriesBatch& b) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  b.feature_means.clear();
  b.feature_stds.clear();
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    std::istringstream row(line);
    std::string name, mean, sd;
    std::getline(row, name, '\t');
    std::getline(row, mean, '\t');
    std::getline(row, sd, '\t');
    const auto m = parse_number(mean), s = parse_number(sd);
    if (!m || !s) throw std::runtime_error(path.string() + ": malformed line '" + line + "'");
    b.feature_means.push_back(*m);
    b.feature_stds.push_back(*s);
  }
  if (b.feature_means.size() != b.K) {
    throw std::runtime_error(path.string() + ": has " + std::to_string(b.feature_means.size()) +
                             " features, checkpoint expects K=" + std::to_string(b.K));
  }
}

struct TrainingData {
  SeriesBatch train;
  std::optional<SyntheticData> test;  // held-out synthetic split with ground truth
};

inline TrainingData load_training_data(const RunConfig& cfg) {
  TrainingData d;
  switch (cfg.dataset) {
    case DatasetKind::csv:
      if (cfg.train_csv.empty()) throw ConfigError("train_csv is required when dataset = csv");
      if (!fs::exists(cfg.train_csv)) throw ConfigError("train_csv not found: '" + cfg.train_csv + "'");
      d.train = load_csv(cfg.train_csv, {cfg.synthetic.K, cfg.synthetic.L});
      break;
    case DatasetKind::two_gaussians_2d:
      d.train = make_synthetic(SyntheticKind::two_gaussians_2d, cfg.synthetic, cfg.seed).batch;
      break;
    case DatasetKind::sinusoid_mix: {
      const SinusoidSplit s = make_sinusoid_split(cfg, cfg.seed);
      d.train = s.train.batch;
      d.test = s.test;
      break;
    }
  }
  return d;
}

inline int cmd_train(const Options& o, std::ostream& out, spdlog::logger& log) {
  RunConfig cfg = resolve_config(o);
  auto shared = std::shared_ptr<spdlog::logger>(&log, [](spdlog::logger*) {});
  attach_epoch_logging(cfg, shared);
  TrainingData data = load_training_data(cfg);
  const fs::path dir = ensure_dir(o.out);
  fit_normalization(data.train);
  const SeriesBatch norm = normalize(data.train);
  log.info("training velocity model on {} series (K={}, L={}), {} epochs", norm.B, norm.K, norm.L,
           cfg.train.epochs);
  TrainConfig tc = cfg.train;
  tc.log_path = (dir / "train_log.tsv").string();
  const FlowTrainResult flow = train_flow(norm, tc);
  save_model((dir / "velocity.ckpt").string(), flow.params);
  write_normalization(dir / "normalization.tsv", data.train);

  nlohmann::ordered_json report;
  report["series"] = norm.B;
  report["final_loss"] = flow.log.back().mean_loss;
  if (cfg.sample.rao_blackwell) {
    log.info("training VAE potential, {} epochs", cfg.vae.epochs);
    VaeTrainConfig vc = cfg.vae;
    vc.log_path = (dir / "vae_log.tsv").string();
    const VaeTrainResult vae = train_vae(norm, vc);
    save_vae((dir / "vae.ckpt").string(), vae.params);
    report["vae_final_loss"] = vae.log.back().mean_loss;
  }
  if (data.test) {
    write_csv((dir / "train.csv").string(), data.train);
    const SyntheticData& t = *data.test;
    write_csv((dir / "test_input.csv").string(), t.batch);
    SeriesBatch truth = t.batch;
    truth.values = t.truth;
    truth.obs_mask = Tensor(t.truth.shape(), 1.0);
    write_csv((dir / "test_truth.csv").string(), truth);
    write_mask_csv((dir / "test_mask.csv").string(), t.eval_mask, t.batch.K, t.batch.L, t.batch.feature_names);
  }
  log.info("wrote checkpoint to {}", dir.string());
  out << report.dump() << '\n';
  return 0;
}

inline fs::path samples_path(const std::string& out) {
  fs::path p(out);
  p.replace_extension();
  return p.string() + ".samples.csv";
}

inline int cmd_impute(const Options& o, std::ostream& out, spdlog::logger& log) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir(o.checkpoint);
  const ModelParams model = load_model((dir / "velocity.ckpt").string());
  std::optional<VaeParams> vae;
  if (cfg.sample.rao_blackwell) {
    const fs::path vp = dir / "vae.ckpt";
    if (!fs::exists(vp)) {
      throw std::runtime_error("rao_blackwell needs '" + vp.string() + "'; train with --rao-blackwell");
    }
    vae = load_vae(vp.string());
    if (vae->K != model.K || vae->L != model.L) throw std::runtime_error("vae and velocity checkpoints disagree on K, L");
  }
  const CsvTable table = read_csv_table(o.input);
  if (table.header.size() != model.K || table.rows.size() % model.L != 0) {
    throw std::runtime_error(o.input + ": found K=" + std::to_string(table.header.size()) + " features and " +
                             std::to_string(table.rows.size()) + " rows; checkpoint expects K=" +
                             std::to_string(model.K) + ", L=" + std::to_string(model.L) +
                             " (rows a multiple of L)");
  }
  SeriesBatch batch = batch_from_table(table, {model.K, model.L}, o.input);
  read_normalization(dir / "normalization.tsv", batch);
  log.info("imputing {} series with N={}, M={}{}", batch.B, cfg.sample.steps, cfg.sample.mc_samples,
           cfg.sample.rao_blackwell ? ", potential correction on" : "");
  const ImputedSet imp = impute_dataset(model, normalize(batch), cfg.sample, vae ? &*vae : nullptr);

  const std::size_t K = model.K, L = model.L, total = batch.values.size();
  auto fill = [&](const Tensor& values, std::size_t offset) {
    CsvTable t = table;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const std::size_t s = r / L, l = r % L;
      for (std::size_t k = 0; k < K; ++k) {
        if (!is_missing_cell(t.rows[r][k])) continue;
        t.rows[r][k] = format_number(values[offset + (s * K + k) * L + l]);
      }
    }
    return t;
  };
  write_csv_table(o.out, fill(imp.point, 0));

  CsvTable side;
  side.header = table.header;
  side.header.insert(side.header.begin(), "sample");
  for (std::size_t m = 0; m < cfg.sample.mc_samples; ++m) {
    CsvTable block = fill(imp.samples, m * total);
    for (auto& row : block.rows) {
      row.insert(row.begin(), std::to_string(m));
      side.rows.push_back(std::move(row));
    }
  }
  const fs::path sp = samples_path(o.out);
  write_csv_table(sp.string(), side);
  log.info("wrote {} and {}", o.out, sp.string());
  const auto missing = total - static_cast<std::size_t>(sum(batch.obs_mask));
  out << nlohmann::ordered_json{{"series", batch.B}, {"imputed_entries", missing}, {"samples_file", sp.string()}}.dump()
      << '\n';
  return 0;
}

inline Tensor flat_table_values(const CsvTable& t, const std::string& origin, bool allow_missing,
                                Tensor* observed = nullptr) {
  const SeriesBatch b = batch_from_table(t, {t.header.size(), t.rows.size()}, origin);
  if (observed) *observed = b.obs_mask;
  if (!allow_missing && sum(b.obs_mask) != static_cast<double>(b.obs_mask.size())) {
    throw std::runtime_error(origin + ": contains missing cells");
  }
  return b.values;
}

inline int cmd_eval(const Options& o, std::ostream& out, spdlog::logger&) {
  const CsvTable imp_t = read_csv_table(o.imputed), truth_t = read_csv_table(o.truth);
  const CsvTable mask_t = read_csv_table(o.mask);
  for (const auto* t : {&truth_t, &mask_t}) {
    if (t->header.size() != imp_t.header.size() || t->rows.size() != imp_t.rows.size()) {
      throw std::runtime_error("imputed, truth and mask files must have the same shape (imputed: " +
                               std::to_string(imp_t.header.size()) + " columns x " +
                               std::to_string(imp_t.rows.size()) + " rows)");
    }
  }
  if (imp_t.rows.empty()) throw std::runtime_error(o.imputed + ": no data rows");
  Tensor imp_obs, truth_obs;
  const Tensor imputed = flat_table_values(imp_t, o.imputed, true, &imp_obs);
  const Tensor truth = flat_table_values(truth_t, o.truth, true, &truth_obs);
  const Tensor mask = load_mask_csv(o.mask, {mask_t.header.size(), mask_t.rows.size()});
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0 && (imp_obs[i] == 0.0 || truth_obs[i] == 0.0)) {
      throw std::runtime_error("missing imputed or truth value at an evaluation entry");
    }
  }
  std::optional<Tensor> samples;
  if (!o.samples.empty()) {
    const CsvTable s = read_csv_table(o.samples);
    if (s.header.empty() || s.header.front() != "sample" || s.header.size() != imp_t.header.size() + 1 ||
        s.rows.size() % imp_t.rows.size() != 0) {
      throw std::runtime_error(o.samples + ": expected a 'sample' column followed by " +
                               std::to_string(imp_t.header.size()) + " features in blocks of " +
                               std::to_string(imp_t.rows.size()) + " rows");
    }
    CsvTable body;
    body.header.assign(s.header.begin() + 1, s.header.end());
    const std::size_t m = s.rows.size() / imp_t.rows.size();
    Tensor all(Shape{m, imputed.size()});
    for (std::size_t b = 0; b < m; ++b) {
      body.rows.clear();
      for (std::size_t r = 0; r < imp_t.rows.size(); ++r) {
        const auto& row = s.rows[b * imp_t.rows.size() + r];
        body.rows.emplace_back(row.begin() + 1, row.end());
      }
      const Tensor v = flat_table_values(body, o.samples, true);
      std::copy(v.data().begin(), v.data().end(), all.data().begin() + b * imputed.size());
    }
    samples = std::move(all);
  }
  out << metric_json(metrics(imputed, truth, mask, samples ? &*samples : nullptr)) << '\n';
  return 0;
}

inline nlohmann::ordered_json metric_object(const MetricReport& r) {
  nlohmann::ordered_json j{{"rmse", r.rmse}, {"mae", r.mae}};
  j["crps"] = r.crps ? nlohmann::ordered_json(*r.crps) : nlohmann::ordered_json(nullptr);
  j["count"] = r.count;
  return j;
}

inline int cmd_toy(const Options& o, std::ostream& out, spdlog::logger& log) {
  RunConfig base;
  try {
    base = experiment_defaults(o.experiment);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  RunConfig cfg = resolve_config(o, std::move(base));
  auto shared = std::shared_ptr<spdlog::logger>(&log, [](spdlog::logger*) {});
  attach_epoch_logging(cfg, shared);
  const std::string dir = ensure_dir(o.out).string();
  log.info("running {} (seed {})", o.experiment, cfg.seed);
  nlohmann::ordered_json j{{"experiment", o.experiment}, {"seed", cfg.seed}};
  if (o.experiment == "gauss2d") {
    const GaussianFlowResult r = run_gauss2d(cfg, dir);
    j["grid_mse"] = r.grid_mse;
    j["sample_mean"] = r.sample_mean;
    j["sample_cov"] = r.sample_cov;
    j["mean_error"] = r.mean_error;
    j["cov_rel_error"] = r.cov_rel_error;
  } else if (o.experiment == "coupling") {
    const CouplingResult r = run_coupling(cfg, dir);
    double a = 0.0, b = 0.0;
    for (double v : r.ke_exact) a += v;
    for (double v : r.ke_independent) b += v;
    j["ke_exact"] = a / static_cast<double>(r.ke_exact.size());
    j["ke_independent"] = b / static_cast<double>(r.ke_independent.size());
    j["t_statistic"] = r.test.t_statistic;
    j["p_value"] = r.test.p_value;
  } else if (o.experiment == "euler_order") {
    const std::size_t n = cfg.sample.steps;
    const EulerOrderResult r = run_euler_order({n, 2 * n, 4 * n}, cfg.sample.horizon, dir);
    j["steps"] = r.steps;
    j["errors"] = r.errors;
    j["ratios"] = r.ratios;
  } else if (o.experiment == "sinusoid") {
    const SinusoidResult r = run_sinusoid(cfg, dir);
    j["clwf"] = metric_object(r.clwf);
    j["single_sample"] = metric_object(r.single);
    j["feature_mean"] = metric_object(r.mean_baseline);
  } else if (o.experiment == "rb_ablation") {
    const RbAblationResult r = run_rb_ablation(cfg, o.num_seeds, dir);
    auto rows = nlohmann::ordered_json::array();
    for (const auto& s : r.seeds) {
      rows.push_back({{"seed", s.seed},
                      {"mse_base", s.report.mse_base},
                      {"mse_rb", s.report.mse_rb},
                      {"t_statistic", s.report.t_statistic},
                      {"p_value", s.report.p_value}});
    }
    j["seeds"] = rows;
  }
  out << j.dump() << '\n';
  return 0;
}

}  // namespace cli_detail

/// Runs the tool on `args` (without the program name).
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  using namespace cli_detail;
  Options o;
  CLI::App app{"Conditional flow-matching imputation for multivariate time series", "clwf"};
  app.require_subcommand(1);
  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key = value config file");
    c->add_option("--seed", o.seed, "random seed");
    c->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    c->add_option("--steps", o.steps, "Euler steps N")->check(CLI::PositiveNumber);
    c->add_option("--mc", o.mc, "Monte-Carlo samples M")->check(CLI::PositiveNumber);
    c->add_flag("--rao-blackwell", o.rao_blackwell, "enable the VAE potential correction");
    c->add_option("--coupling", o.coupling, "coupling mode")
        ->check(CLI::IsMember({"exact", "sinkhorn", "independent"}));
  };
  CLI::App* train = app.add_subcommand("train", "train the velocity model (and VAE)");
  common(train);
  train->add_option("--out", o.out, "checkpoint directory")->required();

  CLI::App* imp = app.add_subcommand("impute", "fill missing cells of a CSV");
  common(imp);
  imp->add_option("--checkpoint", o.checkpoint, "checkpoint directory written by train")->required();
  imp->add_option("--input", o.input, "CSV with missing cells")->required();
  imp->add_option("--out", o.out, "imputed CSV; samples go to <out>.samples.csv")->required();

  CLI::App* ev = app.add_subcommand("eval", "score an imputation against ground truth");
  ev->add_option("--imputed", o.imputed, "imputed CSV")->required();
  ev->add_option("--truth", o.truth, "ground-truth CSV")->required();
  ev->add_option("--mask", o.mask, "0/1 CSV marking evaluation entries")->required();
  ev->add_option("--samples", o.samples, "samples sidecar for CRPS");

  CLI::App* toy = app.add_subcommand("toy", "run a built-in experiment");
  common(toy);
  std::string names;
  for (const auto& n : experiment_names()) names += (names.empty() ? "" : ", ") + n;
  toy->add_option("name", o.experiment, "one of: " + names)->required();
  toy->add_option("--out", o.out, "directory for TSV point files")->default_str(".");
  toy->add_option("--num-seeds", o.num_seeds, "seeds for rb_ablation")->check(CLI::PositiveNumber);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    auto log = make_logger(err);
    if (train->parsed()) return cmd_train(o, out, *log);
    if (imp->parsed()) return cmd_impute(o, out, *log);
    if (ev->parsed()) return cmd_eval(o, out, *log);
    return cmd_toy(o, out, *log);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace clwf
