#pragma once

// Flat `key = value` run configuration shared by the command-line tool and the
// built-in experiments. `#` starts a comment; unknown keys are errors.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/data_eval.hpp"
#include "clwf/sampler.hpp"
#include "clwf/trainer.hpp"

namespace clwf {

enum class DatasetKind { sinusoid_mix, two_gaussians_2d, csv };

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "sinusoid_mix") return DatasetKind::sinusoid_mix;
  if (s == "two_gaussians_2d") return DatasetKind::two_gaussians_2d;
  if (s == "csv") return DatasetKind::csv;
  throw std::invalid_argument("expected sinusoid_mix|two_gaussians_2d|csv");
}

inline std::string dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::sinusoid_mix: return "sinusoid_mix";
    case DatasetKind::two_gaussians_2d: return "two_gaussians_2d";
    case DatasetKind::csv: return "csv";
  }
  return "?";
}

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  DatasetKind dataset = DatasetKind::sinusoid_mix;
  std::string train_csv;
  SyntheticParams synthetic;     // also carries K, L for csv input
  std::size_t test_series = 128;  // held-out synthetic series

  TrainConfig train;
  VaeTrainConfig vae;
  SampleConfig sample;

  /// Copies the fields that training and sampling must agree on.
  void sync() {
    sample.horizon = train.interpolant.horizon;
    sample.sigma_0 = train.interpolant.sigma_0;
    sample.threads = threads;
    train.seed = seed;
    vae.seed = seed;
    sample.seed = seed;
  }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
T parse_integral(const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument("expected an integer");
  return out;
}

inline double parse_real(const std::string& v) {
  const auto r = parse_number(v);
  if (!r || !std::isfinite(*r)) throw std::invalid_argument("expected a finite number");
  return *r;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected true|false");
}

inline std::vector<std::size_t> parse_dims(const std::string& v) {
  std::vector<std::size_t> out;
  std::string tok;
  std::istringstream in(v);
  while (std::getline(in, tok, ',')) {
    const auto t = std::string(trim(tok));
    if (t.empty()) continue;
    const auto d = parse_integral<std::size_t>(t);
    if (d == 0) throw std::invalid_argument("layer widths must be positive");
    out.push_back(d);
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list of widths");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& config_setters() {
  using R = RunConfig;
  using S = const std::string&;
  auto count = [](auto member) {
    return [member](R& c, S v) {
      const auto n = parse_integral<std::size_t>(v);
      if (n == 0) throw std::invalid_argument("must be positive");
      member(c) = n;
    };
  };
  auto positive = [](auto member) {
    return [member](R& c, S v) {
      const double x = parse_real(v);
      if (!(x > 0.0)) throw std::invalid_argument("must be > 0");
      member(c) = x;
    };
  };
  auto nonneg = [](auto member) {
    return [member](R& c, S v) {
      const double x = parse_real(v);
      if (!(x >= 0.0)) throw std::invalid_argument("must be >= 0");
      member(c) = x;
    };
  };
  static const std::map<std::string, Setter> setters{
      {"seed", [](R& c, S v) { c.seed = parse_integral<std::uint64_t>(v); }},
      {"threads", count([](R& c) -> std::size_t& { return c.threads; })},
      {"dataset", [](R& c, S v) { c.dataset = parse_dataset_kind(v); }},
      {"train_csv", [](R& c, S v) { c.train_csv = v; }},
      {"K", count([](R& c) -> std::size_t& { return c.synthetic.K; })},
      {"L", count([](R& c) -> std::size_t& { return c.synthetic.L; })},
      {"num_series", count([](R& c) -> std::size_t& { return c.synthetic.num_series; })},
      {"test_series", count([](R& c) -> std::size_t& { return c.test_series; })},
      {"eval_mask_ratio",
       [](R& c, S v) {
         const double x = parse_real(v);
         if (!(x > 0.0 && x < 1.0)) throw std::invalid_argument("must lie in (0, 1)");
         c.synthetic.eval_mask_ratio = x;
       }},
      {"amplitude", positive([](R& c) -> double& { return c.synthetic.amplitude; })},
      {"min_cycles", positive([](R& c) -> double& { return c.synthetic.min_cycles; })},
      {"max_cycles", positive([](R& c) -> double& { return c.synthetic.max_cycles; })},
      {"mode_std", positive([](R& c) -> double& { return c.synthetic.mode_std; })},
      {"epochs", count([](R& c) -> std::size_t& { return c.train.epochs; })},
      {"batch_size", count([](R& c) -> std::size_t& { return c.train.batch_size; })},
      {"learning_rate", positive([](R& c) -> double& { return c.train.learning_rate; })},
      {"horizon", positive([](R& c) -> double& { return c.train.interpolant.horizon; })},
      {"sigma_gamma", nonneg([](R& c) -> double& { return c.train.interpolant.sigma_gamma; })},
      {"alpha", nonneg([](R& c) -> double& { return c.train.interpolant.alpha; })},
      {"sigma_0", positive([](R& c) -> double& { return c.train.interpolant.sigma_0; })},
      {"coupling", [](R& c, S v) { c.train.coupling = parse_coupling_mode(v); }},
      {"sinkhorn_epsilon", positive([](R& c) -> double& { return c.train.sinkhorn.epsilon; })},
      {"target_mask_ratio",
       [](R& c, S v) {
         const double x = parse_real(v);
         if (!(x > 0.0 && x < 1.0)) throw std::invalid_argument("must lie in (0, 1)");
         c.train.target_mask_ratio = x;
       }},
      {"split_masks", [](R& c, S v) { c.train.split_masks = parse_bool(v); }},
      {"loss_mask", [](R& c, S v) { c.train.loss_mask = parse_loss_mask(v); }},
      {"grad_clip", positive([](R& c) -> double& { return c.train.grad_clip; })},
      {"hidden_dims", [](R& c, S v) { c.train.hidden_dims = parse_dims(v); }},
      {"time_embed_dim",
       [](R& c, S v) {
         const auto n = parse_integral<std::size_t>(v);
         if (n == 0 || n % 2 != 0) throw std::invalid_argument("must be a positive even integer");
         c.train.time_embed_dim = n;
       }},
      {"activation", [](R& c, S v) { c.train.activation = c.vae.activation = parse_activation(v); }},
      {"vae_epochs", count([](R& c) -> std::size_t& { return c.vae.epochs; })},
      {"vae_batch_size", count([](R& c) -> std::size_t& { return c.vae.batch_size; })},
      {"vae_learning_rate", positive([](R& c) -> double& { return c.vae.learning_rate; })},
      {"vae_beta", nonneg([](R& c) -> double& { return c.vae.beta; })},
      {"vae_hidden_dims", [](R& c, S v) { c.vae.hidden_dims = parse_dims(v); }},
      {"latent_dim", count([](R& c) -> std::size_t& { return c.vae.latent_dim; })},
      {"steps", count([](R& c) -> std::size_t& { return c.sample.steps; })},
      {"mc_samples", count([](R& c) -> std::size_t& { return c.sample.mc_samples; })},
      {"rao_blackwell", [](R& c, S v) { c.sample.rao_blackwell = parse_bool(v); }},
      {"sigma_p_sq", positive([](R& c) -> double& { return c.sample.potential.sigma_p_sq; })},
  };
  return setters;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_setters()) out.push_back(k);
  return out;
}

/// Applies one assignment; errors name the key and the offending value.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& setters = detail::config_setters();
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown key '" + key + "'");
  try {
    it->second(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("bad value for '" + key + "': '" + value + "' (" + e.what() + ")");
  }
}

/// Parses `text` on top of `base`. `origin` prefixes error messages.
inline RunConfig parse_config(const std::string& text, const std::string& origin, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value', got '" + std::string(body) + "'");
    const std::string key(detail::trim(body.substr(0, eq)));
    const std::string value(detail::trim(body.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + "missing key before '='");
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  base.sync();
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config not found: '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path, std::move(base));
}

}  // namespace clwf
