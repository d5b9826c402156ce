#pragma once

// Series ingestion (CSV), per-feature normalization, synthetic corpora and
// imputation metrics.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "clwf/random.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

/// B series of K features over L steps. values/obs_mask are (B, K, L).
struct SeriesBatch {
  std::size_t B = 0, K = 0, L = 0;
  Tensor values;
  Tensor obs_mask;
  std::vector<double> feature_means;
  std::vector<double> feature_stds;
  std::vector<std::string> feature_names;

  std::size_t state_dim() const { return K * L; }

  double& value(std::size_t b, std::size_t k, std::size_t l) { return values[(b * K + k) * L + l]; }
  double value(std::size_t b, std::size_t k, std::size_t l) const { return values[(b * K + k) * L + l]; }
  double mask(std::size_t b, std::size_t k, std::size_t l) const { return obs_mask[(b * K + k) * L + l]; }

  /// (B, K*L) views of the state used by the models.
  Tensor flat_values() const { return values.reshaped(Shape{B, K * L}); }
  Tensor flat_mask() const { return obs_mask.reshaped(Shape{B, K * L}); }
};

struct CsvLayout {
  std::size_t K = 0;
  std::size_t L = 0;
};

/// Raw cells of a CSV file: header plus one row per time step.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline bool is_missing_cell(std::string_view cell) {
  cell = detail::trim(cell);
  return cell.empty() || cell == "NaN" || cell == "nan" || cell == "NA";
}

inline std::optional<double> parse_number(std::string_view cell) {
  cell = detail::trim(cell);
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline CsvTable read_csv_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file (missing header row)");
  t.header = detail::split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(t.header.size()) + " cells, found " +
                               std::to_string(cells.size()));
    }
    for (const auto& c : cells) {
      if (!is_missing_cell(c) && !parse_number(c)) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed cell '" + c + "'");
      }
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline void write_csv_table(const std::string& path, const CsvTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      out << cells[i];
    }
    out << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
}

/// Values and observation mask from parsed cells. Missing cells get mask 0
/// and value 0.
inline SeriesBatch batch_from_table(const CsvTable& t, const CsvLayout& layout, const std::string& origin) {
  if (t.header.size() != layout.K) {
    throw std::runtime_error(origin + ": header has " + std::to_string(t.header.size()) +
                             " features, layout expects K=" + std::to_string(layout.K));
  }
  if (layout.L == 0 || t.rows.size() % layout.L != 0) {
    throw std::runtime_error(origin + ": " + std::to_string(t.rows.size()) +
                             " rows do not divide into series of length L=" + std::to_string(layout.L));
  }
  SeriesBatch b;
  b.K = layout.K;
  b.L = layout.L;
  b.B = t.rows.size() / layout.L;
  b.values = Tensor(Shape{b.B, b.K, b.L});
  b.obs_mask = Tensor(Shape{b.B, b.K, b.L});
  b.feature_names = t.header;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::size_t s = r / b.L, l = r % b.L;
    for (std::size_t k = 0; k < b.K; ++k) {
      const auto& cell = t.rows[r][k];
      if (is_missing_cell(cell)) continue;
      const std::size_t idx = (s * b.K + k) * b.L + l;
      b.values[idx] = *parse_number(cell);
      b.obs_mask[idx] = 1.0;
    }
  }
  b.feature_means.assign(b.K, 0.0);
  b.feature_stds.assign(b.K, 1.0);
  return b;
}

inline SeriesBatch load_csv(const std::string& path, const CsvLayout& layout) {
  return batch_from_table(read_csv_table(path), layout, path);
}

/// Cells for `b`; entries with mask 0 are written as NaN.
inline CsvTable table_from_batch(const SeriesBatch& b) {
  CsvTable t;
  t.header = b.feature_names;
  if (t.header.size() != b.K) {
    t.header.clear();
    for (std::size_t k = 0; k < b.K; ++k) t.header.push_back("f" + std::to_string(k));
  }
  for (std::size_t s = 0; s < b.B; ++s) {
    for (std::size_t l = 0; l < b.L; ++l) {
      std::vector<std::string> row;
      for (std::size_t k = 0; k < b.K; ++k) {
        row.push_back(b.mask(s, k, l) != 0.0 ? format_number(b.value(s, k, l)) : "NaN");
      }
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

inline void write_csv(const std::string& path, const SeriesBatch& b) {
  write_csv_table(path, table_from_batch(b));
}

/// 0/1 sidecar with the same layout as the series CSV.
inline void write_mask_csv(const std::string& path, const Tensor& mask, std::size_t K, std::size_t L,
                           const std::vector<std::string>& names) {
  SeriesBatch b;
  b.K = K;
  b.L = L;
  b.B = mask.size() / (K * L);
  b.values = mask.reshaped(Shape{b.B, K, L});
  b.obs_mask = Tensor(Shape{b.B, K, L}, 1.0);
  b.feature_names = names;
  write_csv(path, b);
}

inline Tensor load_mask_csv(const std::string& path, const CsvLayout& layout) {
  const SeriesBatch b = load_csv(path, layout);
  for (std::size_t i = 0; i < b.values.size(); ++i) {
    const double v = b.values[i];
    if (b.obs_mask[i] == 0.0 || (v != 0.0 && v != 1.0)) {
      throw std::runtime_error(path + ": mask entries must be 0 or 1");
    }
  }
  return b.values;
}

/// Per-feature mean/std over observed entries; zero-variance features get std 1.
inline void fit_normalization(SeriesBatch& b) {
  b.feature_means.assign(b.K, 0.0);
  b.feature_stds.assign(b.K, 1.0);
  for (std::size_t k = 0; k < b.K; ++k) {
    double n = 0.0, s = 0.0;
    for (std::size_t i = 0; i < b.B; ++i) {
      for (std::size_t l = 0; l < b.L; ++l) {
        if (b.mask(i, k, l) != 0.0) {
          n += 1.0;
          s += b.value(i, k, l);
        }
      }
    }
    if (n == 0.0) continue;
    const double mean = s / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < b.B; ++i) {
      for (std::size_t l = 0; l < b.L; ++l) {
        if (b.mask(i, k, l) != 0.0) {
          const double d = b.value(i, k, l) - mean;
          ss += d * d;
        }
      }
    }
    const double sd = std::sqrt(ss / n);
    b.feature_means[k] = mean;
    b.feature_stds[k] = sd > 1e-12 ? sd : 1.0;
  }
}

/// z-score with the batch's stored statistics; unobserved entries become 0.
inline SeriesBatch normalize(const SeriesBatch& b) {
  SeriesBatch out = b;
  for (std::size_t i = 0; i < b.B; ++i) {
    for (std::size_t k = 0; k < b.K; ++k) {
      for (std::size_t l = 0; l < b.L; ++l) {
        out.value(i, k, l) = b.mask(i, k, l) != 0.0
                                 ? (b.value(i, k, l) - b.feature_means[k]) / b.feature_stds[k]
                                 : 0.0;
      }
    }
  }
  return out;
}

inline SeriesBatch denormalize(const SeriesBatch& b) {
  SeriesBatch out = b;
  for (std::size_t i = 0; i < b.B; ++i) {
    for (std::size_t k = 0; k < b.K; ++k) {
      for (std::size_t l = 0; l < b.L; ++l) {
        out.value(i, k, l) = b.value(i, k, l) * b.feature_stds[k] + b.feature_means[k];
      }
    }
  }
  return out;
}

/// Copies statistics from `from` into `to` (test split uses training stats).
inline void share_normalization(const SeriesBatch& from, SeriesBatch& to) {
  to.feature_means = from.feature_means;
  to.feature_stds = from.feature_stds;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class SyntheticKind { two_gaussians_2d, sinusoid_mix };

struct SyntheticParams {
  std::size_t num_series = 256;
  // two_gaussians_2d: target mixture with equal weights.
  std::vector<std::pair<double, double>> centers{{-2.0, 0.0}, {2.0, 0.0}};
  double mode_std = 0.3;
  // sinusoid_mix
  std::size_t K = 4;
  std::size_t L = 32;
  double amplitude = 1.0;
  double min_cycles = 1.0;  // cycles per window
  double max_cycles = 3.0;
  double eval_mask_ratio = 0.2;
};

struct SyntheticData {
  SeriesBatch batch;  // obs_mask excludes evaluation targets
  Tensor truth;       // (B, K, L) complete ground truth
  Tensor eval_mask;   // (B, K, L) 1 at entries hidden for evaluation
};

/// `stream` selects an independent corpus for the same seed (held-out splits).
inline SyntheticData make_synthetic(SyntheticKind kind, const SyntheticParams& params, std::uint64_t seed,
                                    std::uint64_t stream = 0x73796e) {
  Rng rng = make_rng(seed, stream);
  SyntheticData out;
  SeriesBatch& b = out.batch;
  b.B = params.num_series;
  if (kind == SyntheticKind::two_gaussians_2d) {
    if (params.centers.empty()) throw std::invalid_argument("make_synthetic: no mixture centers");
    b.K = 2;
    b.L = 1;
    b.values = Tensor(Shape{b.B, 2, 1});
    std::uniform_int_distribution<std::size_t> pick(0, params.centers.size() - 1);
    for (std::size_t i = 0; i < b.B; ++i) {
      const auto [cx, cy] = params.centers[pick(rng)];
      b.values[2 * i] = cx + params.mode_std * standard_normal(rng);
      b.values[2 * i + 1] = cy + params.mode_std * standard_normal(rng);
    }
    b.obs_mask = Tensor(b.values.shape(), 1.0);
    b.feature_names = {"x", "y"};
    out.truth = b.values;
    out.eval_mask = Tensor(b.values.shape());
  } else {
    b.K = params.K;
    b.L = params.L;
    b.values = Tensor(Shape{b.B, b.K, b.L});
    std::uniform_real_distribution<double> cycles(params.min_cycles, params.max_cycles);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < b.B; ++i) {
      for (std::size_t k = 0; k < b.K; ++k) {
        const double f = cycles(rng);
        const double ph = phase(rng);
        for (std::size_t l = 0; l < b.L; ++l) {
          const double x = static_cast<double>(l) / static_cast<double>(b.L);
          b.value(i, k, l) = params.amplitude * std::sin(2.0 * std::numbers::pi * f * x + ph);
        }
      }
    }
    out.truth = b.values;
    out.eval_mask = Tensor(b.values.shape());
    b.obs_mask = Tensor(b.values.shape(), 1.0);
    for (std::size_t i = 0; i < b.values.size(); ++i) {
      if (uniform01(rng) < params.eval_mask_ratio) {
        out.eval_mask[i] = 1.0;
        b.obs_mask[i] = 0.0;
        b.values[i] = 0.0;
      }
    }
    for (std::size_t k = 0; k < b.K; ++k) b.feature_names.push_back("s" + std::to_string(k));
  }
  b.feature_means.assign(b.K, 0.0);
  b.feature_stds.assign(b.K, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricReport {
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> crps;
  std::size_t count = 0;
};

/// Sample-based CRPS: mean|s - y| - 0.5 mean|s - s'| over all ordered pairs.
inline double crps_samples(std::vector<double> samples, double y) {
  const double m = static_cast<double>(samples.size());
  double abs_err = 0.0;
  for (double s : samples) abs_err += std::abs(s - y);
  std::sort(samples.begin(), samples.end());
  // sum_{i,j} |s_i - s_j| = 2 sum_i (2i - m + 1) s_(i)
  double spread = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    spread += (2.0 * static_cast<double>(i) - m + 1.0) * samples[i];
  }
  spread *= 2.0;
  return abs_err / m - 0.5 * spread / (m * m);
}

/// Errors over entries where eval_mask != 0. `samples`, when given, is
/// (M, size of truth).
inline MetricReport metrics(const Tensor& imputed, const Tensor& truth, const Tensor& eval_mask,
                            const Tensor* samples = nullptr) {
  if (imputed.size() != truth.size() || eval_mask.size() != truth.size()) {
    throw std::invalid_argument("metrics: imputed/truth/mask sizes differ");
  }
  MetricReport r;
  double se = 0.0, ae = 0.0, crps = 0.0;
  std::size_t m = 0;
  if (samples) {
    if (samples->size() % truth.size() != 0 || samples->empty()) {
      throw std::invalid_argument("metrics: samples size is not a multiple of the truth size");
    }
    m = samples->size() / truth.size();
  }
  std::vector<double> draws(m);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (eval_mask[i] == 0.0) continue;
    const double d = imputed[i] - truth[i];
    se += d * d;
    ae += std::abs(d);
    if (samples) {
      for (std::size_t s = 0; s < m; ++s) draws[s] = (*samples)[s * truth.size() + i];
      crps += crps_samples(draws, truth[i]);
    }
    ++r.count;
  }
  if (r.count == 0) throw std::invalid_argument("metrics: evaluation mask is empty");
  const double n = static_cast<double>(r.count);
  r.rmse = std::sqrt(se / n);
  r.mae = ae / n;
  if (samples) r.crps = crps / n;
  return r;
}

inline std::string metric_json(const MetricReport& r) {
  std::ostringstream os;
  os << "{\"rmse\": " << format_number(r.rmse) << ", \"mae\": " << format_number(r.mae)
     << ", \"crps\": " << (r.crps ? format_number(*r.crps) : std::string("null"))
     << ", \"count\": " << r.count << "}";
  return os.str();
}

}  // namespace clwf
