#pragma once

// Mini-batch optimal transport between noise and target samples under the
// squared-Euclidean cost 0.5 * |x0 - xT|^2.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/random.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> entries;  // row-major n x n

  double operator()(std::size_t i, std::size_t j) const { return entries[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return entries[i * n + j]; }
};

enum class CouplingMode { exact, sinkhorn, independent };

inline CouplingMode parse_coupling_mode(const std::string& s) {
  if (s == "exact") return CouplingMode::exact;
  if (s == "sinkhorn") return CouplingMode::sinkhorn;
  if (s == "independent") return CouplingMode::independent;
  throw std::invalid_argument("unknown coupling mode '" + s +
                              "' (expected exact|sinkhorn|independent)");
}

inline const char* coupling_mode_name(CouplingMode m) {
  switch (m) {
    case CouplingMode::exact: return "exact";
    case CouplingMode::sinkhorn: return "sinkhorn";
    case CouplingMode::independent: return "independent";
  }
  return "?";
}

struct Coupling {
  CouplingMode mode = CouplingMode::exact;
  std::vector<std::size_t> assignment;  // exact: row i -> column assignment[i]
  std::vector<double> plan;             // sinkhorn: n x n, rows/cols sum to 1/n
  double total_cost = 0.0;
  // Sinkhorn diagnostics.
  double marginal_violation = 0.0;
  std::size_t iterations = 0;
  bool log_domain = false;
};

/// Batches are (n, d): one flattened state per row.
inline CostMatrix pairwise_sq_cost(const Tensor& x0, const Tensor& xT) {
  if (x0.rank() != 2 || xT.rank() != 2 || x0.dim(0) != xT.dim(0) || x0.dim(1) != xT.dim(1)) {
    throw std::invalid_argument("pairwise_sq_cost: batch shapes differ " +
                                shape_string(x0.shape()) + " vs " + shape_string(xT.shape()));
  }
  const std::size_t n = x0.dim(0), d = x0.dim(1);
  CostMatrix c{n, std::vector<double>(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = x0.data().data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = xT.data().data() + j * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[k] - b[k];
        s += diff * diff;
      }
      c(i, j) = 0.5 * s;
    }
  }
  return c;
}

inline double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < cost.n; ++i) total += cost(i, assignment[i]);
  return total;
}

namespace detail {

inline void require_square_finite(const CostMatrix& cost, const char* who) {
  if (cost.entries.size() != cost.n * cost.n) {
    throw std::invalid_argument(std::string(who) + ": cost matrix is not square");
  }
  for (double v : cost.entries) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite cost entry");
  }
}

// Kuhn-style augmentation restricted to tight edges. Rows < `first_free_row`
// are frozen. Succeeds when it reaches `target_col`.
struct TightGraph {
  const std::vector<char>& tight;
  std::size_t n;
  std::vector<std::size_t>& row_of_col;
  std::vector<std::size_t>& col_of_row;
  const std::vector<char>& frozen_col;
  std::vector<char> visited;

  bool augment(std::size_t row, std::size_t target_col) {
    for (std::size_t c = 0; c < n; ++c) {
      if (!tight[row * n + c] || frozen_col[c] || visited[c]) continue;
      visited[c] = 1;
      if (c == target_col || augment(row_of_col[c], target_col)) {
        row_of_col[c] = row;
        col_of_row[row] = c;
        return true;
      }
    }
    return false;
  }
};

}  // namespace detail

/// Minimum-cost permutation via the O(n^3) shortest augmenting path
/// (Hungarian) method, then refined to the lexicographically smallest optimal
/// assignment by walking alternating cycles over zero-reduced-cost edges.
inline Coupling solve_exact(const CostMatrix& cost) {
  detail::require_square_finite(cost, "solve_exact");
  const std::size_t n = cost.n;
  Coupling out;
  out.mode = CouplingMode::exact;
  if (n == 0) return out;

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual root.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> col_of_row(n), row_of_col(n);
  for (std::size_t j = 1; j <= n; ++j) {
    col_of_row[p[j] - 1] = j - 1;
    row_of_col[j - 1] = p[j] - 1;
  }

  // Every optimal assignment uses only edges with zero reduced cost.
  double scale = 0.0;
  for (double c : cost.entries) scale = std::max(scale, std::abs(c));
  const double tol = 1e-12 * std::max(1.0, scale) * static_cast<double>(n);
  std::vector<char> tight(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      tight[i * n + j] = (cost(i, j) - u[i + 1] - v[j + 1]) <= tol;
    }
  }

  std::vector<char> frozen_col(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (frozen_col[j] || !tight[i * n + j]) continue;
      if (col_of_row[i] == j) break;
      // Move row i onto column j; the row that owned j must find a path back
      // to the column row i released.
      const std::size_t released = col_of_row[i];
      const std::size_t displaced = row_of_col[j];
      auto trial_cols = col_of_row;
      auto trial_rows = row_of_col;
      std::vector<char> blocked = frozen_col;
      blocked[j] = 1;
      trial_cols[i] = j;
      trial_rows[j] = i;
      detail::TightGraph g{tight, n, trial_rows, trial_cols, blocked, std::vector<char>(n, 0)};
      if (g.augment(displaced, released)) {
        col_of_row = std::move(trial_cols);
        row_of_col = std::move(trial_rows);
        break;
      }
    }
    frozen_col[col_of_row[i]] = 1;
  }

  out.assignment = std::move(col_of_row);
  out.total_cost = assignment_cost(cost, out.assignment);
  return out;
}

struct SinkhornOptions {
  double epsilon = 0.05;
  std::size_t max_iters = 10000;
  double tol = 1e-9;
};

namespace detail {

inline double marginal_violation(const std::vector<double>& plan, std::size_t n) {
  const double target = 1.0 / static_cast<double>(n);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0, c = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r += plan[i * n + j];
      c += plan[j * n + i];
    }
    worst = std::max({worst, std::abs(r - target), std::abs(c - target)});
  }
  return worst;
}

inline double log_sum_exp(const double* xs, std::size_t n, std::size_t stride) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) m = std::max(m, xs[k * stride]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(xs[k * stride] - m);
  return m + std::log(s);
}

// Returns false when the kernel underflows and the scaling form cannot proceed.
inline bool sinkhorn_scaling(const CostMatrix& cost, const SinkhornOptions& opt, Coupling& out) {
  const std::size_t n = cost.n;
  const double w = 1.0 / static_cast<double>(n);
  std::vector<double> kernel(n * n);
  for (std::size_t k = 0; k < n * n; ++k) kernel[k] = std::exp(-cost.entries[k] / opt.epsilon);
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0, c = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r += kernel[i * n + j];
      c += kernel[j * n + i];
    }
    if (!(r > 1e-200) || !(c > 1e-200)) return false;
  }
  std::vector<double> a(n, 1.0), b(n, 1.0), plan(n * n);
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += kernel[i * n + j] * b[j];
      a[i] = w / s;
    }
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += kernel[i * n + j] * a[i];
      b[j] = w / s;
    }
    for (double x : a) if (!std::isfinite(x) || x == 0.0) return false;
    for (double x : b) if (!std::isfinite(x) || x == 0.0) return false;
    out.iterations = it;
    // Columns are exact after the b-update; rows carry the residual.
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < n; ++j) r += a[i] * kernel[i * n + j] * b[j];
      worst = std::max(worst, std::abs(r - w));
    }
    if (worst < opt.tol) break;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) plan[i * n + j] = a[i] * kernel[i * n + j] * b[j];
  }
  for (double x : plan) if (!std::isfinite(x)) return false;
  out.plan = std::move(plan);
  return true;
}

inline void sinkhorn_log(const CostMatrix& cost, const SinkhornOptions& opt, Coupling& out) {
  const std::size_t n = cost.n;
  const double log_w = -std::log(static_cast<double>(n));
  const double w = 1.0 / static_cast<double>(n);
  std::vector<double> f(n, 0.0), g(n, 0.0), buf(n * n);
  auto fill_buf = [&]() {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        buf[i * n + j] = (f[i] + g[j] - cost(i, j)) / opt.epsilon;
      }
    }
  };
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    fill_buf();
    for (std::size_t i = 0; i < n; ++i) {
      f[i] += opt.epsilon * (log_w - log_sum_exp(&buf[i * n], n, 1));
    }
    fill_buf();
    for (std::size_t j = 0; j < n; ++j) {
      g[j] += opt.epsilon * (log_w - log_sum_exp(&buf[j], n, n));
    }
    out.iterations = it;
    fill_buf();
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(std::exp(log_sum_exp(&buf[i * n], n, 1)) - w));
    }
    if (worst < opt.tol) break;
  }
  fill_buf();
  out.plan.resize(n * n);
  for (std::size_t k = 0; k < n * n; ++k) out.plan[k] = std::exp(buf[k]);
}

}  // namespace detail

/// Entropic OT with uniform marginals. Runs multiplicative scaling and falls
/// back to log-domain updates when exp(-cost/epsilon) underflows.
inline Coupling solve_sinkhorn(const CostMatrix& cost, const SinkhornOptions& opt = {}) {
  detail::require_square_finite(cost, "solve_sinkhorn");
  if (!(opt.epsilon > 0.0)) throw std::invalid_argument("solve_sinkhorn: epsilon must be positive");
  Coupling out;
  out.mode = CouplingMode::sinkhorn;
  const std::size_t n = cost.n;
  if (n == 0) return out;
  if (!detail::sinkhorn_scaling(cost, opt, out)) {
    out = Coupling{};
    out.mode = CouplingMode::sinkhorn;
    out.log_domain = true;
    detail::sinkhorn_log(cost, opt, out);
  }
  out.marginal_violation = detail::marginal_violation(out.plan, n);
  double total = 0.0;
  for (std::size_t k = 0; k < n * n; ++k) total += cost.entries[k] * out.plan[k];
  out.total_cost = total;
  return out;
}

/// Index pairs (source row, target row) produced by a coupling.
struct Pairing {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

/// Pairs noise rows with target rows. Exact: each source row goes to its
/// assigned target. Sinkhorn: each source row draws a target from its plan
/// row. Independent: identity.
inline Pairing couple_minibatch(const Tensor& x0, const Tensor& xT, CouplingMode mode, Rng& rng,
                                const SinkhornOptions& sinkhorn = {}) {
  if (x0.rank() != 2 || x0.shape() != xT.shape()) {
    throw std::invalid_argument("couple_minibatch: batch shapes differ " +
                                shape_string(x0.shape()) + " vs " + shape_string(xT.shape()));
  }
  const std::size_t n = x0.dim(0);
  Pairing p;
  p.source.resize(n);
  std::iota(p.source.begin(), p.source.end(), std::size_t{0});
  switch (mode) {
    case CouplingMode::independent:
      p.target = p.source;
      break;
    case CouplingMode::exact:
      p.target = solve_exact(pairwise_sq_cost(x0, xT)).assignment;
      break;
    case CouplingMode::sinkhorn: {
      const Coupling c = solve_sinkhorn(pairwise_sq_cost(x0, xT), sinkhorn);
      p.target.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::discrete_distribution<std::size_t> pick(c.plan.begin() + i * n,
                                                     c.plan.begin() + (i + 1) * n);
        p.target[i] = pick(rng);
      }
      break;
    }
  }
  return p;
}

/// Rows of `x` in the order given by `index`.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index) {
  const std::size_t d = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = index.size();
  Tensor out(s);
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(x.data().begin() + index[r] * d, d, out.data().begin() + r * d);
  }
  return out;
}

}  // namespace clwf
