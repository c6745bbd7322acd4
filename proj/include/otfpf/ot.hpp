#pragma once

// Entropic optimal transport between discrete measures.
//
//   min_{P in U(a,b)}  <C, P> - eps * H(P),   H(P) = -sum P_ij (log P_ij - 1)
//
// solved by Sinkhorn matrix scaling, plus an exact transportation-simplex
// solver for small unregularized instances.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "otfpf/tensor.hpp"

namespace otfpf::ot {

/// Row-major dense matrix of doubles.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), values(r * c, fill) {}
  DenseMatrix(std::size_t r, std::size_t c, std::vector<double> v)
      : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != r * c) {
      throw ShapeError("matrix: " + std::to_string(r) + "x" + std::to_string(c) +
                       " needs " + std::to_string(r * c) + " values, got " +
                       std::to_string(values.size()));
    }
  }

  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }

  double max_abs() const {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
  }
};

using CostMatrix = DenseMatrix;

/// Nonnegative weights summing to one.
struct DiscreteMeasure {
  std::vector<double> weights;

  static DiscreteMeasure uniform(std::size_t n) {
    if (n == 0) throw ShapeError("measure: empty support");
    return {std::vector<double>(n, 1.0 / static_cast<double>(n))};
  }

  std::size_t size() const { return weights.size(); }

  void validate(const char* what) const {
    if (weights.empty()) throw ShapeError(std::string(what) + ": empty measure");
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw ConfigError(std::string(what) + ": weights must be finite and >= 0");
      }
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ConfigError(std::string(what) + ": weights sum to " + std::to_string(s) +
                        ", expected 1");
    }
  }
};

struct SinkhornConfig {
  double epsilon = 0.1;
  std::size_t max_iterations = 100;
  double tolerance = 1e-6;
  /// Force log-domain updates. Otherwise they are chosen automatically
  /// when epsilon / max|C| falls below kLogDomainRatio.
  bool log_domain = false;

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
      throw ConfigError("sinkhorn: epsilon must be > 0");
    }
    if (!(tolerance > 0.0)) throw ConfigError("sinkhorn: tolerance must be > 0");
    if (max_iterations == 0) throw ConfigError("sinkhorn: max_iterations must be >= 1");
  }
};

inline constexpr double kLogDomainRatio = 0.02;

enum class StopReason { converged, max_iterations, fixed_iterations };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::converged: return "converged";
    case StopReason::max_iterations: return "max_iterations";
    case StopReason::fixed_iterations: return "fixed_iterations";
  }
  return "?";
}

struct TransportPlan {
  DenseMatrix plan;
  double achieved_cost = 0.0;
  double entropy = 0.0;
  std::size_t iterations_used = 0;
  double marginal_violation = 0.0;
  StopReason stop = StopReason::max_iterations;
  bool log_domain_used = false;

  bool converged() const { return stop == StopReason::converged; }
};

/// Dual potentials after every Sinkhorn iteration, f^t then g^t (t = 1..T).
/// Enough to differentiate the executed iterations in reverse.
struct SinkhornTrace {
  std::vector<std::vector<double>> f;
  std::vector<std::vector<double>> g;
};

inline void check_dims(const DiscreteMeasure& a, const DiscreteMeasure& b,
                       const CostMatrix& c) {
  if (a.size() != c.rows || b.size() != c.cols) {
    throw ShapeError("sinkhorn: measures of size " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " do not match cost " +
                     std::to_string(c.rows) + "x" + std::to_string(c.cols));
  }
  for (double v : c.values) {
    if (!std::isfinite(v)) throw ConfigError("sinkhorn: cost entries must be finite");
  }
}

/// Sum of C_ij P_ij.
inline double transport_cost(const DenseMatrix& p, const CostMatrix& c) {
  if (p.rows != c.rows || p.cols != c.cols) {
    throw ShapeError("transport_cost: plan and cost dimensions differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    if (p.values[i] < 0.0) throw ConfigError("transport_cost: negative plan entry");
    s += p.values[i] * c.values[i];
  }
  return s;
}

/// H(P) = -sum P_ij (log P_ij - 1) with 0 log 0 = 0.
inline double entropy(const DenseMatrix& p) {
  double h = 0.0;
  for (double v : p.values) {
    if (v < 0.0) throw ConfigError("entropy: negative plan entry");
    if (v > 0.0) h -= v * (std::log(v) - 1.0);
  }
  return h;
}

namespace detail {

inline double log_sum_exp(const double* v, std::size_t n, std::size_t stride = 1) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i * stride] - mx);
  return mx + std::log(s);
}

inline double safe_log(double w) {
  return w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
}

// Plan entries exp((f_i + g_j - C_ij)/eps).
inline DenseMatrix plan_from_potentials(const std::vector<double>& f,
                                        const std::vector<double>& g,
                                        const CostMatrix& c, double eps) {
  DenseMatrix p(c.rows, c.cols);
  for (std::size_t i = 0; i < c.rows; ++i) {
    for (std::size_t j = 0; j < c.cols; ++j) {
      const double z = (f[i] + g[j] - c(i, j)) / eps;
      p(i, j) = std::isfinite(z) ? std::exp(z) : 0.0;
    }
  }
  return p;
}

inline double marginal_violation(const DenseMatrix& p, const DiscreteMeasure& a,
                                 const DiscreteMeasure& b) {
  double v = 0.0;
  std::vector<double> cols(p.cols, 0.0);
  for (std::size_t i = 0; i < p.rows; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < p.cols; ++j) {
      r += p(i, j);
      cols[j] += p(i, j);
    }
    v = std::max(v, std::abs(r - a.weights[i]));
  }
  for (std::size_t j = 0; j < p.cols; ++j) v = std::max(v, std::abs(cols[j] - b.weights[j]));
  return v;
}

// Lagrange dual of the entropic problem; non-decreasing along exact
// Sinkhorn updates.
inline double dual_objective(const std::vector<double>& f, const std::vector<double>& g,
                             const DiscreteMeasure& a, const DiscreteMeasure& b,
                             const CostMatrix& c, double eps) {
  double d = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i)
    if (a.weights[i] > 0.0) d += f[i] * a.weights[i];
  for (std::size_t j = 0; j < g.size(); ++j)
    if (b.weights[j] > 0.0) d += g[j] * b.weights[j];
  const auto p = plan_from_potentials(f, g, c, eps);
  double mass = 0.0;
  for (double v : p.values) mass += v;
  return d - eps * mass;
}

}  // namespace detail

/// Entropic OT by Sinkhorn iterations. With `fixed_iterations` set, runs
/// exactly that many iterations without the convergence test (used when
/// replaying a differentiated computation). `trace`, when given, receives
/// the potentials of every iteration up to the returned iterate.
inline TransportPlan sinkhorn(const DiscreteMeasure& a, const DiscreteMeasure& b,
                              const CostMatrix& c, const SinkhornConfig& cfg,
                              SinkhornTrace* trace = nullptr,
                              std::optional<std::size_t> fixed_iterations = std::nullopt,
                              std::optional<bool> force_log_domain = std::nullopt) {
  cfg.validate();
  a.validate("sinkhorn: a");
  b.validate("sinkhorn: b");
  check_dims(a, b, c);
  const std::size_t n = c.rows, m = c.cols;
  const double eps = cfg.epsilon;
  const double cmax = c.max_abs();
  bool use_log = force_log_domain.value_or(cfg.log_domain ||
                                           (cmax > 0.0 && eps / cmax < kLogDomainRatio));

  const std::size_t iters = fixed_iterations.value_or(cfg.max_iterations);
  std::vector<double> f(n, 0.0), g(m, 0.0);
  std::vector<double> log_a(n), log_b(m);
  for (std::size_t i = 0; i < n; ++i) log_a[i] = detail::safe_log(a.weights[i]);
  for (std::size_t j = 0; j < m; ++j) log_b[j] = detail::safe_log(b.weights[j]);

  TransportPlan best;
  best.marginal_violation = std::numeric_limits<double>::infinity();
  SinkhornTrace local_trace;
  std::size_t best_iter = 0;
  std::vector<double> best_f, best_g;

  // Plain-domain state; a zero in K v or K^T u triggers a restart in log domain.
  DenseMatrix kernel;
  std::vector<double> u, v;
  if (!use_log) {
    kernel = DenseMatrix(n, m);
    for (std::size_t k = 0; k < c.values.size(); ++k) kernel.values[k] = std::exp(-c.values[k] / eps);
    u.assign(n, 1.0);
    v.assign(m, 1.0);
  }

#ifndef NDEBUG
  double last_dual = -std::numeric_limits<double>::infinity();
#endif
  std::vector<double> buf(std::max(n, m));
  for (std::size_t t = 1; t <= iters; ++t) {
    if (!use_log) {
      bool underflow = false;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += kernel(i, j) * v[j];
        if (!(s > 0.0) || !std::isfinite(s)) underflow = true;
        u[i] = a.weights[i] / s;
      }
      for (std::size_t j = 0; j < m && !underflow; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += kernel(i, j) * u[i];
        if (!(s > 0.0) || !std::isfinite(s)) underflow = true;
        v[j] = b.weights[j] / s;
      }
      if (underflow) {
        // restart from scratch in the stable domain
        return sinkhorn(a, b, c, cfg, trace, fixed_iterations, true);
      }
      for (std::size_t i = 0; i < n; ++i) f[i] = eps * detail::safe_log(u[i]);
      for (std::size_t j = 0; j < m; ++j) g[j] = eps * detail::safe_log(v[j]);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) buf[j] = (g[j] - c(i, j)) / eps;
        f[i] = eps * (log_a[i] - detail::log_sum_exp(buf.data(), m));
      }
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = (f[i] - c(i, j)) / eps;
        g[j] = eps * (log_b[j] - detail::log_sum_exp(buf.data(), n));
      }
    }
    local_trace.f.push_back(f);
    local_trace.g.push_back(g);

#ifndef NDEBUG
    {
      const double d = detail::dual_objective(f, g, a, b, c, eps);
      assert(d >= last_dual - 1e-9 * (1.0 + std::abs(d)));
      last_dual = d;
    }
#endif

    auto p = detail::plan_from_potentials(f, g, c, eps);
    const double viol = detail::marginal_violation(p, a, b);
    if (viol < best.marginal_violation || fixed_iterations) {
      best.plan = std::move(p);
      best.marginal_violation = viol;
      best_iter = t;
    }
    if (!fixed_iterations && viol <= cfg.tolerance) {
      best.stop = StopReason::converged;
      break;
    }
  }
  if (fixed_iterations) best.stop = StopReason::fixed_iterations;
  best.iterations_used = best_iter;
  best.log_domain_used = use_log;
  best.achieved_cost = transport_cost(best.plan, c);
  best.entropy = entropy(best.plan);
  if (trace) {
    local_trace.f.resize(best_iter);
    local_trace.g.resize(best_iter);
    *trace = std::move(local_trace);
  }
  return best;
}

/// Reverse-mode sensitivity of the plan returned with `trace` with respect
/// to the cost matrix, given dL/dP. Differentiates exactly the recorded
/// iterations (f^1, g^1, ..., f^T, g^T), starting from g^0 = 0.
inline DenseMatrix sinkhorn_cost_gradient(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                          const CostMatrix& c, double eps,
                                          const SinkhornTrace& trace,
                                          const DenseMatrix& plan_grad) {
  const std::size_t n = c.rows, m = c.cols;
  const std::size_t iters = trace.f.size();
  DenseMatrix dc(n, m);
  if (iters == 0) return dc;
  const auto& f_last = trace.f.back();
  const auto& g_last = trace.g.back();
  std::vector<double> df(n, 0.0), dg(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double z = (f_last[i] + g_last[j] - c(i, j)) / eps;
      const double p = std::isfinite(z) ? std::exp(z) : 0.0;
      const double w = plan_grad(i, j) * p / eps;
      df[i] += w;
      dg[j] += w;
      dc(i, j) -= w;
    }
  }
  const std::vector<double> g_zero(m, 0.0);
  for (std::size_t t = iters; t-- > 0;) {
    const auto& ft = trace.f[t];
    const auto& gt = trace.g[t];
    const auto& gprev = t == 0 ? g_zero : trace.g[t - 1];
    // g^t_j = eps log b_j - eps LSE_i((f^t_i - C_ij)/eps)
    for (std::size_t j = 0; j < m; ++j) {
      if (b.weights[j] <= 0.0 || dg[j] == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) {
        const double z = (ft[i] + gt[j] - c(i, j)) / eps;
        const double bij = std::isfinite(z) ? std::exp(z) / b.weights[j] : 0.0;
        dc(i, j) += dg[j] * bij;
        df[i] -= dg[j] * bij;
      }
    }
    // f^t_i = eps log a_i - eps LSE_j((g^{t-1}_j - C_ij)/eps)
    std::vector<double> dg_prev(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (a.weights[i] <= 0.0 || df[i] == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) {
        const double z = (ft[i] + gprev[j] - c(i, j)) / eps;
        const double aij = std::isfinite(z) ? std::exp(z) / a.weights[i] : 0.0;
        dc(i, j) += df[i] * aij;
        dg_prev[j] -= df[i] * aij;
      }
    }
    std::fill(df.begin(), df.end(), 0.0);
    dg = std::move(dg_prev);
  }
  return dc;
}

/// Exact unregularized OT for small instances (n*m <= 64) by the
/// transportation simplex: north-west-corner start, MODI pricing, Bland's
/// rule against cycling.
struct ExactSolution {
  DenseMatrix plan;
  double cost = 0.0;
};

inline constexpr std::size_t kExactMaxCells = 64;

inline ExactSolution exact_ot_small(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                    const CostMatrix& c) {
  a.validate("exact_ot_small: a");
  b.validate("exact_ot_small: b");
  check_dims(a, b, c);
  const std::size_t n = c.rows, m = c.cols;
  if (n * m > kExactMaxCells) {
    throw ConfigError("exact_ot_small: instance " + std::to_string(n) + "x" +
                      std::to_string(m) + " exceeds " + std::to_string(kExactMaxCells) +
                      " cells");
  }
  const double tiny = 1e-15;
  DenseMatrix x(n, m);
  std::vector<char> basic(n * m, 0);
  {
    std::vector<double> ra = a.weights, rb = b.weights;
    std::size_t i = 0, j = 0;
    while (true) {
      const double q = std::min(ra[i], rb[j]);
      x(i, j) = q;
      basic[i * m + j] = 1;
      ra[i] -= q;
      rb[j] -= q;
      if (i == n - 1 && j == m - 1) break;
      const bool row_done = ra[i] <= rb[j] + tiny;
      if ((row_done && i < n - 1) || j == m - 1) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  // Nodes 0..n-1 are rows, n..n+m-1 columns; basic cells are tree edges.
  auto tree_path = [&](std::size_t row, std::size_t col) {
    const std::size_t nodes = n + m;
    std::vector<std::ptrdiff_t> parent(nodes, -1);
    std::vector<char> seen(nodes, 0);
    std::queue<std::size_t> q;
    q.push(row);
    seen[row] = 1;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      if (u == n + col) break;
      if (u < n) {
        for (std::size_t jj = 0; jj < m; ++jj) {
          if (basic[u * m + jj] && !seen[n + jj]) {
            seen[n + jj] = 1;
            parent[n + jj] = static_cast<std::ptrdiff_t>(u);
            q.push(n + jj);
          }
        }
      } else {
        const std::size_t jj = u - n;
        for (std::size_t ii = 0; ii < n; ++ii) {
          if (basic[ii * m + jj] && !seen[ii]) {
            seen[ii] = 1;
            parent[ii] = static_cast<std::ptrdiff_t>(u);
            q.push(ii);
          }
        }
      }
    }
    // cells from row to col along the tree, in order starting at `row`
    std::vector<std::size_t> cells;
    std::size_t node = n + col;
    while (node != row) {
      const auto p = static_cast<std::size_t>(parent[node]);
      const std::size_t r = node < n ? node : p;
      const std::size_t cl = node < n ? p - n : node - n;
      cells.push_back(r * m + cl);
      node = p;
    }
    std::reverse(cells.begin(), cells.end());
    return cells;
  };

  const std::size_t max_pivots = 10000;
  for (std::size_t pivot = 0;; ++pivot) {
    if (pivot == max_pivots) throw NumericalError("exact_ot_small: pivot limit reached");
    // potentials: u_i + v_j = C_ij on basic cells
    std::vector<double> u(n, 0.0), v(m, 0.0);
    std::vector<char> have_u(n, 0), have_v(m, 0);
    have_u[0] = 1;
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          if (!basic[i * m + j]) continue;
          if (have_u[i] && !have_v[j]) {
            v[j] = c(i, j) - u[i];
            have_v[j] = changed = 1;
          } else if (!have_u[i] && have_v[j]) {
            u[i] = c(i, j) - v[j];
            have_u[i] = changed = 1;
          }
        }
      }
    }
    std::ptrdiff_t entering = -1;
    const double scale = 1e-12 * (1.0 + c.max_abs());
    for (std::size_t k = 0; k < n * m; ++k) {
      if (basic[k]) continue;
      const std::size_t i = k / m, j = k % m;
      if (c(i, j) - u[i] - v[j] < -scale) {
        entering = static_cast<std::ptrdiff_t>(k);
        break;
      }
    }
    if (entering < 0) break;
    const std::size_t ei = static_cast<std::size_t>(entering) / m;
    const std::size_t ej = static_cast<std::size_t>(entering) % m;
    const auto path = tree_path(ei, ej);
    // path cells alternate -, +, -, ... starting at the entering row
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leaving = n * m;
    for (std::size_t k = 0; k < path.size(); k += 2) {
      const double val = x.values[path[k]];
      if (val < theta - tiny) {
        theta = val;
        leaving = path[k];
      } else if (val <= theta + tiny && path[k] < leaving) {
        theta = std::min(theta, val);
        leaving = path[k];
      }
    }
    x.values[static_cast<std::size_t>(entering)] += theta;
    for (std::size_t k = 0; k < path.size(); ++k) {
      x.values[path[k]] += (k % 2 == 0) ? -theta : theta;
    }
    basic[static_cast<std::size_t>(entering)] = 1;
    basic[leaving] = 0;
    x.values[leaving] = 0.0;
  }
  for (double& v : x.values) v = std::max(v, 0.0);
  ExactSolution sol;
  sol.cost = transport_cost(x, c);
  sol.plan = std::move(x);
  return sol;
}

}  // namespace otfpf::ot
