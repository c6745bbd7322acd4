#pragma once

// Optimal transport embedding of a variable-size feature set into a fixed
// n x p representation:
//
//   psi(X)  = k(X, w) k(w, w)^{-1/2}                (Nystrom features, m x p)
//   C_jk    = |psi_j - e_k|^2                       (m x n)
//   P       = sinkhorn(C, a = 1/m, b = 1/n)
//   out     = sqrt(n) * P^T psi                     (n x p)

#include <memory>
#include <random>

#include <Eigen/Eigenvalues>

#include "otfpf/ops.hpp"
#include "otfpf/ot.hpp"

namespace otfpf {

struct KernelSpec {
  double sigma = 1.0;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw ConfigError("gaussian kernel: sigma must be > 0");
    }
  }
};

inline constexpr double kEigenClamp = 1e-8;
inline constexpr double kSymmetryTolerance = 1e-6;
inline constexpr double kMinAnchorSeparation = 1e-6;

/// Diagnostics gathered while embedding one set.
struct OtemDiagnostics {
  std::size_t sinkhorn_iterations = 0;
  bool sinkhorn_converged = false;
  double marginal_violation = 0.0;
  bool log_domain = false;
  std::size_t clamped_eigenvalues = 0;
};

namespace detail {

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* op, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": " + what + " must be a matrix, got " +
                     to_string(t.shape()));
  }
}

}  // namespace detail

/// G_ij = exp(-|x_i - y_j|^2 / (2 sigma^2)).
template <typename T>
BasicTensor<T> gaussian_kernel(const BasicTensor<T>& x, const BasicTensor<T>& y,
                               double sigma) {
  KernelSpec{sigma}.validate();
  detail::require_matrix(x, "gaussian_kernel", "X");
  detail::require_matrix(y, "gaussian_kernel", "Y");
  if (x.extent(1) != y.extent(1)) {
    throw ShapeError("gaussian_kernel: feature widths differ, " + to_string(x.shape()) +
                     " vs " + to_string(y.shape()));
  }
  const std::size_t m = x.extent(0), q = y.extent(0), c = x.extent(1);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  BasicTensor<T> g({m, q});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = double(x[i * c + k]) - double(y[j * c + k]);
        d2 += d * d;
      }
      g[i * q + j] = static_cast<T>(std::exp(-d2 * inv));
    }
  }
  return g;
}

/// Symmetric eigendecomposition with eigenvalues clamped below at kEigenClamp.
struct SymmetricEigen {
  Eigen::MatrixXd vectors;
  Eigen::VectorXd values;  // clamped
  Eigen::VectorXd raw_values;
  std::size_t clamped = 0;
};

template <typename T>
SymmetricEigen symmetric_eigen(const BasicTensor<T>& g) {
  detail::require_matrix(g, "matrix_inv_sqrt", "G");
  const std::size_t p = g.extent(0);
  if (g.extent(1) != p) throw ShapeError("matrix_inv_sqrt: G must be square");
  Eigen::MatrixXd a(p, p);
  double asym = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      a(i, j) = g[i * p + j];
      asym = std::max(asym, std::abs(double(g[i * p + j]) - double(g[j * p + i])));
    }
  }
  if (asym > kSymmetryTolerance) {
    throw ShapeError("matrix_inv_sqrt: input is not symmetric (max deviation " +
                     std::to_string(asym) + ")");
  }
  a = (0.5 * (a + a.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) {
    throw NumericalError("matrix_inv_sqrt: eigendecomposition failed");
  }
  SymmetricEigen out;
  out.vectors = es.eigenvectors();
  out.raw_values = es.eigenvalues();
  out.values = out.raw_values;
  for (Eigen::Index i = 0; i < out.values.size(); ++i) {
    if (out.values(i) < kEigenClamp) {
      out.values(i) = kEigenClamp;
      ++out.clamped;
    }
  }
  return out;
}

/// Q diag(max(lambda, 1e-8)^{-1/2}) Q^T of a symmetric PSD matrix.
template <typename T>
BasicTensor<T> matrix_inv_sqrt(const BasicTensor<T>& g, std::size_t* clamped = nullptr) {
  const auto eig = symmetric_eigen(g);
  if (clamped) *clamped = eig.clamped;
  const Eigen::MatrixXd r = eig.vectors * eig.values.cwiseSqrt().cwiseInverse().asDiagonal() *
                            eig.vectors.transpose();
  const std::size_t p = g.extent(0);
  BasicTensor<T> out({p, p});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = static_cast<T>(r(i, j));
  return out;
}

/// Squared Euclidean distances between rows, m x n.
template <typename T>
BasicTensor<T> squared_distances(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  detail::require_matrix(x, "squared_distances", "X");
  detail::require_matrix(y, "squared_distances", "Y");
  if (x.extent(1) != y.extent(1)) throw ShapeError("squared_distances: widths differ");
  const std::size_t m = x.extent(0), n = y.extent(0), c = x.extent(1);
  BasicTensor<T> d({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double t = double(x[i * c + k]) - double(y[j * c + k]);
        s += t * t;
      }
      d[i * n + j] = static_cast<T>(s);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Differentiable versions

template <typename T>
Var<T> gaussian_kernel(const Var<T>& x, const Var<T>& y, double sigma) {
  auto& g = detail::same_graph(x, y);
  gaussian_kernel(x.value(), y.value(), sigma);  // validates
  const auto ix = x.id(), iy = y.id();
  return g.record(
      "gaussian_kernel", {ix, iy},
      [=](const Graph<T>& gr) { return gaussian_kernel(gr.value(ix), gr.value(iy), sigma); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& xv = gr.value(ix);
        const auto& yv = gr.value(iy);
        const std::size_t m = xv.extent(0), q = yv.extent(0), c = xv.extent(1);
        const double inv = 1.0 / (2.0 * sigma * sigma);
        const double s2 = sigma * sigma;
        std::vector<double> dx(gr.requires_grad(ix) ? m * c : 0, 0.0);
        std::vector<double> dy(gr.requires_grad(iy) ? q * c : 0, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < q; ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
              const double d = double(xv[i * c + k]) - double(yv[j * c + k]);
              d2 += d * d;
            }
            const double w = double(go[i * q + j]) * std::exp(-d2 * inv) / s2;
            if (w == 0.0) continue;
            for (std::size_t k = 0; k < c; ++k) {
              const double d = double(xv[i * c + k]) - double(yv[j * c + k]);
              if (!dx.empty()) dx[i * c + k] -= w * d;
              if (!dy.empty()) dy[j * c + k] += w * d;
            }
          }
        }
        if (!dx.empty()) {
          auto& b = gr.grad_buffer(ix);
          for (std::size_t k = 0; k < dx.size(); ++k) b[k] = static_cast<T>(b[k] + dx[k]);
        }
        if (!dy.empty()) {
          auto& b = gr.grad_buffer(iy);
          for (std::size_t k = 0; k < dy.size(); ++k) b[k] = static_cast<T>(b[k] + dy[k]);
        }
      });
}

/// Inverse square root of the symmetric part of G. The backward pass uses
/// the divided-difference (Daleckii-Krein) form of the spectral derivative.
template <typename T>
Var<T> matrix_inv_sqrt(const Var<T>& g, std::size_t* clamped = nullptr) {
  const auto ig = g.id();
  if (clamped) matrix_inv_sqrt(g.value(), clamped);
  return g.graph().record(
      "matrix_inv_sqrt", {ig},
      [=](const Graph<T>& gr) { return matrix_inv_sqrt(gr.value(ig)); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto eig = symmetric_eigen(gr.value(ig));
        const auto p = static_cast<Eigen::Index>(eig.values.size());
        auto f = [](double l) { return 1.0 / std::sqrt(std::max(l, kEigenClamp)); };
        auto fp = [](double l) { return l > kEigenClamp ? -0.5 * std::pow(l, -1.5) : 0.0; };
        Eigen::MatrixXd lw(p, p);
        for (Eigen::Index i = 0; i < p; ++i) {
          for (Eigen::Index j = 0; j < p; ++j) {
            const double li = eig.raw_values(i), lj = eig.raw_values(j);
            const double gap = li - lj;
            if (std::abs(gap) <= 1e-10 * (1.0 + std::abs(li) + std::abs(lj))) {
              lw(i, j) = fp(0.5 * (li + lj));
            } else {
              lw(i, j) = (f(li) - f(lj)) / gap;
            }
          }
        }
        Eigen::MatrixXd gbar(p, p);
        for (Eigen::Index i = 0; i < p; ++i)
          for (Eigen::Index j = 0; j < p; ++j) gbar(i, j) = go[std::size_t(i * p + j)];
        const auto& q = eig.vectors;
        Eigen::MatrixXd inner = (q.transpose() * gbar * q).cwiseProduct(lw);
        Eigen::MatrixXd dg = q * inner * q.transpose();
        dg = (0.5 * (dg + dg.transpose())).eval();
        auto& b = gr.grad_buffer(ig);
        for (Eigen::Index i = 0; i < p; ++i)
          for (Eigen::Index j = 0; j < p; ++j)
            b[std::size_t(i * p + j)] = static_cast<T>(b[std::size_t(i * p + j)] + dg(i, j));
      });
}

template <typename T>
Var<T> squared_distances(const Var<T>& x, const Var<T>& y) {
  auto& g = detail::same_graph(x, y);
  squared_distances(x.value(), y.value());
  const auto ix = x.id(), iy = y.id();
  return g.record(
      "squared_distances", {ix, iy},
      [=](const Graph<T>& gr) { return squared_distances(gr.value(ix), gr.value(iy)); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& xv = gr.value(ix);
        const auto& yv = gr.value(iy);
        const std::size_t m = xv.extent(0), n = yv.extent(0), c = xv.extent(1);
        std::vector<double> dx(m * c, 0.0), dy(n * c, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double w = 2.0 * double(go[i * n + j]);
            for (std::size_t k = 0; k < c; ++k) {
              const double d = double(xv[i * c + k]) - double(yv[j * c + k]);
              dx[i * c + k] += w * d;
              dy[j * c + k] -= w * d;
            }
          }
        }
        if (gr.requires_grad(ix)) {
          auto& b = gr.grad_buffer(ix);
          for (std::size_t k = 0; k < dx.size(); ++k) b[k] = static_cast<T>(b[k] + dx[k]);
        }
        if (gr.requires_grad(iy)) {
          auto& b = gr.grad_buffer(iy);
          for (std::size_t k = 0; k < dy.size(); ++k) b[k] = static_cast<T>(b[k] + dy[k]);
        }
      });
}

/// Transport plan between uniform measures on the rows and columns of a
/// cost matrix. The executed iteration count (and domain choice) is frozen
/// at record time, so replays and gradients see one fixed computation.
template <typename T>
Var<T> sinkhorn_plan(const Var<T>& cost, const ot::SinkhornConfig& cfg,
                     OtemDiagnostics* diag = nullptr) {
  detail::require_matrix(cost.value(), "sinkhorn_plan", "cost");
  cfg.validate();
  struct State {
    std::optional<std::size_t> iterations;
    std::optional<bool> log_domain;
    ot::SinkhornTrace trace;
  };
  auto state = std::make_shared<State>();
  const auto ic = cost.id();
  auto to_dense = [](const BasicTensor<T>& t) {
    return ot::DenseMatrix(t.extent(0), t.extent(1),
                           std::vector<double>(t.data().begin(), t.data().end()));
  };
  auto fwd = [=](const Graph<T>& gr) {
    if (!gr.value(ic).all_finite()) {
      throw NumericalError("sinkhorn_plan: non-finite transport cost (features diverged)");
    }
    const auto c = to_dense(gr.value(ic));
    const auto a = ot::DiscreteMeasure::uniform(c.rows);
    const auto b = ot::DiscreteMeasure::uniform(c.cols);
    auto plan = ot::sinkhorn(a, b, c, cfg, &state->trace, state->iterations, state->log_domain);
    if (!state->iterations) {
      state->iterations = plan.iterations_used;
      state->log_domain = plan.log_domain_used;
      if (diag) {
        diag->sinkhorn_iterations = plan.iterations_used;
        diag->sinkhorn_converged = plan.converged();
        diag->marginal_violation = plan.marginal_violation;
        diag->log_domain = plan.log_domain_used;
      }
    }
    BasicTensor<T> out({c.rows, c.cols});
    for (std::size_t k = 0; k < out.numel(); ++k) out[k] = static_cast<T>(plan.plan.values[k]);
    if (!out.all_finite()) throw NumericalError("sinkhorn_plan: non-finite plan");
    return out;
  };
  return cost.graph().record(
      "sinkhorn_plan", {ic}, fwd, [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto c = to_dense(gr.value(ic));
        const auto a = ot::DiscreteMeasure::uniform(c.rows);
        const auto b = ot::DiscreteMeasure::uniform(c.cols);
        ot::DenseMatrix pg(c.rows, c.cols,
                           std::vector<double>(go.data().begin(), go.data().end()));
        const auto dc = ot::sinkhorn_cost_gradient(a, b, c, cfg.epsilon, state->trace, pg);
        auto& buf = gr.grad_buffer(ic);
        for (std::size_t k = 0; k < buf.numel(); ++k)
          buf[k] = static_cast<T>(buf[k] + dc.values[k]);
      });
}

/// Nystrom features psi(X) = k(X, w) k(w, w)^{-1/2}.
template <typename T>
Var<T> nystrom_embed(const Var<T>& x, const Var<T>& anchors, const KernelSpec& kernel,
                     OtemDiagnostics* diag = nullptr) {
  auto gram = gaussian_kernel(anchors, anchors, kernel.sigma);
  std::size_t clamped = 0;
  auto root = matrix_inv_sqrt(gram, &clamped);
  if (diag) diag->clamped_eigenvalues = clamped;
  return matmul(gaussian_kernel(x, anchors, kernel.sigma), root);
}

/// Embeds an m x C set into n x p, with p the anchor count and n the
/// reference count.
template <typename T>
Var<T> otem_embed(const Var<T>& features, const Var<T>& anchors, const Var<T>& references,
                  const KernelSpec& kernel, const ot::SinkhornConfig& sinkhorn,
                  OtemDiagnostics* diag = nullptr) {
  detail::require_matrix(features.value(), "otem_embed", "features");
  detail::require_matrix(anchors.value(), "otem_embed", "anchors");
  detail::require_matrix(references.value(), "otem_embed", "references");
  if (anchors.value().extent(1) != features.value().extent(1)) {
    throw ShapeError("otem_embed: anchors " + to_string(anchors.shape()) +
                     " do not match feature width " + to_string(features.shape()));
  }
  if (references.value().extent(1) != anchors.value().extent(0)) {
    throw ShapeError("otem_embed: references " + to_string(references.shape()) +
                     " must have one column per anchor");
  }
  const std::size_t n = references.value().extent(0);
  auto psi = nystrom_embed(features, anchors, kernel, diag);
  auto cost = squared_distances(psi, references);
  auto plan = sinkhorn_plan(cost, sinkhorn, diag);
  return scale(matmul(plan, psi, /*trans_a=*/true), std::sqrt(double(n)));
}

// ---------------------------------------------------------------------------
// Configuration and tensor-level entry points

/// Anchors w (p x C), references e (n x p), kernel and solver settings.
template <typename T>
struct BasicOtemConfig {
  KernelSpec kernel;
  BasicTensor<T> anchors;
  BasicTensor<T> references;
  ot::SinkhornConfig sinkhorn;

  void validate() const {
    kernel.validate();
    sinkhorn.validate();
    detail::require_matrix(anchors, "otem config", "anchors");
    detail::require_matrix(references, "otem config", "references");
    if (references.extent(1) != anchors.extent(0)) {
      throw ShapeError("otem config: references must be n x p with p = anchor count");
    }
    if (!anchors.all_finite() || !references.all_finite()) {
      throw ConfigError("otem config: anchors and references must be finite");
    }
  }
};

using OtemConfig = BasicOtemConfig<float>;

/// Smallest distance between two distinct rows.
template <typename T>
double min_pairwise_distance(const BasicTensor<T>& rows) {
  const auto d = squared_distances(rows, rows);
  const std::size_t n = rows.extent(0);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) best = std::min(best, double(d[i * n + j]));
  return std::sqrt(best);
}

/// Rows drawn from a unit Gaussian; redrawn until pairwise distinct.
template <typename T>
BasicTensor<T> gaussian_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int attempt = 0; attempt < 16; ++attempt) {
    BasicTensor<T> t({rows, cols});
    for (auto& v : t.storage()) v = static_cast<T>(nd(rng));
    if (rows < 2 || min_pairwise_distance(t) > kMinAnchorSeparation) return t;
  }
  throw NumericalError("gaussian_rows: could not draw distinct rows");
}

/// Median distance between the rows of `features` and the rows of `anchors`
/// (mean of the two middle values for an even count); 1 when there is
/// nothing to measure.
template <typename T>
double median_cross_distance(const BasicTensor<T>& features, const BasicTensor<T>& anchors) {
  if (features.empty() || anchors.empty()) return 1.0;
  const auto d = squared_distances(features, anchors);
  std::vector<double> v(d.data().begin(), d.data().end());
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double med = std::sqrt(std::max(0.0, *mid));
  if (v.size() % 2 == 0) {
    const double below = *std::max_element(v.begin(), mid);
    med = 0.5 * (med + std::sqrt(std::max(0.0, below)));
  }
  return med > 0.0 && std::isfinite(med) ? med : 1.0;
}

template <typename T>
BasicTensor<T> nystrom_embed(const BasicTensor<T>& x, const BasicTensor<T>& anchors,
                             const KernelSpec& kernel) {
  Graph<T> g;
  return nystrom_embed(g.constant(x), g.constant(anchors), kernel).value();
}

template <typename T>
BasicTensor<T> otem_embed(const BasicTensor<T>& features, const BasicOtemConfig<T>& cfg,
                          OtemDiagnostics* diag = nullptr) {
  cfg.validate();
  Graph<T> g;
  return otem_embed(g.constant(features), g.constant(cfg.anchors),
                    g.constant(cfg.references), cfg.kernel, cfg.sinkhorn, diag)
      .value();
}

}  // namespace otfpf
