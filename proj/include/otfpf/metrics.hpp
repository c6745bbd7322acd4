#pragma once

// Regression metrics: mean absolute error, Pearson and Spearman correlation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "otfpf/tensor.hpp"

namespace otfpf {

struct MetricsReport {
  double mae = 0.0;
  /// Empty when either vector has zero variance or n < 2.
  std::optional<double> pcc;
  std::optional<double> srcc;
  std::size_t n = 0;
  /// prediction - age, per sample.
  std::vector<double> residuals;
};

/// Population-moment Pearson correlation; empty on zero variance.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / double(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / double(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

inline MetricsReport compute_metrics(const std::vector<double>& preds,
                                     const std::vector<double>& ages) {
  if (preds.size() != ages.size()) {
    throw ShapeError("compute_metrics: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(ages.size()) + " ages");
  }
  if (preds.empty()) throw DataError("compute_metrics: no samples");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!std::isfinite(preds[i]) || !std::isfinite(ages[i])) {
      throw NumericalError("compute_metrics: non-finite value at index " + std::to_string(i));
    }
  }
  MetricsReport m;
  m.n = preds.size();
  m.residuals.resize(m.n);
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < m.n; ++i) {
    m.residuals[i] = preds[i] - ages[i];
    abs_sum += std::abs(m.residuals[i]);
  }
  m.mae = abs_sum / double(m.n);
  m.pcc = pearson(preds, ages);
  m.srcc = pearson(average_ranks(preds), average_ranks(ages));
  return m;
}

inline nlohmann::json to_json(const MetricsReport& m) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json("undefined");
  };
  return {{"mae", m.mae},
          {"pcc", opt(m.pcc)},
          {"srcc", opt(m.srcc)},
          {"n", m.n},
          {"residuals", m.residuals}};
}

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace otfpf
