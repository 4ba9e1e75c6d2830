#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stoep/data.hpp"
#include "stoep/domain.hpp"

namespace stoep::eval {

struct Metrics {
  double rmse = 0.0;
  double mae = 0.0;
  double smape = 0.0;
  double rae = 0.0;
  bool rae_undefined = false;  // truth constant over the slice
  std::size_t count = 0;
};

// Errors over aligned (prediction, truth) pairs.
inline Metrics metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("metrics: " + std::to_string(pred.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " targets");
  if (pred.empty()) throw std::invalid_argument("metrics: empty slice");
  const double n = static_cast<double>(pred.size());
  double sq = 0.0, abs = 0.0, smape = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    sq += e * e;
    abs += std::fabs(e);
    const double denom = std::fabs(truth[i]) + std::fabs(pred[i]);
    if (denom > 0.0) smape += 200.0 * std::fabs(e) / denom;
    mean += truth[i];
  }
  mean /= n;
  double spread = 0.0;
  for (double y : truth) spread += std::fabs(y - mean);

  Metrics m;
  m.count = pred.size();
  m.rmse = std::sqrt(sq / n);
  m.mae = abs / n;
  m.smape = smape / n;
  if (spread > 0.0) {
    m.rae = abs / spread;
  } else {
    m.rae = std::numeric_limits<double>::quiet_NaN();
    m.rae_undefined = true;
  }
  return m;
}

// Predictions and truths for a set of windows, each [N, T_out].
struct PredictionSet {
  std::vector<Tensor> pred;
  std::vector<Tensor> truth;
};

// All (window, region) pairs at 1-based horizon indices [first, last].
inline Metrics metrics(const PredictionSet& set, std::size_t first, std::size_t last) {
  if (set.pred.size() != set.truth.size()) throw std::invalid_argument("metrics: window counts differ");
  std::vector<double> p, y;
  for (std::size_t w = 0; w < set.pred.size(); ++w) {
    const Tensor& a = set.pred[w];
    const Tensor& b = set.truth[w];
    if (a.shape() != b.shape() || a.rank() != 2)
      throw std::invalid_argument("metrics: prediction " + shape_string(a.shape()) + " vs truth " +
                                  shape_string(b.shape()));
    if (first < 1 || last > a.dim(1) || first > last)
      throw std::invalid_argument("metrics: horizon " + std::to_string(last) + " exceeds T_out=" +
                                  std::to_string(a.dim(1)));
    for (std::size_t n = 0; n < a.dim(0); ++n)
      for (std::size_t t = first - 1; t < last; ++t) {
        p.push_back(a(n, t));
        y.push_back(b(n, t));
      }
  }
  return metrics(p, y);
}

struct HorizonRow {
  std::string label;
  Metrics metrics;
};

// Single-index rows at 3, 7 and 14 days ahead plus an "overall" row over all indices.
inline std::vector<HorizonRow> horizon_report(const PredictionSet& set, const std::vector<std::size_t>& horizons = {3, 7, 14}) {
  if (set.pred.empty()) throw std::invalid_argument("horizon_report: no windows");
  const std::size_t t_out = set.pred.front().dim(1);
  std::vector<HorizonRow> rows;
  for (std::size_t h : horizons) {
    if (h > t_out)
      throw std::invalid_argument("horizon_report: horizon " + std::to_string(h) + " exceeds T_out=" +
                                  std::to_string(t_out));
    rows.push_back({std::to_string(h) + "d", metrics(set, h, h)});
  }
  rows.push_back({"overall", metrics(set, 1, t_out)});
  return rows;
}

inline const HorizonRow& row(const std::vector<HorizonRow>& rows, const std::string& label) {
  for (const auto& r : rows)
    if (r.label == label) return r;
  throw std::invalid_argument("horizon_report: no row '" + label + "'");
}

// Repeats the last observed cases over the horizon: [N, T_out].
inline Tensor persistence_baseline(const data::Window& w, std::size_t t_out) {
  const std::size_t n = w.observations.dim(0), last = w.observations.dim(1) - 1;
  Tensor out({n, t_out});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < t_out; ++t) out(i, t) = w.observations(i, last, kCases);
  return out;
}

inline PredictionSet persistence_predictions(const data::WindowSet& set) {
  PredictionSet out;
  for (const auto& w : set.windows) {
    out.pred.push_back(persistence_baseline(w, set.t_out));
    out.truth.push_back(w.target);
  }
  return out;
}

namespace detail {
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}
}  // namespace detail

inline void write_csv(std::ostream& out, const std::vector<std::pair<std::string, std::vector<HorizonRow>>>& reports) {
  out << "model,horizon,rmse,mae,smape,rae,rae_undefined\n";
  for (const auto& [model, rows] : reports)
    for (const auto& r : rows)
      out << model << ',' << r.label << ',' << detail::num(r.metrics.rmse) << ',' << detail::num(r.metrics.mae) << ','
          << detail::num(r.metrics.smape) << ',' << detail::num(r.metrics.rae) << ','
          << (r.metrics.rae_undefined ? 1 : 0) << '\n';
}

inline void write_table(std::ostream& out, const std::vector<std::pair<std::string, std::vector<HorizonRow>>>& reports) {
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %-8s %12s %12s %10s %8s\n", "model", "horizon", "RMSE", "MAE", "SMAPE", "RAE");
  out << line;
  for (const auto& [model, rows] : reports)
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-12s %-8s %12.4f %12.4f %10.3f %8s\n", model.c_str(), r.label.c_str(),
                    r.metrics.rmse, r.metrics.mae, r.metrics.smape,
                    r.metrics.rae_undefined ? "undef" : detail::num(r.metrics.rae).c_str());
      out << line;
    }
}

}  // namespace stoep::eval
