#pragma once

// Case-aware adjacency learning: forecast mobility, pool it into a mobility
// adjacency, and add a residual derived from attention over a bank of
// learnable case-trajectory patterns.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "stoep/autodiff.hpp"
#include "stoep/domain.hpp"
#include "stoep/random.hpp"

namespace stoep::cal {

struct CalConfig {
  std::size_t regions = 0;
  std::size_t t_in = 14;
  std::size_t t_out = 14;
  std::size_t recent_window = 7;  // S
  std::size_t pattern_count = 9;
  std::size_t key_dim = 16;
  std::size_t embed_dim = 16;

  void check() const {
    if (recent_window < 2 || recent_window > t_in) throw ConfigError("cal: recent_window must lie in [2, t_in]");
    if (pattern_count < 1) throw ConfigError("cal: pattern_count must be >= 1");
    if (key_dim == 0 || embed_dim == 0) throw ConfigError("cal: dimensions must be positive");
  }
};

// Linear history-to-horizon map applied to every origin-destination series.
struct MobilityForecaster {
  ad::Var weight;  // [T_in, T_out]

  // Starts as the history mean repeated over the horizon.
  static MobilityForecaster init(std::size_t t_in, std::size_t t_out) {
    return {ad::Var::parameter(Tensor({t_in, t_out}, 1.0 / static_cast<double>(t_in)))};
  }
};

struct PatternMemory {
  ad::Var patterns;    // [P, S]
  ad::Var key_w;       // [S, d]
  ad::Var key_b;       // [d]
  ad::Var value_w;     // [S, d]
  ad::Var value_b;     // [d]
  ad::Var out_w;       // [d, d_A]
  ad::Var out_b;       // [d_A]
  ad::Var embeddings;  // [N, d_A]
  ad::Var scale;       // [1], starts at 0 so the residual is inert

  static PatternMemory init(const CalConfig& cfg, Rng& rng) {
    const std::size_t s = cfg.recent_window, d = cfg.key_dim, da = cfg.embed_dim;
    PatternMemory m;
    m.patterns = ad::Var::parameter(normal_tensor({cfg.pattern_count, s}, 1.0, rng));
    m.key_w = ad::Var::parameter(xavier(s, d, rng));
    m.key_b = ad::Var::parameter(Tensor({d}));
    m.value_w = ad::Var::parameter(xavier(s, d, rng));
    m.value_b = ad::Var::parameter(Tensor({d}));
    m.out_w = ad::Var::parameter(xavier(d, da, rng));
    m.out_b = ad::Var::parameter(Tensor({da}));
    m.embeddings = ad::Var::parameter(normal_tensor({cfg.regions, da}, 1.0 / std::sqrt(static_cast<double>(da)), rng));
    m.scale = ad::Var::parameter(Tensor({1}, 0.0));
    return m;
  }
};

// history [N, N, T_in] -> H [N, N, T_out], clamped at zero.
inline ad::Var forecast_mobility(const ad::Var& history, const MobilityForecaster& f) {
  const Shape& s = history.shape();
  const std::size_t t_in = f.weight.shape()[0], t_out = f.weight.shape()[1];
  if (s.size() != 3 || s[0] != s[1] || s[2] != t_in)
    throw std::invalid_argument("forecast_mobility: history " + shape_string(s) + " does not match a " +
                                std::to_string(t_in) + "-day transform");
  ad::Var series = ad::reshape(history, {s[0] * s[1], t_in});
  return ad::reshape(ad::relu(ad::linear(series, f.weight)), {s[0], s[1], t_out});
}

inline MobilitySeries forecast_mobility(const MobilitySeries& history, const MobilityForecaster& f) {
  if (history.kind != HorizonKind::History) throw std::invalid_argument("forecast_mobility: expects history mobility");
  return {forecast_mobility(ad::Var::constant(history.flows), f).value(), HorizonKind::Forecast};
}

// Mean over the forecast horizon: [N, N, T_out] -> [N, N].
inline ad::Var pool_mobility(const ad::Var& forecast) { return ad::mean_last(forecast); }

inline AdjacencyMatrix pool_mobility(const MobilitySeries& forecast) {
  if (forecast.kind != HorizonKind::Forecast) throw std::invalid_argument("pool_mobility: expects forecast mobility");
  return {pool_mobility(ad::Var::constant(forecast.flows)).value(), false};
}

// z-score with population standard deviation; constant input maps to zeros.
inline std::vector<double> extract_pattern(std::span<const double> series) {
  if (series.size() < 2) throw std::invalid_argument("extract_pattern: need at least 2 days");
  const double n = static_cast<double>(series.size());
  double mean = 0.0;
  for (double v : series) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : series) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) out[i] = (series[i] - mean) / (sd + 1e-8);
  return out;
}

// Last `window` days of each row of cases [N, T] as normalized patterns [N, window].
inline Tensor recent_patterns(const Tensor& cases, std::size_t window) {
  const std::size_t n = cases.dim(0), t = cases.dim(1);
  if (window > t) throw std::invalid_argument("recent_patterns: window longer than history");
  Tensor out({n, window});
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> row(cases.data() + i * t + (t - window), window);
    auto p = extract_pattern(row);
    for (std::size_t j = 0; j < window; ++j) out(i, j) = p[j];
  }
  return out;
}

struct Retrieval {
  ad::Var weights;         // [N, P], rows are distributions over patterns
  ad::Var representation;  // [N, d_A]
};

inline Retrieval retrieve_representation(const ad::Var& patterns, const PatternMemory& mem) {
  if (patterns.shape().size() != 2 || patterns.shape()[1] != mem.patterns.shape()[1])
    throw std::invalid_argument("retrieve_representation: pattern length mismatch");
  const double d = static_cast<double>(mem.key_w.shape()[1]);
  ad::Var query = ad::linear(patterns, mem.key_w, mem.key_b);
  ad::Var keys = ad::linear(mem.patterns, mem.key_w, mem.key_b);
  ad::Var values = ad::linear(mem.patterns, mem.value_w, mem.value_b);
  ad::Var weights = ad::softmax_rows(ad::scale(ad::matmul(query, ad::transpose(keys)), 1.0 / std::sqrt(d)));
  return {weights, ad::linear(ad::matmul(weights, values), mem.out_w, mem.out_b)};
}

// Delta G [n, m] = alpha * <r_n, e_m>.
inline ad::Var case_adjacency(const ad::Var& representation, const PatternMemory& mem) {
  if (representation.shape().size() != 2 || representation.shape()[1] != mem.embeddings.shape()[1] ||
      representation.shape()[0] != mem.embeddings.shape()[0])
    throw std::invalid_argument("case_adjacency: representations " + shape_string(representation.shape()) +
                                " do not match embeddings " + shape_string(mem.embeddings.shape()));
  return ad::scale_by(ad::matmul(representation, ad::transpose(mem.embeddings)), mem.scale);
}

// A = A_m + Delta G, left unclamped.
inline ad::Var compose_adjacency(const ad::Var& mobility_adjacency, const ad::Var& delta) {
  return ad::add(mobility_adjacency, delta);
}

struct CalOutput {
  ad::Var forecast_flows;  // H [N, N, T_out]
  ad::Var mobility_adjacency;
  ad::Var case_adjacency;
  ad::Var adjacency;
  Retrieval retrieval;
};

// history flows [N, N, T_in] and raw cases [N, T_in] to the case-aware adjacency.
inline CalOutput run(const ad::Var& history_flows, const Tensor& cases, const MobilityForecaster& forecaster,
                     const PatternMemory& mem) {
  CalOutput out;
  out.forecast_flows = forecast_mobility(history_flows, forecaster);
  out.mobility_adjacency = pool_mobility(out.forecast_flows);
  out.retrieval = retrieve_representation(
      ad::Var::constant(recent_patterns(cases, mem.patterns.shape()[1])), mem);
  out.case_adjacency = case_adjacency(out.retrieval.representation, mem);
  out.adjacency = compose_adjacency(out.mobility_adjacency, out.case_adjacency);
  return out;
}

}  // namespace stoep::cal
