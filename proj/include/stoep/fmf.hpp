#pragma once

// Filter-based mechanistic forecasting: adaptive quantile thresholds,
// small-parameter and low-infection detection, and beta suppression ahead of
// the metapopulation rollout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "stoep/autodiff.hpp"
#include "stoep/domain.hpp"
#include "stoep/metasir.hpp"

namespace stoep::fmf {

struct ThresholdConfig {
  double kappa_infected = 0.1;
  double kappa_ratio = 0.9;
  double kappa_beta = 0.2;
  double kappa_gamma = 0.2;
  double min_infected = 0.5;
  double min_ratio = 0.7;
  double min_beta = 2e-3;
  double min_gamma = 2e-3;
  double ratio_cap = 0.98;
  double ema_decay = 0.9;
  double psi = 0.5;

  void check() const {
    for (double k : {kappa_infected, kappa_ratio, kappa_beta, kappa_gamma})
      if (!(k > 0.0 && k < 1.0)) throw ConfigError("quantile ratios must lie in (0, 1)");
    if (!(psi > 0.0 && psi < 1.0)) throw ConfigError("psi must lie in (0, 1)");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  }

  friend bool operator==(const ThresholdConfig&, const ThresholdConfig&) = default;
};

enum class ThresholdKind : std::size_t { Infected = 0, Ratio = 1, Beta = 2, Gamma = 3 };

// One smoothed quantile per threshold kind; unset until the first training pass.
struct EmaState {
  std::array<std::optional<double>, 4> slots;

  std::optional<double>& operator[](ThresholdKind k) { return slots[static_cast<std::size_t>(k)]; }
  const std::optional<double>& operator[](ThresholdKind k) const { return slots[static_cast<std::size_t>(k)]; }
  friend bool operator==(const EmaState&, const EmaState&) = default;
};

// Linear interpolation between order statistics at 1-based rank 1 + (R - 1) * kappa.
inline double quantile(std::span<const double> values, double kappa) {
  if (values.empty()) throw std::invalid_argument("quantile: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = static_cast<double>(sorted.size() - 1) * kappa;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// max(q, floor) where q is the kappa-quantile of values. In training mode the
// slot is moved toward q by an EMA with decay eta and its value replaces q;
// outside training a set slot is used as-is and never modified.
inline double adaptive_threshold(std::span<const double> values, double kappa, double floor,
                                 std::optional<double>& slot, double eta, bool training) {
  if (values.empty()) throw std::invalid_argument("adaptive_threshold: empty input");
  if (!(kappa > 0.0 && kappa < 1.0)) throw std::invalid_argument("adaptive_threshold: kappa outside (0, 1)");
  double q = quantile(values, kappa);
  if (training) {
    slot = slot ? eta * *slot + (1.0 - eta) * q : q;
    q = *slot;
  } else if (slot) {
    q = *slot;
  }
  return std::max(q, floor);
}

// Stateless form: fresh quantile, no smoothing.
inline double adaptive_threshold(std::span<const double> values, double kappa, double floor) {
  std::optional<double> none;
  return adaptive_threshold(values, kappa, floor, none, 0.0, false);
}

struct SmallParamDetection {
  std::vector<bool> flags;
  std::vector<double> beta_max;
  std::vector<double> gamma_max;
  double beta_threshold = 0.0;
  double gamma_threshold = 0.0;
};

inline std::vector<double> row_max(const Tensor& m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    out[i] = m(i, 0);
    for (std::size_t j = 1; j < cols; ++j) out[i] = std::max(out[i], m(i, j));
  }
  return out;
}

inline SmallParamDetection detect_small_params(const EpidemicParams& params, const ThresholdConfig& cfg,
                                               EmaState& ema, bool training) {
  SmallParamDetection d;
  d.beta_max = row_max(params.beta);
  d.gamma_max = row_max(params.gamma);
  d.beta_threshold = adaptive_threshold(d.beta_max, cfg.kappa_beta, cfg.min_beta, ema[ThresholdKind::Beta],
                                        cfg.ema_decay, training);
  d.gamma_threshold = adaptive_threshold(d.gamma_max, cfg.kappa_gamma, cfg.min_gamma,
                                         ema[ThresholdKind::Gamma], cfg.ema_decay, training);
  d.flags.resize(d.beta_max.size());
  for (std::size_t n = 0; n < d.flags.size(); ++n)
    d.flags[n] = d.beta_max[n] <= d.beta_threshold && d.gamma_max[n] <= d.gamma_threshold;
  return d;
}

struct QuietDetection {
  std::vector<bool> flags;
  std::vector<double> zero_ratio;
  double infected_threshold = 0.0;
  double ratio_threshold = 0.0;
};

// infected is the [N, T_in] history of the infected compartment.
inline QuietDetection detect_low_infection(const Tensor& infected, const ThresholdConfig& cfg, EmaState& ema,
                                           bool training) {
  const std::size_t n = infected.dim(0), t = infected.dim(1);
  QuietDetection d;
  d.infected_threshold = adaptive_threshold(infected.values(), cfg.kappa_infected, cfg.min_infected,
                                            ema[ThresholdKind::Infected], cfg.ema_decay, training);
  d.zero_ratio.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t quiet_days = 0;
    for (std::size_t s = 0; s < t; ++s)
      if (infected(i, s) <= d.infected_threshold) ++quiet_days;
    d.zero_ratio[i] = static_cast<double>(quiet_days) / static_cast<double>(t);
  }
  const double ratio = adaptive_threshold(d.zero_ratio, cfg.kappa_ratio, cfg.min_ratio, ema[ThresholdKind::Ratio],
                                          cfg.ema_decay, training);
  d.ratio_threshold = std::min(ratio, cfg.ratio_cap);
  d.flags.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.flags[i] = d.zero_ratio[i] >= d.ratio_threshold;
  return d;
}

inline SuppressionFilter build_filter(std::vector<bool> small, std::vector<bool> quiet) {
  if (small.size() != quiet.size()) throw std::invalid_argument("build_filter: flag lengths differ");
  std::vector<bool> combined(small.size());
  for (std::size_t i = 0; i < small.size(); ++i) combined[i] = small[i] || quiet[i];
  return {std::move(small), std::move(quiet), std::move(combined)};
}

// Per-entry multiplier psi^{f_n} broadcast over the horizon.
inline Tensor suppression_scale(const SuppressionFilter& f, std::size_t horizon, double psi) {
  Tensor s({f.combined.size(), horizon}, 1.0);
  for (std::size_t n = 0; n < f.combined.size(); ++n)
    if (f.combined[n])
      for (std::size_t t = 0; t < horizon; ++t) s(n, t) = psi;
  return s;
}

inline ad::Var suppress_beta(const ad::Var& beta, const SuppressionFilter& f, double psi) {
  if (beta.shape()[0] != f.combined.size()) throw std::invalid_argument("suppress_beta: region count mismatch");
  return ad::mul_const(beta, suppression_scale(f, beta.shape()[1], psi));
}

inline Tensor suppress_beta(const Tensor& beta, const SuppressionFilter& f, double psi) {
  return suppress_beta(ad::Var::constant(beta), f, psi).value();
}

struct FilterResult {
  SuppressionFilter filter;
  SmallParamDetection small;
  QuietDetection quiet;
};

inline FilterResult detect(const EpidemicParams& params, const Tensor& infected_history, const ThresholdConfig& cfg,
                           EmaState& ema, bool training) {
  FilterResult r;
  r.small = detect_small_params(params, cfg, ema, training);
  r.quiet = detect_low_infection(infected_history, cfg, ema, training);
  r.filter = build_filter(r.small.flags, r.quiet.flags);
  return r;
}

struct ForecastResult {
  Forecast forecast;
  FilterResult detection;
  Tensor beta_hat;
};

// Detection, suppression, then the metapopulation rollout with (beta_hat, gamma).
inline ForecastResult forecast(const EpidemicParams& params, const Tensor& infected_history,
                               const metasir::CompartmentState& initial, const MobilitySeries& flows,
                               const PopulationVector& pop, const ThresholdConfig& cfg, EmaState& ema, bool training) {
  ForecastResult r;
  r.detection = detect(params, infected_history, cfg, ema, training);
  r.beta_hat = suppress_beta(params.beta, r.detection.filter, cfg.psi);
  r.forecast = metasir::rollout(initial, EpidemicParams{r.beta_hat, params.gamma}, flows, pop);
  return r;
}

}  // namespace stoep::fmf
