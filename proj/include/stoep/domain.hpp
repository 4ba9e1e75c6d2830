#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stoep/tensor.hpp"

namespace stoep {

// Channel order of an observation block. Channels at index >= 4 are optional
// and carried through as opaque numeric columns.
enum Channel : std::size_t { kCases = 0, kSusceptible = 1, kInfected = 2, kRecovered = 3 };
inline constexpr std::size_t kEssentialChannels = 4;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or inconsistent input data. The CLI maps these to exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Rule { DimensionMismatch, NegativeValue, NonFiniteValue, NonPositiveValue, OutOfRange, BadChannelCount };

inline const char* rule_name(Rule rule) {
  switch (rule) {
    case Rule::DimensionMismatch: return "dimension-mismatch";
    case Rule::NegativeValue: return "negative-value";
    case Rule::NonFiniteValue: return "non-finite-value";
    case Rule::NonPositiveValue: return "non-positive-value";
    case Rule::OutOfRange: return "out-of-range";
    case Rule::BadChannelCount: return "bad-channel-count";
  }
  return "unknown";
}

class ValidationError : public DataError {
 public:
  ValidationError(Rule rule, std::string field, std::vector<std::size_t> index, const std::string& detail)
      : DataError(format(rule, field, index, detail)),
        rule_(rule),
        field_(std::move(field)),
        index_(std::move(index)) {}

  Rule rule() const noexcept { return rule_; }
  const std::string& field() const noexcept { return field_; }
  const std::vector<std::size_t>& index() const noexcept { return index_; }

 private:
  static std::string format(Rule rule, const std::string& field, const std::vector<std::size_t>& index,
                            const std::string& detail) {
    std::string msg = std::string(rule_name(rule)) + " in " + field;
    if (!index.empty()) {
      msg += " at (";
      for (std::size_t i = 0; i < index.size(); ++i) msg += (i ? "," : "") + std::to_string(index[i]);
      msg += ")";
    }
    if (!detail.empty()) msg += ": " + detail;
    return msg;
  }

  Rule rule_;
  std::string field_;
  std::vector<std::size_t> index_;
};

// Per-region observations over a window, [N, T, C] region-major.
struct ObservationHistory {
  Tensor values;

  std::size_t regions() const { return values.dim(0); }
  std::size_t steps() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
  double at(std::size_t n, std::size_t t, std::size_t c) const { return values(n, t, c); }

  // One channel as an [N, T] matrix.
  Tensor channel(std::size_t c) const {
    Tensor out({regions(), steps()});
    for (std::size_t n = 0; n < regions(); ++n)
      for (std::size_t t = 0; t < steps(); ++t) out(n, t) = values(n, t, c);
    return out;
  }
};

enum class HorizonKind { History, Forecast };

// Origin-destination flows [N, N, T], trips per day.
struct MobilitySeries {
  Tensor flows;
  HorizonKind kind = HorizonKind::History;

  std::size_t regions() const { return flows.dim(0); }
  std::size_t steps() const { return flows.dim(2); }

  // The N x N flow matrix of one day, row-major.
  std::vector<double> day(std::size_t t) const {
    const std::size_t n = regions();
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = flows(i, j, t);
    return out;
  }
};

struct PopulationVector {
  std::vector<double> sizes;
  std::size_t regions() const { return sizes.size(); }
};

// Infection and recovery rates, each [N, T_out] with entries in (0, 1).
struct EpidemicParams {
  Tensor beta;
  Tensor gamma;
};

struct AdjacencyMatrix {
  Tensor weights;
  bool normalized = false;
};

// Predicted daily cases and compartment trajectories, each [N, T_out].
struct Forecast {
  Tensor cases;
  Tensor susceptible;
  Tensor infected;
  Tensor recovered;
};

struct SuppressionFilter {
  std::vector<bool> small;
  std::vector<bool> quiet;
  std::vector<bool> combined;
};

namespace detail {

inline void check_finite_range(const Tensor& t, const std::string& field, std::size_t begin_channel,
                               std::size_t end_channel, bool require_nonnegative) {
  const Shape& s = t.shape();
  const std::size_t c = s.size() == 3 ? s[2] : 1;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::size_t ch = i % c;
    if (ch < begin_channel || ch >= end_channel) continue;
    std::vector<std::size_t> idx(s.size());
    std::size_t rem = i;
    for (std::size_t d = s.size(); d-- > 0;) {
      idx[d] = rem % s[d];
      rem /= s[d];
    }
    if (!std::isfinite(t[i])) throw ValidationError(Rule::NonFiniteValue, field, idx, "");
    if (require_nonnegative && t[i] < 0.0)
      throw ValidationError(Rule::NegativeValue, field, idx, "value " + std::to_string(t[i]));
  }
}

}  // namespace detail

inline void validate(const ObservationHistory& obs) {
  const Shape& s = obs.values.shape();
  if (s.size() != 3) throw ValidationError(Rule::DimensionMismatch, "observations", {}, "expected [N, T, C]");
  if (s[2] < kEssentialChannels)
    throw ValidationError(Rule::BadChannelCount, "observations", {}, "need at least 4 channels, got " +
                                                                         std::to_string(s[2]));
  static const char* names[] = {"cases", "susceptible", "infected", "recovered"};
  for (std::size_t c = 0; c < kEssentialChannels; ++c)
    detail::check_finite_range(obs.values, names[c], c, c + 1, true);
  detail::check_finite_range(obs.values, "optional_channels", kEssentialChannels, s[2], false);
}

inline void validate(const MobilitySeries& mob) {
  const Shape& s = mob.flows.shape();
  if (s.size() != 3 || s[0] != s[1])
    throw ValidationError(Rule::DimensionMismatch, "mobility", {}, "expected square [N, N, T], got " +
                                                                       shape_string(s));
  detail::check_finite_range(mob.flows, "mobility", 0, s[2], true);
}

inline void validate(const PopulationVector& pop) {
  for (std::size_t i = 0; i < pop.sizes.size(); ++i) {
    if (!std::isfinite(pop.sizes[i])) throw ValidationError(Rule::NonFiniteValue, "population", {i}, "");
    if (pop.sizes[i] <= 0.0)
      throw ValidationError(Rule::NonPositiveValue, "population", {i}, "value " + std::to_string(pop.sizes[i]));
  }
}

inline void validate(const AdjacencyMatrix& adj) {
  const Shape& s = adj.weights.shape();
  if (s.size() != 2 || s[0] != s[1])
    throw ValidationError(Rule::DimensionMismatch, "adjacency", {}, shape_string(s));
  detail::check_finite_range(adj.weights, "adjacency", 0, 1, adj.normalized);
  if (!adj.normalized) return;
  for (std::size_t i = 0; i < s[0]; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < s[1]; ++j) row += adj.weights(i, j);
    if (std::fabs(row - 1.0) > 1e-9)
      throw ValidationError(Rule::OutOfRange, "adjacency", {i}, "row sums to " + std::to_string(row));
  }
}

struct ValidatedBundle {
  ObservationHistory observations;
  MobilitySeries mobility;
  PopulationVector population;
};

// Checks every invariant of an observation/mobility/population triple and
// returns it unchanged. History-kind mobility must span the observation window.
inline ValidatedBundle validate(ObservationHistory obs, MobilitySeries mob, PopulationVector pop) {
  validate(obs);
  validate(mob);
  validate(pop);
  const std::size_t n = obs.regions();
  if (mob.regions() != n)
    throw ValidationError(Rule::DimensionMismatch, "mobility", {}, "N=" + std::to_string(mob.regions()) +
                                                                       " but observations have N=" + std::to_string(n));
  if (pop.regions() != n)
    throw ValidationError(Rule::DimensionMismatch, "population", {}, "N=" + std::to_string(pop.regions()) +
                                                                         " but observations have N=" + std::to_string(n));
  if (mob.kind == HorizonKind::History && mob.steps() != obs.steps())
    throw ValidationError(Rule::DimensionMismatch, "mobility", {}, "T=" + std::to_string(mob.steps()) +
                                                                       " but observations have T=" + std::to_string(obs.steps()));
  return {std::move(obs), std::move(mob), std::move(pop)};
}

inline void validate(const EpidemicParams& params) {
  if (params.beta.shape() != params.gamma.shape() || params.beta.rank() != 2)
    throw ValidationError(Rule::DimensionMismatch, "params", {}, "beta and gamma must share an [N, T] shape");
  for (const auto* t : {&params.beta, &params.gamma}) {
    const char* field = t == &params.beta ? "beta" : "gamma";
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double v = (*t)[i];
      if (!std::isfinite(v)) throw ValidationError(Rule::NonFiniteValue, field, {i}, "");
      if (v < 0.0 || v > 1.0) throw ValidationError(Rule::OutOfRange, field, {i}, "outside [0, 1]");
    }
  }
}

}  // namespace stoep
