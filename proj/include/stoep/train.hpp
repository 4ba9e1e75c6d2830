#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stoep/autodiff.hpp"
#include "stoep/checkpoint.hpp"
#include "stoep/data.hpp"
#include "stoep/model.hpp"
#include "stoep/optim.hpp"
#include "stoep/random.hpp"

namespace stoep {

class NumericError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 1e-8;
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  std::size_t curriculum_step = 300;  // E_step, training iterations per horizon increment
  std::uint64_t seed = 1;

  void check() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (patience >= max_epochs) throw ConfigError("train: patience must be smaller than max_epochs");
    if (curriculum_step == 0) throw ConfigError("train: curriculum_step must be >= 1");
    if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0))
      throw ConfigError("train: learning_rate and weight_decay must be non-negative");
  }

  AdamWConfig optimizer() const {
    AdamWConfig c;
    c.learning_rate = learning_rate;
    c.weight_decay = weight_decay;
    return c;
  }
};

inline ad::Var mae_loss(const ad::Var& pred, const Tensor& truth) { return ad::mean_abs_error(pred, truth); }

inline double mae_loss(const Tensor& pred, const Tensor& truth) {
  return mae_loss(ad::Var::constant(pred), truth).item();
}

// floor(counter / E_step) + 1, capped at T_out.
inline std::size_t curriculum_horizon(std::size_t counter, std::size_t step, std::size_t t_out) {
  return std::min(counter / step + 1, t_out);
}

inline Tensor leading_columns(const Tensor& m, std::size_t count) {
  Tensor out({m.dim(0), count});
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, j);
  return out;
}

struct TrainState {
  std::size_t iteration = 0;  // curriculum counter
  Rng rng{1};
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  std::size_t horizon = 0;  // curriculum horizon at the end of the epoch
  double seconds = 0.0;
};

namespace detail {

inline std::string group_norms(StoepModel& model) {
  std::map<std::string, double> norms;
  for (auto& p : model.parameters()) {
    double s = 0.0;
    for (double v : p.var.value().values()) s += v * v;
    norms[p.group] += s;
  }
  std::ostringstream out;
  for (const auto& [g, s] : norms) out << "\n  " << g << ": |theta| = " << std::sqrt(s);
  return out.str();
}

}  // namespace detail

// One shuffled pass over the training windows. Each batch averages the MAE
// over the curriculum-truncated horizon, then takes one optimizer step.
inline double train_epoch(StoepModel& model, const data::WindowSet& windows, AdamW& optimizer, TrainState& state,
                          const TrainConfig& cfg) {
  if (windows.windows.empty()) throw DataError("train_epoch: no training windows");
  std::vector<std::size_t> order(windows.windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), state.rng);

  const std::size_t t_out = model.config().t_out;
  double total = 0.0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
    const std::size_t end = std::min(start + cfg.batch_size, order.size());
    const std::size_t horizon = curriculum_horizon(state.iteration, cfg.curriculum_step, t_out);
    const double weight = 1.0 / static_cast<double>(end - start);
    optimizer.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t k = start; k < end; ++k) {
      const data::Window& w = windows.windows[order[k]];
      ForwardResult r = model.forward(w, windows.population, {.training = true});
      ad::Var loss = mae_loss(ad::slice_cols(r.cases(), 0, horizon), leading_columns(w.target, horizon));
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite loss in batch " + std::to_string(batch_index) + " (window ending " +
                           w.last_date + ", horizon " + std::to_string(horizon) + ")" + detail::group_norms(model));
      batch_loss += loss.item() * weight;
      ad::backward(ad::scale(loss, weight));
    }
    optimizer.step();
    model.project();
    ++state.iteration;
    total += batch_loss * static_cast<double>(end - start);
  }
  return total / static_cast<double>(order.size());
}

// Mean full-horizon MAE without touching the smoothed thresholds.
inline double evaluate_loss(StoepModel& model, const data::WindowSet& windows) {
  if (windows.windows.empty()) throw DataError("evaluate_loss: no windows");
  ad::NoGradGuard guard;
  double total = 0.0;
  for (const auto& w : windows.windows)
    total += mae_loss(model.forward(w, windows.population).cases().value(), w.target);
  return total / static_cast<double>(windows.windows.size());
}

struct FitResult {
  Checkpoint best;
  std::vector<EpochStats> history;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Trains until max_epochs or until validation MAE has not improved for
// `patience` consecutive epochs; returns the best-validation checkpoint.
inline FitResult fit(StoepModel& model, const data::WindowSet& train, const data::WindowSet& validation,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.check();
  if (train.windows.empty() || validation.windows.empty()) throw DataError("fit: empty train or validation windows");
  std::vector<ad::Var> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  AdamW optimizer(params, cfg.optimizer());
  TrainState state{0, Rng(cfg.seed)};

  FitResult result;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = train_epoch(model, train, optimizer, state, cfg);
    stats.validation_loss = evaluate_loss(model, validation);
    stats.horizon = curriculum_horizon(state.iteration, cfg.curriculum_step, model.config().t_out);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (stats.validation_loss < best) {
      best = stats.validation_loss;
      since_best = 0;
      result.best = snapshot(model, epoch, best);
    } else if (++since_best > cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  if (result.best.groups.empty()) throw NumericError("fit: validation loss never became finite");
  return result;
}

// ----------------------------------------------------------- gradient check

struct GradCheckConfig {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples_per_group = 50;
  double denominator_floor = 1e-6;
  std::uint64_t seed = 11;
};

struct GroupCheck {
  std::string group;
  std::size_t scalars = 0;  // size of the group
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double loss = 0.0;
  bool passed() const {
    return std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed; });
  }
};

// Relative error |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

// Compares reverse-mode gradients of the full-horizon MAE, divided by
// `loss_scale`, against central differences. Suppression flags are computed
// once and held fixed; thresholds are not updated.
inline GradCheckReport gradient_check(StoepModel& model, const data::Window& window, const PopulationVector& pop,
                                      double loss_scale = 1.0, const GradCheckConfig& cfg = {}) {
  SuppressionFilter flags;
  {
    ad::NoGradGuard guard;
    flags = model.forward(window, pop).filter();
  }
  const ForwardOptions frozen{.training = false, .frozen_filter = &flags};
  auto loss_value = [&] {
    ad::NoGradGuard guard;
    return mae_loss(model.forward(window, pop, frozen).cases().value(), window.target) / loss_scale;
  };

  GradCheckReport report;
  model.zero_grad();
  ad::Var loss = ad::scale(mae_loss(model.forward(window, pop, frozen).cases(), window.target), 1.0 / loss_scale);
  report.loss = loss.item();
  ad::backward(loss);

  auto params = model.parameters();
  std::vector<std::string> group_order;
  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> members;  // (param, element)
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!members.count(params[p].group)) group_order.push_back(params[p].group);
    for (std::size_t e = 0; e < params[p].var.size(); ++e) members[params[p].group].emplace_back(p, e);
  }

  Rng rng(cfg.seed);
  for (const auto& g : group_order) {
    auto items = members[g];
    GroupCheck check{g, items.size()};
    if (items.size() > cfg.samples_per_group) {
      std::shuffle(items.begin(), items.end(), rng);
      items.resize(cfg.samples_per_group);
    }
    for (auto [p, e] : items) {
      Tensor& theta = params[p].var.mutable_value();
      const double analytic = params[p].var.grad()[e];
      const double original = theta[e];
      theta[e] = original + cfg.step;
      const double up = loss_value();
      theta[e] = original - cfg.step;
      const double down = loss_value();
      theta[e] = original;
      const double numeric = (up - down) / (2.0 * cfg.step);
      check.max_relative_error =
          std::max(check.max_relative_error, relative_error(analytic, numeric, cfg.denominator_floor));
      check.max_abs_gradient = std::max(check.max_abs_gradient, std::fabs(analytic));
      ++check.checked;
    }
    check.passed = check.max_relative_error < cfg.tolerance;
    report.groups.push_back(check);
  }
  model.zero_grad();
  return report;
}

}  // namespace stoep
