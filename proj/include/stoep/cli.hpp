#pragma once

// Subcommand bodies shared by the command-line tool and the test suites.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>

#include "stoep/checkpoint.hpp"
#include "stoep/config.hpp"
#include "stoep/data.hpp"
#include "stoep/eval.hpp"
#include "stoep/model.hpp"
#include "stoep/train.hpp"

namespace stoep::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kVerificationFailed = 3 };

namespace fs = std::filesystem;

inline void write_parameters(const data::SyntheticData& sim, const fs::path& path) {
  std::ofstream out(path);
  out << "date,region,beta,gamma\n";
  const auto& ds = sim.dataset;
  for (std::size_t t = 0; t < ds.days(); ++t)
    for (std::size_t r = 0; r < ds.regions(); ++r)
      out << ds.dates[t] << ',' << ds.region_names[r] << ',' << data::detail::format_double(sim.beta(r, t)) << ','
          << data::detail::format_double(sim.gamma(r, t)) << '\n';
}

// Writes observations/mobility/population CSVs plus the true parameters.
inline int simulate(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const data::SyntheticData sim = data::generate_synthetic(cfg.synthetic);
  data::save_dataset(sim.dataset, out_dir);
  write_parameters(sim, out_dir / "parameters.csv");
  log << "simulated " << sim.dataset.regions() << " regions x " << sim.dataset.days() << " days ("
      << sim.dataset.dates.front() << " .. " << sim.dataset.dates.back() << ") into " << out_dir.string() << '\n';
  return kOk;
}

struct TrainOutcome {
  FitResult fit;
  double persistence_validation_mae = 0.0;
};

inline StoepModel make_model(const RunConfig& cfg, const data::Dataset& ds) {
  ModelConfig m = cfg.model;
  m.regions = ds.regions();
  m.channels = ds.channels();
  return StoepModel(m, cfg.thresholds);
}

inline double persistence_mae(const data::WindowSet& set) {
  double total = 0.0;
  for (const auto& w : set.windows) total += mae_loss(eval::persistence_baseline(w, set.t_out), w.target);
  return total / static_cast<double>(set.windows.size());
}

inline TrainOutcome train(const RunConfig& cfg, const data::Dataset& ds, std::ostream& log) {
  const data::Split split = data::chronological_split(ds);
  StoepModel model = make_model(cfg, ds);
  model.scaler = FeatureScaler::fit(split.train.observations);
  const auto t_in = model.config().t_in, t_out = model.config().t_out;
  const data::WindowSet train_set = data::windowize(split.train, t_in, t_out);
  const data::WindowSet val_set = data::windowize(split.validation, t_in, t_out);
  log << "train: " << train_set.windows.size() << " windows, validation: " << val_set.windows.size()
      << " windows, " << model.parameters().size() << " parameter tensors\n";

  TrainOutcome out;
  out.persistence_validation_mae = persistence_mae(val_set);
  out.fit = fit(model, train_set, val_set, cfg.train, [&](const EpochStats& s) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %4zu  train MAE %12.4f  val MAE %12.4f  horizon %2zu  %.2fs\n", s.epoch,
                  s.train_loss, s.validation_loss, s.horizon, s.seconds);
    log << line << std::flush;
  });
  log << "best epoch " << out.fit.best.epoch << " validation MAE " << out.fit.best.validation_loss
      << " (persistence " << out.persistence_validation_mae << ")" << (out.fit.stopped_early ? ", stopped early" : "")
      << '\n';
  return out;
}

inline int train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& ckpt, std::ostream& log) {
  const TrainOutcome out = train(cfg, data::load_dataset(data_dir), log);
  save_checkpoint(out.fit.best, ckpt);
  log << "checkpoint written to " << ckpt.string() << '\n';
  return kOk;
}

inline void check_compatible(const StoepModel& model, const data::Dataset& ds) {
  if (model.config().regions != ds.regions())
    throw ValidationError(Rule::DimensionMismatch, "regions", {},
                          "checkpoint was trained on N=" + std::to_string(model.config().regions) +
                              " regions but the data has N=" + std::to_string(ds.regions()));
  if (model.config().channels != ds.channels())
    throw ValidationError(Rule::DimensionMismatch, "channels", {},
                          "checkpoint expects C=" + std::to_string(model.config().channels) +
                              " channels but the data has C=" + std::to_string(ds.channels()));
}

// One window ending at `at`: per-region, per-day predictions with the
// estimated parameters, transmission strength and suppression flags.
inline int forecast(const fs::path& ckpt, const fs::path& data_dir, const std::string& at, const fs::path& out_csv,
                    std::ostream& log) {
  StoepModel model = restore(load_checkpoint(ckpt));
  const data::Dataset ds = data::load_dataset(data_dir);
  check_compatible(model, ds);
  const std::size_t t_out = model.config().t_out;
  const data::Window w = data::make_window(ds, ds.date_index(at), model.config().t_in, t_out, false);

  ad::NoGradGuard guard;
  const ForwardResult r = model.forward(w, ds.population);
  const Tensor& cases = r.cases().value();
  const Tensor& beta = r.spe.beta.value();
  const Tensor& beta_hat = r.beta_hat.value();
  const Tensor& gamma = r.spe.gamma.value();
  const Tensor& pi = r.rollout.pi.value();
  const std::size_t last = ds.date_index(at);

  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  std::ofstream out(out_csv);
  if (!out) throw DataError("cannot write " + out_csv.string());
  out << "date,region,horizon,predicted_cases,observed_cases,beta,beta_hat,gamma,pi,flag_small,flag_quiet,"
         "flag_suppressed\n";
  auto fmt = data::detail::format_double;
  for (std::size_t i = 0; i < ds.regions(); ++i)
    for (std::size_t t = 0; t < t_out; ++t) {
      const std::size_t day = last + 1 + t;
      out << data::add_days(at, static_cast<long>(t + 1)) << ',' << ds.region_names[i] << ',' << t + 1 << ','
          << fmt(cases(i, t)) << ',' << (day < ds.days() ? fmt(ds.observations(i, day, kCases)) : "") << ','
          << fmt(beta(i, t)) << ',' << fmt(beta_hat(i, t)) << ',' << fmt(gamma(i, t)) << ',' << fmt(pi(i, t)) << ','
          << r.filter().small[i] << ',' << r.filter().quiet[i] << ',' << r.filter().combined[i] << '\n';
    }
  std::size_t suppressed = 0;
  for (bool f : r.filter().combined) suppressed += f;
  log << "forecast from " << at << " for " << t_out << " days, " << suppressed << " of " << ds.regions()
      << " regions suppressed, written to " << out_csv.string() << '\n';
  return kOk;
}

struct Evaluation {
  std::vector<eval::HorizonRow> model;
  std::vector<eval::HorizonRow> persistence;
};

inline Evaluation evaluate(StoepModel& model, const data::Dataset& ds) {
  check_compatible(model, ds);
  const data::Split split = data::chronological_split(ds);
  const data::WindowSet test = data::windowize(split.test, model.config().t_in, model.config().t_out);
  eval::PredictionSet preds;
  {
    ad::NoGradGuard guard;
    for (const auto& w : test.windows) {
      preds.pred.push_back(model.forward(w, test.population).cases().value());
      preds.truth.push_back(w.target);
    }
  }
  std::vector<std::size_t> horizons;
  for (std::size_t h : {3, 7, 14})
    if (h <= test.t_out) horizons.push_back(h);
  return {eval::horizon_report(preds, horizons),
          eval::horizon_report(eval::persistence_predictions(test), horizons)};
}

inline int evaluate(const fs::path& ckpt, const fs::path& data_dir, const fs::path& out_csv, std::ostream& log) {
  StoepModel model = restore(load_checkpoint(ckpt));
  const Evaluation e = evaluate(model, data::load_dataset(data_dir));
  const std::vector<std::pair<std::string, std::vector<eval::HorizonRow>>> reports{{"stoep", e.model},
                                                                                   {"persistence", e.persistence}};
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  std::ofstream out(out_csv);
  if (!out) throw DataError("cannot write " + out_csv.string());
  eval::write_csv(out, reports);
  eval::write_table(log, reports);
  return kOk;
}

// Tiny model on a noise-free synthetic series with the case-adjacency scale
// set to the mean flow and the enhancement weight moved off zero so every
// path carries gradient.
inline GradCheckReport gradcheck(const RunConfig& cfg) {
  data::SyntheticScenario scn = cfg.synthetic;
  scn.regions = cfg.gradcheck.regions;
  scn.days = cfg.gradcheck.days;
  const data::Dataset ds = data::generate_synthetic(scn).dataset;
  StoepModel model = make_model(cfg, ds);
  model.scaler = FeatureScaler::fit(ds.observations);
  const std::size_t t_in = model.config().t_in, t_out = model.config().t_out;
  const data::Window w = data::make_window(ds, ds.days() - t_out - 1, t_in, t_out);
  double flow = 0.0;
  for (double v : w.mobility.values()) flow += v;
  model.memory().scale.mutable_value()[0] = flow / static_cast<double>(w.mobility.size());
  model.spe().prior.residual.mutable_value()[0] = 0.5;
  double scale = 0.0;
  for (double v : w.target.values()) scale += std::fabs(v);
  scale = std::max(scale / static_cast<double>(w.target.size()), 1e-12);
  return gradient_check(model, w, ds.population, scale, cfg.gradcheck.check);
}

inline int gradcheck(const RunConfig& cfg, std::ostream& log) {
  const GradCheckReport report = gradcheck(cfg);
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %8s %14s %14s  %s\n", "group", "scalars", "checked", "max rel err",
                "max |grad|", "status");
  log << line;
  for (const auto& g : report.groups) {
    std::snprintf(line, sizeof line, "%-16s %8zu %8zu %14.3e %14.3e  %s\n", g.group.c_str(), g.scalars, g.checked,
                  g.max_relative_error, g.max_abs_gradient, g.passed ? "ok" : "FAIL");
    log << line;
  }
  log << "loss " << report.loss << ", tolerance " << cfg.gradcheck.check.tolerance << ": "
      << (report.passed() ? "passed" : "FAILED") << '\n';
  return report.passed() ? kOk : kVerificationFailed;
}

}  // namespace stoep::cli
