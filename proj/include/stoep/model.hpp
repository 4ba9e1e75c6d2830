#pragma once

// End-to-end forecaster: case-aware adjacency, parameter estimation,
// filter-based suppression and the metapopulation rollout.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stoep/autodiff.hpp"
#include "stoep/cal.hpp"
#include "stoep/data.hpp"
#include "stoep/domain.hpp"
#include "stoep/fmf.hpp"
#include "stoep/metasir.hpp"
#include "stoep/random.hpp"
#include "stoep/spe.hpp"

namespace stoep {

struct ModelConfig {
  std::size_t regions = 0;
  std::size_t channels = 4;
  std::size_t t_in = 14;
  std::size_t t_out = 14;

  std::size_t recent_window = 7;
  std::size_t pattern_count = 9;
  std::size_t key_dim = 16;
  std::size_t embed_dim = 16;

  std::size_t lifted = 8;
  std::size_t heads = 4;
  std::size_t hidden = 16;
  std::size_t skip = 32;
  std::size_t out_dim = 16;
  std::vector<std::size_t> dilations{1, 2, 4, 8};

  // Initial outputs of the sigmoid heads, set through their biases.
  double beta_init = 0.5;
  double gamma_init = 0.5;

  std::uint64_t seed = 1;

  cal::CalConfig cal() const { return {regions, t_in, t_out, recent_window, pattern_count, key_dim, embed_dim}; }

  spe::SpeConfig spe() const {
    spe::SpeConfig c;
    c.regions = regions;
    c.channels = channels;
    c.lifted = lifted;
    c.heads = heads;
    c.hidden = hidden;
    c.skip = skip;
    c.out_dim = out_dim;
    c.dilations = dilations;
    c.t_in = t_in;
    c.t_out = t_out;
    return c;
  }

  void check() const {
    if (regions == 0) throw ConfigError("model: regions must be positive");
    if (channels < kEssentialChannels) throw ConfigError("model: at least 4 input channels are required");
    if (t_in == 0 || t_out == 0) throw ConfigError("model: t_in and t_out must be positive");
    for (double v : {beta_init, gamma_init})
      if (!(v > 0.0 && v < 1.0)) throw ConfigError("model: beta_init and gamma_init must lie in (0, 1)");
    cal().check();
    spe().check();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// log1p on the epidemic channels, then per-channel standardization using
// statistics of the training segment.
struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> scale;

  static double raw(double v, std::size_t c) { return c < kEssentialChannels ? std::log1p(std::max(v, 0.0)) : v; }

  static FeatureScaler fit(const Tensor& observations) {
    const std::size_t n = observations.dim(0), t = observations.dim(1), c = observations.dim(2);
    FeatureScaler s{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)};
    const double count = static_cast<double>(n * t);
    for (std::size_t k = 0; k < c; ++k) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < t; ++d) sum += raw(observations(i, d, k), k);
      const double mean = sum / count;
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < t; ++d) {
          const double z = raw(observations(i, d, k), k) - mean;
          var += z * z;
        }
      const double sd = std::sqrt(var / count);
      s.mean[k] = mean;
      s.scale[k] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
  }

  static FeatureScaler identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }

  Tensor transform(const Tensor& observations) const {
    const std::size_t c = observations.dim(2);
    if (c != mean.size())
      throw ValidationError(Rule::BadChannelCount, "observations", {},
                            "scaler fitted on " + std::to_string(mean.size()) + " channels, got " + std::to_string(c));
    Tensor out(observations.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t k = i % c;
      out[i] = (raw(observations[i], k) - mean[k]) / scale[k];
    }
    return out;
  }
};

struct NamedParam {
  std::string group;
  std::string name;
  ad::Var var;
};

struct ForwardOptions {
  bool training = false;
  const SuppressionFilter* frozen_filter = nullptr;  // skips detection when set
};

struct ForwardResult {
  cal::CalOutput cal;
  spe::SpeOutput spe;
  fmf::FilterResult detection;
  ad::Var beta_hat;
  metasir::RolloutVars rollout;

  const ad::Var& cases() const { return rollout.cases; }
  const SuppressionFilter& filter() const { return detection.filter; }
};

class StoepModel {
 public:
  StoepModel() = default;

  StoepModel(ModelConfig cfg, fmf::ThresholdConfig thresholds) : cfg_(std::move(cfg)), thresholds_(thresholds) {
    cfg_.check();
    thresholds_.check();
    Rng rng(cfg_.seed);
    forecaster_ = cal::MobilityForecaster::init(cfg_.t_in, cfg_.t_out);
    memory_ = cal::PatternMemory::init(cfg_.cal(), rng);
    spe_ = spe::SpeParams::init(cfg_.spe(), rng);
    spe_.heads.beta_b.mutable_value()[0] = std::log(cfg_.beta_init / (1.0 - cfg_.beta_init));
    spe_.heads.gamma_b.mutable_value()[0] = std::log(cfg_.gamma_init / (1.0 - cfg_.gamma_init));
    scaler = FeatureScaler::identity(cfg_.channels);
  }

  const ModelConfig& config() const { return cfg_; }
  const fmf::ThresholdConfig& thresholds() const { return thresholds_; }
  cal::MobilityForecaster& forecaster() { return forecaster_; }
  cal::PatternMemory& memory() { return memory_; }
  spe::SpeParams& spe() { return spe_; }

  // Every learnable tensor in a fixed order; group names follow the module split.
  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    auto add = [&](const char* group, std::string name, const ad::Var& v) { out.push_back({group, std::move(name), v}); };
    add("cal.forecaster", "cal.forecaster.weight", forecaster_.weight);
    add("cal.memory", "cal.memory.patterns", memory_.patterns);
    add("cal.memory", "cal.memory.key_w", memory_.key_w);
    add("cal.memory", "cal.memory.key_b", memory_.key_b);
    add("cal.memory", "cal.memory.value_w", memory_.value_w);
    add("cal.memory", "cal.memory.value_b", memory_.value_b);
    add("cal.memory", "cal.memory.out_w", memory_.out_w);
    add("cal.memory", "cal.memory.out_b", memory_.out_b);
    add("cal.memory", "cal.memory.embeddings", memory_.embeddings);
    add("cal.memory", "cal.memory.scale", memory_.scale);
    add("spe.lift", "spe.lift.weight", spe_.lift.weight);
    add("spe.lift", "spe.lift.bias", spe_.lift.bias);
    add("spe.attention", "spe.attention.query", spe_.attention.query);
    add("spe.attention", "spe.attention.key", spe_.attention.key);
    add("spe.prior", "spe.prior.scores", spe_.prior.scores);
    add("spe.prior", "spe.prior.gate_w", spe_.prior.gate_w);
    add("spe.prior", "spe.prior.gate_b", spe_.prior.gate_b);
    add("spe.prior", "spe.prior.residual", spe_.prior.residual);
    auto& b = spe_.backbone;
    add("spe.backbone", "spe.backbone.start_w", b.start_w);
    add("spe.backbone", "spe.backbone.start_b", b.start_b);
    for (std::size_t i = 0; i < b.layers.size(); ++i) {
      const std::string p = "spe.backbone.layer" + std::to_string(i) + ".";
      auto& l = b.layers[i];
      add("spe.backbone", p + "filter_past", l.filter_past);
      add("spe.backbone", p + "filter_now", l.filter_now);
      add("spe.backbone", p + "filter_b", l.filter_b);
      add("spe.backbone", p + "gate_past", l.gate_past);
      add("spe.backbone", p + "gate_now", l.gate_now);
      add("spe.backbone", p + "gate_b", l.gate_b);
      add("spe.backbone", p + "skip_w", l.skip_w);
      add("spe.backbone", p + "skip_b", l.skip_b);
      add("spe.backbone", p + "graph_self", l.graph_self);
      add("spe.backbone", p + "graph_mix", l.graph_mix);
      add("spe.backbone", p + "graph_b", l.graph_b);
    }
    add("spe.backbone", "spe.backbone.end_w", b.end_w);
    add("spe.backbone", "spe.backbone.end_b", b.end_b);
    add("spe.backbone", "spe.backbone.time_w", b.time_w);
    add("spe.backbone", "spe.backbone.time_b", b.time_b);
    add("spe.heads", "spe.heads.beta_w", spe_.heads.beta_w);
    add("spe.heads", "spe.heads.beta_b", spe_.heads.beta_b);
    add("spe.heads", "spe.heads.gamma_w", spe_.heads.gamma_w);
    add("spe.heads", "spe.heads.gamma_b", spe_.heads.gamma_b);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.var.zero_grad();
  }

  // Keeps the feature-enhancement weight inside [0, 1].
  void project() { spe_.prior.clamp_residual(); }

  ForwardResult forward(const data::Window& w, const PopulationVector& pop, const ForwardOptions& opt = {}) {
    const std::size_t n = cfg_.regions;
    if (w.observations.dim(0) != n || pop.regions() != n)
      throw ValidationError(Rule::DimensionMismatch, "regions", {},
                            "model expects N=" + std::to_string(n) + ", window has N=" +
                                std::to_string(w.observations.dim(0)) + " and population N=" +
                                std::to_string(pop.regions()));
    if (w.observations.dim(1) != cfg_.t_in || w.observations.dim(2) != cfg_.channels)
      throw ValidationError(Rule::DimensionMismatch, "window", {},
                            shape_string(w.observations.shape()) + " does not match T_in=" +
                                std::to_string(cfg_.t_in) + ", C=" + std::to_string(cfg_.channels));

    ForwardResult r;
    r.cal = cal::run(ad::Var::constant(w.mobility), w.channel(kCases), forecaster_, memory_);
    r.spe = spe::run(ad::Var::constant(scaler.transform(w.observations)), r.cal.adjacency, spe_, cfg_.spe());
    if (opt.frozen_filter) {
      r.detection.filter = *opt.frozen_filter;
    } else {
      r.detection = fmf::detect(EpidemicParams{r.spe.beta.value(), r.spe.gamma.value()}, w.channel(kInfected),
                                thresholds_, ema, opt.training);
    }
    r.beta_hat = fmf::suppress_beta(r.spe.beta, r.detection.filter, thresholds_.psi);
    r.rollout = metasir::rollout(metasir::to_vars(w.last_state()), r.beta_hat, r.spe.gamma, r.cal.forecast_flows,
                                 pop.sizes);
    return r;
  }

  FeatureScaler scaler;
  fmf::EmaState ema;

 private:
  ModelConfig cfg_;
  fmf::ThresholdConfig thresholds_;
  cal::MobilityForecaster forecaster_;
  cal::PatternMemory memory_;
  spe::SpeParams spe_;
};

}  // namespace stoep
