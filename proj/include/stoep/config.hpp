#pragma once

// Run configuration: one INI file with sections [data], [model], [fmf],
// [train], [synthetic] and [gradcheck]. Every key is optional and defaults to
// the values below; unknown sections or keys are rejected.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "stoep/data.hpp"
#include "stoep/fmf.hpp"
#include "stoep/model.hpp"
#include "stoep/train.hpp"

namespace stoep {

struct GradCheckSettings {
  std::size_t regions = 3;
  std::size_t days = 40;
  GradCheckConfig check;
};

struct RunConfig {
  ModelConfig model;
  fmf::ThresholdConfig thresholds;
  TrainConfig train;
  data::SyntheticScenario synthetic;
  GradCheckSettings gradcheck;

  // The small model used by `gradcheck`: N=3, T_in=8, T_out=4.
  static RunConfig tiny() {
    RunConfig c;
    c.model.t_in = 8;
    c.model.t_out = 4;
    c.model.recent_window = 5;
    c.model.pattern_count = 4;
    c.model.key_dim = 4;
    c.model.embed_dim = 4;
    c.model.lifted = 4;
    c.model.heads = 2;
    c.model.hidden = 4;
    c.model.skip = 6;
    c.model.out_dim = 4;
    c.model.dilations = {1, 2, 4};
    c.model.beta_init = 0.3;
    c.model.gamma_init = 0.1;
    c.model.seed = 5;
    c.synthetic.regions = 3;
    c.synthetic.days = 40;
    c.synthetic.noise = 0.0;
    c.synthetic.seed = 3;
    c.gradcheck.regions = 3;
    c.gradcheck.days = 40;
    return c;
  }
};

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string suggestion(const std::string& key, const std::vector<std::string>& known) {
  std::string best;
  std::size_t dist = 4;
  for (const auto& k : known) {
    const std::size_t d = edit_distance(key, k);
    if (d < dist) {
      dist = d;
      best = k;
    }
  }
  return best.empty() ? "" : " (did you mean '" + best + "'?)";
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (text.empty() || res.ec != std::errc() || res.ptr != end)
    throw ConfigError("config: key '" + key + "' expects a number, got '" + text + "'");
  return v;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out.push_back(parse_value<std::size_t>(key, item));
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' expects a comma-separated list");
  return out;
}

using Setter = std::function<void(const std::string&)>;

}  // namespace detail

inline RunConfig parse_config(std::istream& in, RunConfig cfg = {}) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: malformed INI: ") + e.message() + " at line " + std::to_string(e.line()));
  }

  std::map<std::string, std::map<std::string, detail::Setter>> table;
  auto num = [](auto& field) {
    return [&field](const std::string& key, const std::string& text) {
      field = detail::parse_value<std::remove_reference_t<decltype(field)>>(key, text);
    };
  };
  auto bind = [&](const std::string& section, const std::string& key, auto setter) {
    table[section][key] = [setter, key](const std::string& text) { setter(key, text); };
  };

  bind("data", "t_in", num(cfg.model.t_in));
  bind("data", "t_out", num(cfg.model.t_out));

  ModelConfig& m = cfg.model;
  bind("model", "recent_window", num(m.recent_window));
  bind("model", "pattern_count", num(m.pattern_count));
  bind("model", "key_dim", num(m.key_dim));
  bind("model", "embed_dim", num(m.embed_dim));
  bind("model", "lifted", num(m.lifted));
  bind("model", "heads", num(m.heads));
  bind("model", "hidden", num(m.hidden));
  bind("model", "skip", num(m.skip));
  bind("model", "out_dim", num(m.out_dim));
  bind("model", "dilations", [&m](const std::string& key, const std::string& text) { m.dilations = detail::parse_list(key, text); });
  bind("model", "beta_init", num(m.beta_init));
  bind("model", "gamma_init", num(m.gamma_init));
  bind("model", "seed", num(m.seed));

  fmf::ThresholdConfig& f = cfg.thresholds;
  bind("fmf", "kappa_infected", num(f.kappa_infected));
  bind("fmf", "kappa_ratio", num(f.kappa_ratio));
  bind("fmf", "kappa_beta", num(f.kappa_beta));
  bind("fmf", "kappa_gamma", num(f.kappa_gamma));
  bind("fmf", "min_infected", num(f.min_infected));
  bind("fmf", "min_ratio", num(f.min_ratio));
  bind("fmf", "min_beta", num(f.min_beta));
  bind("fmf", "min_gamma", num(f.min_gamma));
  bind("fmf", "ratio_cap", num(f.ratio_cap));
  bind("fmf", "ema_decay", num(f.ema_decay));
  bind("fmf", "psi", num(f.psi));

  TrainConfig& t = cfg.train;
  bind("train", "batch_size", num(t.batch_size));
  bind("train", "learning_rate", num(t.learning_rate));
  bind("train", "weight_decay", num(t.weight_decay));
  bind("train", "max_epochs", num(t.max_epochs));
  bind("train", "patience", num(t.patience));
  bind("train", "curriculum_step", num(t.curriculum_step));
  bind("train", "seed", num(t.seed));

  data::SyntheticScenario& s = cfg.synthetic;
  bind("synthetic", "seed", num(s.seed));
  bind("synthetic", "regions", num(s.regions));
  bind("synthetic", "days", num(s.days));
  bind("synthetic", "shape", [&s](const std::string& key, const std::string& text) {
    if (text == "seasonal") s.shape = data::BetaShape::Seasonal;
    else if (text == "bump") s.shape = data::BetaShape::Bump;
    else throw ConfigError("config: key '" + key + "' expects 'seasonal' or 'bump', got '" + text + "'");
  });
  bind("synthetic", "beta_min", num(s.beta_min));
  bind("synthetic", "beta_max", num(s.beta_max));
  bind("synthetic", "season_period", num(s.season_period));
  bind("synthetic", "phase_jitter", num(s.phase_jitter));
  bind("synthetic", "bump_width", num(s.bump_width));
  bind("synthetic", "gamma", num(s.gamma));
  bind("synthetic", "noise", num(s.noise));
  bind("synthetic", "population_min", num(s.population_min));
  bind("synthetic", "population_max", num(s.population_max));
  bind("synthetic", "initial_infected_min", num(s.initial_infected_min));
  bind("synthetic", "initial_infected_max", num(s.initial_infected_max));
  bind("synthetic", "self_flow", num(s.self_flow));
  bind("synthetic", "travel_scale", num(s.travel_scale));
  bind("synthetic", "travel_range", num(s.travel_range));
  bind("synthetic", "weekly_amplitude", num(s.weekly_amplitude));
  bind("synthetic", "start_date", [&s](const std::string& key, const std::string& text) {
    try {
      data::parse_date(text);
    } catch (const DataError& e) {
      throw ConfigError("config: key '" + key + "': " + e.what());
    }
    s.start_date = text;
  });

  GradCheckSettings& g = cfg.gradcheck;
  bind("gradcheck", "regions", num(g.regions));
  bind("gradcheck", "days", num(g.days));
  bind("gradcheck", "step", num(g.check.step));
  bind("gradcheck", "tolerance", num(g.check.tolerance));
  bind("gradcheck", "samples_per_group", num(g.check.samples_per_group));
  bind("gradcheck", "seed", num(g.check.seed));

  std::vector<std::string> sections;
  for (const auto& [name, keys] : table) sections.push_back(name);
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty())
      throw ConfigError("config: key '" + section + "' must appear inside a [section]");
    auto sec = table.find(section);
    if (sec == table.end())
      throw ConfigError("config: unknown section [" + section + "]" + detail::suggestion(section, sections));
    std::vector<std::string> known;
    for (const auto& [k, _] : sec->second) known.push_back(k);
    for (const auto& [key, value] : keys) {
      auto it = sec->second.find(key);
      if (it == sec->second.end())
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]" + detail::suggestion(key, known));
      it->second(value.data());
    }
  }
  cfg.train.check();
  cfg.thresholds.check();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig defaults = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return parse_config(in, std::move(defaults));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace stoep
