#pragma once

// Dataset ingestion (CSV), chronological splitting, sliding windows and the
// seeded synthetic metapopulation scenario.
//
// Files in a data directory:
//   observations.csv  date,region,cases,S,I,R[,extra...]   one row per (date, region)
//   mobility.csv      date,origin,destination,flow         absent pairs are 0
//   population.csv    region,population                    defines region order
// Dates are ISO-8601 (YYYY-MM-DD) and must cover consecutive days.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stoep/domain.hpp"
#include "stoep/metasir.hpp"
#include "stoep/random.hpp"

namespace stoep::data {

// ------------------------------------------------------------------- dates

inline std::chrono::sys_days parse_date(std::string_view text) {
  int y = 0;
  unsigned m = 0, d = 0;
  auto bad = [&] { return DataError("malformed date '" + std::string(text) + "' (expected YYYY-MM-DD)"); };
  if (text.size() != 10 || text[4] != '-' || text[7] != '-') throw bad();
  auto num = [&](std::size_t pos, std::size_t len, auto& out) {
    auto res = std::from_chars(text.data() + pos, text.data() + pos + len, out);
    if (res.ec != std::errc() || res.ptr != text.data() + pos + len) throw bad();
  };
  num(0, 4, y);
  num(5, 2, m);
  num(8, 2, d);
  std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw bad();
  return std::chrono::sys_days{ymd};
}

inline std::string format_date(std::chrono::sys_days day) {
  std::chrono::year_month_day ymd{day};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

inline std::string add_days(const std::string& date, long days) {
  return format_date(parse_date(date) + std::chrono::days{days});
}

// ----------------------------------------------------------------- dataset

struct Dataset {
  std::vector<std::string> region_names;
  std::vector<std::string> dates;          // consecutive days
  std::vector<std::string> channel_names;  // cases, S, I, R, extras
  Tensor observations;                     // [N, L, C]
  Tensor mobility;                         // [N, N, L]
  PopulationVector population;

  std::size_t regions() const { return region_names.size(); }
  std::size_t days() const { return dates.size(); }
  std::size_t channels() const { return channel_names.size(); }

  // Days [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > days()) throw std::out_of_range("Dataset::slice");
    const std::size_t n = regions(), c = channels(), len = end - begin;
    Dataset out{region_names, {dates.begin() + begin, dates.begin() + end}, channel_names,
                Tensor({n, len, c}), Tensor({n, n, len}), population};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < c; ++k) out.observations(i, t, k) = observations(i, begin + t, k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t t = 0; t < len; ++t) out.mobility(i, j, t) = mobility(i, j, begin + t);
    return out;
  }

  std::size_t date_index(const std::string& date) const {
    auto it = std::find(dates.begin(), dates.end(), date);
    if (it == dates.end()) throw DataError("date " + date + " is outside the dataset (" + dates.front() + " .. " +
                                           dates.back() + ")");
    return static_cast<std::size_t>(it - dates.begin());
  }
};

inline void validate(const Dataset& ds) {
  const std::size_t n = ds.regions(), l = ds.days();
  if (ds.observations.shape() != Shape{n, l, ds.channels()})
    throw ValidationError(Rule::DimensionMismatch, "observations", {}, shape_string(ds.observations.shape()));
  validate(ObservationHistory{ds.observations}, MobilitySeries{ds.mobility, HorizonKind::History}, ds.population);
}

// --------------------------------------------------------------------- CSV

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_row(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> cells;
};

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<CsvRow> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  DataError error(std::size_t line, const std::string& what) const {
    return DataError(path + ":" + std::to_string(line) + ": " + what);
  }

  double number(const CsvRow& row, std::size_t col) const {
    const std::string& s = row.cells[col];
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw error(row.line, "cannot parse '" + s + "' in column '" + header[col] + "' as a number");
    return v;
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CsvTable table;
  table.path = path.string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_row(line);
    if (table.header.empty()) {
      if (!cells.empty() && cells[0].rfind("\xEF\xBB\xBF", 0) == 0) cells[0].erase(0, 3);
      table.header = std::move(cells);
      continue;
    }
    if (cells.size() != table.header.size())
      throw table.error(line_no, "expected " + std::to_string(table.header.size()) + " fields, found " +
                                     std::to_string(cells.size()));
    table.rows.push_back({line_no, std::move(cells)});
  }
  if (table.header.empty()) throw DataError(path.string() + ": empty file");
  return table;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& observations_file, const std::filesystem::path& mobility_file,
                            const std::filesystem::path& population_file) {
  Dataset ds;

  const auto pop = detail::read_csv(population_file);
  const std::size_t pop_region = pop.column("region"), pop_size = pop.column("population");
  std::unordered_map<std::string, std::size_t> region_index;
  for (const auto& row : pop.rows) {
    const std::string& name = row.cells[pop_region];
    if (!region_index.emplace(name, ds.region_names.size()).second)
      throw pop.error(row.line, "duplicate region '" + name + "'");
    ds.region_names.push_back(name);
    ds.population.sizes.push_back(pop.number(row, pop_size));
  }
  const std::size_t n = ds.region_names.size();
  if (n == 0) throw DataError(pop.path + ": no regions");
  auto region_of = [&](const detail::CsvTable& t, const detail::CsvRow& row, std::size_t col) {
    auto it = region_index.find(row.cells[col]);
    if (it == region_index.end()) throw t.error(row.line, "unknown region '" + row.cells[col] + "'");
    return it->second;
  };

  const auto obs = detail::read_csv(observations_file);
  const std::size_t c_date = obs.column("date"), c_region = obs.column("region");
  const std::size_t essential[] = {obs.column("cases"), obs.column("S"), obs.column("I"), obs.column("R")};
  std::vector<std::size_t> channel_cols(std::begin(essential), std::end(essential));
  ds.channel_names = {"cases", "S", "I", "R"};
  for (std::size_t k = 0; k < obs.header.size(); ++k) {
    if (k == c_date || k == c_region || std::find(std::begin(essential), std::end(essential), k) != std::end(essential))
      continue;
    channel_cols.push_back(k);
    ds.channel_names.push_back(obs.header[k]);
  }

  std::vector<std::chrono::sys_days> days;
  std::map<std::pair<std::size_t, std::size_t>, const detail::CsvRow*> cells;
  for (const auto& row : obs.rows) {
    std::chrono::sys_days day;
    try {
      day = parse_date(row.cells[c_date]);
    } catch (const DataError& e) {
      throw obs.error(row.line, e.what());
    }
    if (days.empty() || day > days.back()) {
      if (!days.empty() && day != days.back() + std::chrono::days{1})
        throw obs.error(row.line, "missing date(s) before " + row.cells[c_date] + " (dates must be consecutive)");
      days.push_back(day);
    } else if (day < days.back()) {
      throw obs.error(row.line, "non-monotone dates: " + row.cells[c_date] + " after " + format_date(days.back()));
    }
    const std::size_t r = region_of(obs, row, c_region);
    if (!cells.emplace(std::make_pair(days.size() - 1, r), &row).second)
      throw obs.error(row.line, "duplicate key (" + row.cells[c_date] + ", " + row.cells[c_region] + ")");
  }
  if (days.empty()) throw DataError(obs.path + ": no observations");
  for (auto d : days) ds.dates.push_back(format_date(d));

  const std::size_t l = days.size(), c = channel_cols.size();
  ds.observations = Tensor({n, l, c});
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t r = 0; r < n; ++r) {
      auto it = cells.find({t, r});
      if (it == cells.end())
        throw DataError(obs.path + ": missing cell for (" + ds.dates[t] + ", " + ds.region_names[r] + ")");
      for (std::size_t k = 0; k < c; ++k) ds.observations(r, t, k) = obs.number(*it->second, channel_cols[k]);
    }

  const auto mob = detail::read_csv(mobility_file);
  const std::size_t m_date = mob.column("date"), m_origin = mob.column("origin"), m_dest = mob.column("destination"),
                    m_flow = mob.column("flow");
  ds.mobility = Tensor({n, n, l});
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::size_t> seen;
  for (const auto& row : mob.rows) {
    std::chrono::sys_days day;
    try {
      day = parse_date(row.cells[m_date]);
    } catch (const DataError& e) {
      throw mob.error(row.line, e.what());
    }
    if (day < days.front() || day > days.back())
      throw mob.error(row.line, "date " + row.cells[m_date] + " outside the observation range");
    const auto t = static_cast<std::size_t>((day - days.front()).count());
    const std::size_t o = region_of(mob, row, m_origin), d = region_of(mob, row, m_dest);
    if (!seen.emplace(std::make_tuple(t, o, d), row.line).second)
      throw mob.error(row.line, "duplicate key (" + row.cells[m_date] + ", " + row.cells[m_origin] + ", " +
                                    row.cells[m_dest] + ")");
    ds.mobility(o, d, t) = mob.number(row, m_flow);
  }

  validate(ObservationHistory{ds.observations}, MobilitySeries{ds.mobility, HorizonKind::History}, ds.population);
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  for (const char* f : {"observations.csv", "mobility.csv", "population.csv"})
    if (!std::filesystem::exists(dir / f)) throw DataError("missing " + (dir / f).string());
  return load_dataset(dir / "observations.csv", dir / "mobility.csv", dir / "population.csv");
}

// Values are written with 17 significant digits so a reload is exact.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = ds.regions(), l = ds.days(), c = ds.channels();
  {
    std::ofstream out(dir / "population.csv");
    out << "region,population\n";
    for (std::size_t r = 0; r < n; ++r)
      out << ds.region_names[r] << ',' << detail::format_double(ds.population.sizes[r]) << '\n';
  }
  {
    std::ofstream out(dir / "observations.csv");
    out << "date,region";
    for (const auto& name : ds.channel_names) out << ',' << name;
    out << '\n';
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t r = 0; r < n; ++r) {
        out << ds.dates[t] << ',' << ds.region_names[r];
        for (std::size_t k = 0; k < c; ++k) out << ',' << detail::format_double(ds.observations(r, t, k));
        out << '\n';
      }
  }
  {
    std::ofstream out(dir / "mobility.csv");
    out << "date,origin,destination,flow\n";
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t o = 0; o < n; ++o)
        for (std::size_t d = 0; d < n; ++d) {
          const double f = ds.mobility(o, d, t);
          if (f == 0.0) continue;
          out << ds.dates[t] << ',' << ds.region_names[o] << ',' << ds.region_names[d] << ','
              << detail::format_double(f) << '\n';
        }
  }
}

// --------------------------------------------------------- split & windows

struct Split {
  Dataset train;
  Dataset validation;
  Dataset test;
};

// Contiguous 6:1:1 segments over raw days: floor(6L/8), floor(L/8), remainder.
inline Split chronological_split(const Dataset& ds) {
  const std::size_t l = ds.days();
  if (l < 8) throw DataError("too-short-series: " + std::to_string(l) + " days, need at least 8 for a 6:1:1 split");
  const std::size_t train = 6 * l / 8, val = l / 8;
  return {ds.slice(0, train), ds.slice(train, train + val), ds.slice(train + val, l)};
}

struct Window {
  std::size_t last_day = 0;  // index of the last observed day within the source segment
  std::string last_date;
  Tensor observations;  // [N, T_in, C]
  Tensor mobility;      // [N, N, T_in]
  Tensor target;        // [N, T_out] cases; zeros when has_target is false
  bool has_target = true;

  Tensor channel(std::size_t c) const { return ObservationHistory{observations}.channel(c); }

  metasir::CompartmentState last_state() const {
    const std::size_t n = observations.dim(0), t = observations.dim(1) - 1;
    metasir::CompartmentState s{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      s.susceptible[i] = observations(i, t, kSusceptible);
      s.infected[i] = observations(i, t, kInfected);
      s.recovered[i] = observations(i, t, kRecovered);
    }
    return s;
  }
};

// The window whose last observed day is `last_day`. Targets past the end of
// the segment are allowed only when require_target is false.
inline Window make_window(const Dataset& ds, std::size_t last_day, std::size_t t_in, std::size_t t_out,
                          bool require_target = true) {
  if (last_day + 1 < t_in || last_day >= ds.days())
    throw DataError("window ending " + std::to_string(last_day) + " needs " + std::to_string(t_in) + " days of history");
  const bool complete = last_day + t_out < ds.days();
  if (require_target && !complete) throw DataError("window ending " + std::to_string(last_day) + " lacks targets");
  const std::size_t n = ds.regions(), c = ds.channels(), first = last_day + 1 - t_in;
  Window w;
  w.last_day = last_day;
  w.last_date = ds.dates[last_day];
  w.observations = Tensor({n, t_in, c});
  w.mobility = Tensor({n, n, t_in});
  w.target = Tensor({n, t_out});
  w.has_target = complete;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < t_in; ++t)
      for (std::size_t k = 0; k < c; ++k) w.observations(i, t, k) = ds.observations(i, first + t, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < t_in; ++t) w.mobility(i, j, t) = ds.mobility(i, j, first + t);
  if (complete)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < t_out; ++t) w.target(i, t) = ds.observations(i, last_day + 1 + t, kCases);
  return w;
}

struct WindowSet {
  std::vector<Window> windows;
  PopulationVector population;
  std::size_t t_in = 0;
  std::size_t t_out = 0;
};

// Stride-1 windows inside one segment: count = length - (T_in + T_out) + 1.
inline WindowSet windowize(const Dataset& segment, std::size_t t_in, std::size_t t_out) {
  const std::size_t need = t_in + t_out;
  if (segment.days() < need)
    throw DataError("too-short-segment: " + std::to_string(segment.days()) + " days, need " + std::to_string(need));
  WindowSet set{{}, segment.population, t_in, t_out};
  for (std::size_t last = t_in - 1; last + t_out < segment.days(); ++last)
    set.windows.push_back(make_window(segment, last, t_in, t_out));
  return set;
}

// ------------------------------------------------------------- synthetic

enum class BetaShape { Seasonal, Bump };

struct SyntheticScenario {
  std::uint64_t seed = 7;
  std::size_t regions = 8;
  std::size_t days = 400;
  BetaShape shape = BetaShape::Seasonal;
  double beta_min = 0.05;
  double beta_max = 0.45;
  double season_period = 160.0;  // days, seasonal shape
  double phase_jitter = 10.0;    // days, per-region seasonal offset
  double bump_width = 30.0;      // days, bump shape
  double gamma = 0.1;
  double noise = 0.05;           // sigma of multiplicative log-normal noise on cases
  double population_min = 2e5;
  double population_max = 2e6;
  double initial_infected_min = 50.0;
  double initial_infected_max = 400.0;
  double self_flow = 0.18;       // fraction of P_n staying within region n per day
  double travel_scale = 0.02;    // gravity coefficient for cross-region trips
  double travel_range = 0.35;    // gravity distance decay (unit square)
  double weekly_amplitude = 0.1;
  std::string start_date = "2020-01-01";
};

struct SyntheticData {
  Dataset dataset;
  Tensor beta;   // [N, L] true infection rates
  Tensor gamma;  // [N, L] true recovery rates
};

// Day 0 starts from the seeded initial compartments and every recorded day t
// is one metapopulation step with beta*(t), gamma*(t) and day-t flows, so a
// noise-free series is a fixed point of metasir::rollout.
inline SyntheticData generate_synthetic(const SyntheticScenario& scn) {
  if (scn.regions == 0 || scn.days == 0) throw ConfigError("synthetic: regions and days must be positive");
  Rng rng(scn.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = scn.regions, l = scn.days;

  PopulationVector pop;
  std::vector<double> x(n), y(n), phase(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = unit(rng);
    pop.sizes.push_back(std::round(std::exp(std::log(scn.population_min) +
                                             u * (std::log(scn.population_max) - std::log(scn.population_min)))));
    x[i] = unit(rng);
    y[i] = unit(rng);
    phase[i] = (2.0 * unit(rng) - 1.0) * scn.phase_jitter;
  }

  Tensor base({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) {
        base(i, j) = scn.self_flow * pop.sizes[i];
      } else {
        const double dist = std::hypot(x[i] - x[j], y[i] - y[j]);
        base(i, j) = scn.travel_scale * std::sqrt(pop.sizes[i] * pop.sizes[j]) * std::exp(-dist / scn.travel_range);
      }
    }
  Tensor flows({n, n, l});
  for (std::size_t t = 0; t < l; ++t) {
    const double weekly = 1.0 + scn.weekly_amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / 7.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) flows(i, j, t) = base(i, j) * (i == j ? 1.0 : weekly);
  }

  Tensor beta({n, l}), gamma({n, l}, scn.gamma);
  const double mid = 0.5 * static_cast<double>(l);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < l; ++t) {
      const double day = static_cast<double>(t) + phase[i];
      double level = 0.0;
      if (scn.shape == BetaShape::Seasonal) {
        level = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * day / scn.season_period));
      } else {
        const double z = (day - mid) / scn.bump_width;
        level = std::exp(-0.5 * z * z);
      }
      beta(i, t) = scn.beta_min + (scn.beta_max - scn.beta_min) * level;
    }

  metasir::CompartmentState initial{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    initial.infected[i] =
        std::round(scn.initial_infected_min + unit(rng) * (scn.initial_infected_max - scn.initial_infected_min));
    initial.susceptible[i] = pop.sizes[i] - initial.infected[i];
  }
  const Forecast sim = metasir::rollout(initial, EpidemicParams{beta, gamma}, MobilitySeries{flows, HorizonKind::Forecast}, pop);

  SyntheticData out;
  Dataset& ds = out.dataset;
  for (std::size_t i = 0; i < n; ++i) ds.region_names.push_back("R" + std::to_string(i + 1));
  for (std::size_t t = 0; t < l; ++t) ds.dates.push_back(add_days(scn.start_date, static_cast<long>(t)));
  ds.channel_names = {"cases", "S", "I", "R"};
  ds.observations = Tensor({n, l, 4});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < l; ++t) {
      double cases = sim.cases(i, t);
      if (scn.noise > 0.0) cases *= std::exp(scn.noise * noise(rng));
      ds.observations(i, t, kCases) = cases;
      ds.observations(i, t, kSusceptible) = sim.susceptible(i, t);
      ds.observations(i, t, kInfected) = sim.infected(i, t);
      ds.observations(i, t, kRecovered) = sim.recovered(i, t);
    }
  ds.mobility = std::move(flows);
  ds.population = std::move(pop);
  out.beta = std::move(beta);
  out.gamma = std::move(gamma);
  return out;
}

// Convention helper for case-only data: I is the trailing `delay`-day sum of
// cases, R the cumulative cases older than that, S the remainder. This is an
// assumed fixed recovery delay, not a property of any published dataset.
inline Tensor derive_compartments(const Tensor& cases, const PopulationVector& pop, std::size_t delay = 10) {
  const std::size_t n = cases.dim(0), l = cases.dim(1);
  Tensor out({n, l, 4});
  for (std::size_t i = 0; i < n; ++i) {
    double cumulative = 0.0;
    for (std::size_t t = 0; t < l; ++t) {
      cumulative += cases(i, t);
      double active = 0.0;
      for (std::size_t s = (t + 1 > delay ? t + 1 - delay : 0); s <= t; ++s) active += cases(i, s);
      const double recovered = cumulative - active;
      out(i, t, kCases) = cases(i, t);
      out(i, t, kInfected) = active;
      out(i, t, kRecovered) = recovered;
      out(i, t, kSusceptible) = std::max(0.0, pop.sizes[i] - active - recovered);
    }
  }
  return out;
}

}  // namespace stoep::data
