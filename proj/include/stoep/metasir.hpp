#pragma once

// Metapopulation SIR core: mobility-induced transmission strength, one-day
// forward Euler updates, and the recursive multi-day rollout. The Var-based
// functions are the single implementation; the plain-double overloads wrap
// them with constants.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "stoep/autodiff.hpp"
#include "stoep/domain.hpp"

namespace stoep::metasir {

struct CompartmentState {
  std::vector<double> susceptible;
  std::vector<double> infected;
  std::vector<double> recovered;

  std::size_t regions() const { return susceptible.size(); }
  double total(std::size_t n) const { return susceptible[n] + infected[n] + recovered[n]; }
};

struct StateVars {
  ad::Var susceptible;
  ad::Var infected;
  ad::Var recovered;
};

inline StateVars to_vars(const CompartmentState& s) {
  const std::size_t n = s.regions();
  return {ad::Var::constant(Tensor({n}, s.susceptible)), ad::Var::constant(Tensor({n}, s.infected)),
          ad::Var::constant(Tensor({n}, s.recovered))};
}

// Pi_n = sum_m (h_nm / P_m + h_mn / P_n) * I_m for flows h [N, N] and I [N].
inline ad::Var transmission_strength(const ad::Var& flows, const std::vector<double>& population,
                                     const ad::Var& infected) {
  const std::size_t n = population.size();
  if (flows.shape() != Shape{n, n} || infected.shape() != Shape{n})
    throw std::invalid_argument("transmission_strength: expected flows [N, N] and infected [N] with N = " +
                                std::to_string(n));
  const Tensor& h = flows.value();
  const Tensor& inf = infected.value();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t m = 0; m < n; ++m) acc += (h(i, m) / population[m] + h(m, i) / population[i]) * inf[m];
    out[i] = acc;
  }
  return ad::make_op(std::move(out), {flows, infected}, [flows, infected, population, n](const ad::Node& self) {
    const Tensor& g = self.grad;
    const Tensor& h = flows.value();
    const Tensor& inf = infected.value();
    if (infected.requires_grad()) {
      Tensor& gi = infected.node()->grad;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < n; ++m) gi[m] += g[i] * (h(i, m) / population[m] + h(m, i) / population[i]);
    }
    if (flows.requires_grad()) {
      Tensor& gh = flows.node()->grad;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) gh(a, b) += (g[a] * inf[b] + g[b] * inf[a]) / population[b];
    }
  });
}

struct StepVars {
  StateVars next;
  ad::Var cases;
};

// One day of forward Euler: new infections min(beta * Pi, S), recoveries
// gamma * I (previous-day I), every compartment clamped at zero.
inline StepVars step(const StateVars& state, const ad::Var& beta, const ad::Var& gamma, const ad::Var& pi) {
  ad::Var infections = ad::minimum(ad::mul(beta, pi), state.susceptible);
  ad::Var recoveries = ad::mul(gamma, state.infected);
  StateVars next{ad::relu(ad::sub(state.susceptible, infections)),
                 ad::relu(ad::sub(ad::add(state.infected, infections), recoveries)),
                 ad::relu(ad::add(state.recovered, recoveries))};
  return {std::move(next), std::move(infections)};
}

struct RolloutVars {
  ad::Var cases;  // [N, T]
  ad::Var susceptible;
  ad::Var infected;
  ad::Var recovered;
  ad::Var pi;  // transmission strength driving each day
};

// Recursive rollout over T = beta.cols() days with daily flows [N, N, T].
inline RolloutVars rollout(const StateVars& initial, const ad::Var& beta, const ad::Var& gamma,
                           const ad::Var& flows, const std::vector<double>& population) {
  const std::size_t n = population.size();
  if (beta.shape().size() != 2 || beta.shape()[0] != n || beta.shape() != gamma.shape())
    throw std::invalid_argument("rollout: beta/gamma must be [N, T] with N = " + std::to_string(n));
  const std::size_t horizon = beta.shape()[1];
  if (flows.shape() != Shape{n, n, horizon})
    throw std::invalid_argument("rollout: flows " + shape_string(flows.shape()) + " do not cover " +
                                std::to_string(horizon) + " days");
  ad::Var daily = ad::reshape(flows, {n * n, horizon});
  StateVars state = initial;
  std::vector<ad::Var> cases, s, i, r, p;
  for (std::size_t t = 0; t < horizon; ++t) {
    ad::Var h = ad::reshape(ad::column(daily, t), {n, n});
    ad::Var pi = transmission_strength(h, population, state.infected);
    StepVars out = step(state, ad::column(beta, t), ad::column(gamma, t), pi);
    p.push_back(pi);
    state = out.next;
    cases.push_back(out.cases);
    s.push_back(state.susceptible);
    i.push_back(state.infected);
    r.push_back(state.recovered);
  }
  return {ad::stack_columns(cases), ad::stack_columns(s), ad::stack_columns(i), ad::stack_columns(r), ad::stack_columns(p)};
}

// ------------------------------------------------------------ plain overloads

inline std::vector<double> transmission_strength(std::span<const double> flows, const PopulationVector& pop,
                                                 std::span<const double> infected) {
  const std::size_t n = pop.regions();
  ad::Var pi = transmission_strength(ad::Var::constant(Tensor({n, n}, {flows.begin(), flows.end()})), pop.sizes,
                                     ad::Var::constant(Tensor({n}, {infected.begin(), infected.end()})));
  return pi.value().vec();
}

struct StepResult {
  CompartmentState next;
  std::vector<double> cases;
  bool capped = false;   // some beta * Pi exceeded the susceptibles
  bool clamped = false;  // some compartment went negative before clamping
};

inline StepResult step(const CompartmentState& state, std::span<const double> beta, std::span<const double> gamma,
                       std::span<const double> pi) {
  const std::size_t n = state.regions();
  if (beta.size() != n || gamma.size() != n || pi.size() != n)
    throw std::invalid_argument("step: parameter length does not match " + std::to_string(n) + " regions");
  auto vec = [n](std::span<const double> v) { return ad::Var::constant(Tensor({n}, {v.begin(), v.end()})); };
  StepVars out = step(to_vars(state), vec(beta), vec(gamma), vec(pi));

  StepResult result;
  result.next = {out.next.susceptible.value().vec(), out.next.infected.value().vec(),
                 out.next.recovered.value().vec()};
  result.cases = out.cases.value().vec();
  for (std::size_t k = 0; k < n; ++k) {
    const double demand = beta[k] * pi[k];
    const double inf = result.cases[k];
    if (demand > state.susceptible[k]) result.capped = true;
    const double rec = gamma[k] * state.infected[k];
    if (state.susceptible[k] - inf < 0.0 || state.infected[k] + inf - rec < 0.0 || state.recovered[k] + rec < 0.0)
      result.clamped = true;
  }
  return result;
}

inline CompartmentState state_at(const RolloutVars& r, std::size_t t) {
  const std::size_t n = r.cases.shape()[0];
  CompartmentState s{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    s.susceptible[k] = r.susceptible.value()(k, t);
    s.infected[k] = r.infected.value()(k, t);
    s.recovered[k] = r.recovered.value()(k, t);
  }
  return s;
}

inline Forecast rollout(const CompartmentState& initial, const EpidemicParams& params, const MobilitySeries& flows,
                        const PopulationVector& pop) {
  RolloutVars r = rollout(to_vars(initial), ad::Var::constant(params.beta), ad::Var::constant(params.gamma),
                          ad::Var::constant(flows.flows), pop.sizes);
  return {r.cases.value(), r.susceptible.value(), r.infected.value(), r.recovered.value()};
}

}  // namespace stoep::metasir
