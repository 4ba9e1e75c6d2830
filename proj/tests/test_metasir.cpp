#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <tuple>

#include "stoep/metasir.hpp"
#include "stoep/random.hpp"

using namespace stoep;
using metasir::CompartmentState;

namespace {

PopulationVector pop(std::vector<double> p) { return {std::move(p)}; }

MobilitySeries constant_flows(const Tensor& day, std::size_t horizon) {
  const std::size_t n = day.dim(0);
  Tensor f({n, n, horizon});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < horizon; ++t) f(i, j, t) = day(i, j);
  return {f, HorizonKind::Forecast};
}

}  // namespace

TEST(TransmissionStrength, WorkedTwoRegionExample) {
  auto pi = metasir::transmission_strength(std::vector<double>{0, 5, 5, 0}, pop({100, 100}),
                                           std::vector<double>{10, 20});
  EXPECT_DOUBLE_EQ(pi[0], 2.0);
  EXPECT_DOUBLE_EQ(pi[1], 1.0);
}

TEST(TransmissionStrength, ZeroFlowsOrZeroInfected) {
  auto a = metasir::transmission_strength(std::vector<double>(4, 0.0), pop({100, 50}), std::vector<double>{10, 20});
  EXPECT_EQ(a, (std::vector<double>{0, 0}));
  auto b = metasir::transmission_strength(std::vector<double>{3, 5, 7, 1}, pop({100, 50}), std::vector<double>{0, 0});
  EXPECT_EQ(b, (std::vector<double>{0, 0}));
}

TEST(TransmissionStrength, RejectsBadShapes) {
  EXPECT_THROW(metasir::transmission_strength(std::vector<double>{1, 2, 3}, pop({1, 1}), std::vector<double>{1, 1}),
               std::invalid_argument);
}

TEST(Step, HandEulerStep) {
  CompartmentState s{{80}, {10}, {10}};
  auto r = metasir::step(s, std::vector<double>{0.5}, std::vector<double>{0.1}, std::vector<double>{2.0});
  EXPECT_DOUBLE_EQ(r.cases[0], 1.0);
  EXPECT_DOUBLE_EQ(r.next.susceptible[0], 79.0);
  EXPECT_DOUBLE_EQ(r.next.infected[0], 10.0);
  EXPECT_DOUBLE_EQ(r.next.recovered[0], 11.0);
  EXPECT_DOUBLE_EQ(r.next.total(0), 100.0);
  EXPECT_FALSE(r.capped);
  EXPECT_FALSE(r.clamped);
}

TEST(Step, FrozenDynamics) {
  CompartmentState s{{50, 7}, {3, 4}, {1, 0}};
  auto r = metasir::step(s, std::vector<double>{0, 0}, std::vector<double>{0, 0}, std::vector<double>{9, 3});
  EXPECT_EQ(r.next.susceptible, s.susceptible);
  EXPECT_EQ(r.next.infected, s.infected);
  EXPECT_EQ(r.next.recovered, s.recovered);
  EXPECT_EQ(r.cases, (std::vector<double>{0, 0}));
}

TEST(Step, SusceptibleCap) {
  CompartmentState s{{5}, {10}, {0}};
  auto r = metasir::step(s, std::vector<double>{0.9}, std::vector<double>{0.1}, std::vector<double>{1000});
  EXPECT_DOUBLE_EQ(r.cases[0], 5.0);
  EXPECT_DOUBLE_EQ(r.next.susceptible[0], 0.0);
  EXPECT_TRUE(r.capped);
}

TEST(Step, MonotoneInBeta) {
  CompartmentState s{{500, 300}, {20, 5}, {0, 0}};
  double prev = -1.0;
  for (double b = 0.0; b <= 1.0; b += 0.05) {
    auto r = metasir::step(s, std::vector<double>{b, 0.3}, std::vector<double>{0.1, 0.1}, std::vector<double>{30, 2});
    EXPECT_GE(r.cases[0], prev);
    prev = r.cases[0];
  }
}

TEST(Rollout, SingleRegionSteadyState) {
  Tensor day({1, 1}, {10.0});
  EpidemicParams p{Tensor({1, 3}, 0.5), Tensor({1, 3}, 0.1)};
  Forecast f = metasir::rollout(CompartmentState{{90}, {10}, {0}}, p, constant_flows(day, 3), pop({100}));
  // Independent three-step loop.
  double s = 90, i = 10, r = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    const double pi = (10.0 / 100 + 10.0 / 100) * i;
    const double inf = std::min(0.5 * pi, s), rec = 0.1 * i;
    s -= inf;
    i += inf - rec;
    r += rec;
    EXPECT_DOUBLE_EQ(f.cases(0, t), inf);
    EXPECT_DOUBLE_EQ(f.infected(0, t), i);
  }
  EXPECT_DOUBLE_EQ(f.cases(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(f.infected(0, 0), 10.0);
}

TEST(Rollout, PureRecoveryDecay) {
  Tensor day({2, 2}, {5, 1, 2, 7});
  Tensor gamma({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.05, 0.05, 0.5, 0.9});
  EpidemicParams p{Tensor({2, 4}), gamma};
  Forecast f = metasir::rollout(CompartmentState{{10, 10}, {100, 40}, {0, 0}}, p, constant_flows(day, 4), pop({50, 60}));
  for (std::size_t n = 0; n < 2; ++n) {
    double expect = n == 0 ? 100.0 : 40.0;
    for (std::size_t t = 0; t < 4; ++t) {
      expect *= 1.0 - gamma(n, t);
      EXPECT_NEAR(f.infected(n, t), expect, 1e-12);
      EXPECT_EQ(f.cases(n, t), 0.0);
    }
  }
}

TEST(Rollout, SplitHorizonComposes) {
  Rng rng(4);
  const std::size_t n = 3, a = 2, b = 3;
  Tensor flows = uniform_tensor({n, n, a + b}, 1.0, rng);
  for (std::size_t i = 0; i < flows.size(); ++i) flows[i] = 20.0 * std::fabs(flows[i]);
  Tensor beta = uniform_tensor({n, a + b}, 1.0, rng), gamma = uniform_tensor({n, a + b}, 1.0, rng);
  for (std::size_t i = 0; i < beta.size(); ++i) {
    beta[i] = std::fabs(beta[i]) * 0.5;
    gamma[i] = std::fabs(gamma[i]) * 0.3;
  }
  PopulationVector p{{300, 200, 500}};
  CompartmentState s0{{250, 150, 480}, {30, 40, 10}, {20, 10, 10}};

  auto slice = [](const Tensor& t, std::size_t from, std::size_t len) {
    Shape sh = t.shape();
    sh.back() = len;
    Tensor out(sh);
    const std::size_t rows = t.size() / t.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < len; ++k) out[r * len + k] = t[r * t.shape().back() + from + k];
    return out;
  };
  Forecast full = metasir::rollout(s0, {beta, gamma}, {flows, HorizonKind::Forecast}, p);
  Forecast first = metasir::rollout(s0, {slice(beta, 0, a), slice(gamma, 0, a)}, {slice(flows, 0, a), HorizonKind::Forecast}, p);
  CompartmentState mid{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    mid.susceptible[k] = first.susceptible(k, a - 1);
    mid.infected[k] = first.infected(k, a - 1);
    mid.recovered[k] = first.recovered(k, a - 1);
  }
  Forecast second = metasir::rollout(mid, {slice(beta, a, b), slice(gamma, a, b)}, {slice(flows, a, b), HorizonKind::Forecast}, p);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t t = 0; t < b; ++t) EXPECT_EQ(full.cases(k, a + t), second.cases(k, t));
}

TEST(Rollout, ClassicalSirEquivalence) {
  // N=1 with h_11 = P/2 makes Pi equal to I.
  const double P = 1000, beta = 0.3, gamma = 0.1;
  Tensor day({1, 1}, {P / 2});
  CompartmentState s{{900}, {60}, {40}};
  auto r = metasir::step(s, std::vector<double>{beta}, std::vector<double>{gamma},
                         metasir::transmission_strength(day.vec(), pop({P}), s.infected));
  EXPECT_NEAR(r.next.susceptible[0], 900 - beta * 60, 1e-12);
  EXPECT_NEAR(r.next.infected[0], 60 + beta * 60 - gamma * 60, 1e-12);
  EXPECT_NEAR(r.next.recovered[0], 40 + gamma * 60, 1e-12);
}

TEST(Rollout, NonnegativeUnderLargeParameters) {
  Tensor day({2, 2}, {1e6, 1e6, 1e6, 1e6});
  EpidemicParams p{Tensor({2, 5}, 0.99), Tensor({2, 5}, 0.99)};
  Forecast f = metasir::rollout(CompartmentState{{10, 3}, {50, 90}, {0, 0}}, p, constant_flows(day, 5), pop({60, 93}));
  for (const Tensor* t : {&f.cases, &f.susceptible, &f.infected, &f.recovered})
    for (double v : t->values()) EXPECT_GE(v, 0.0);
}

TEST(Rollout, GradientMatchesFiniteDifference) {
  const std::size_t n = 2, horizon = 3;
  Tensor flows({n, n, horizon}, {40, 41, 42, 5, 6, 7, 3, 2, 1, 30, 31, 33});
  Tensor beta({n, horizon}, {0.2, 0.25, 0.3, 0.1, 0.15, 0.2});
  Tensor gamma({n, horizon}, 0.1);
  std::vector<double> p{400, 300};
  auto loss = [&](const Tensor& b, const Tensor& g, const Tensor& h) {
    auto r = metasir::rollout(metasir::to_vars(CompartmentState{{350, 250}, {30, 20}, {20, 30}}),
                              ad::Var::parameter(b), ad::Var::parameter(g), ad::Var::parameter(h), p);
    return ad::sum(r.cases);
  };
  ad::Var bv = ad::Var::parameter(beta), gv = ad::Var::parameter(gamma), hv = ad::Var::parameter(flows);
  auto r = metasir::rollout(metasir::to_vars(CompartmentState{{350, 250}, {30, 20}, {20, 30}}), bv, gv, hv, p);
  ad::backward(ad::sum(r.cases));
  for (auto [var, base, which] : {std::tuple{&bv, beta, 0}, std::tuple{&gv, gamma, 1}, std::tuple{&hv, flows, 2}}) {
    for (std::size_t i = 0; i < base.size(); ++i) {
      Tensor up = base, down = base;
      up[i] += 1e-6;
      down[i] -= 1e-6;
      auto eval = [&](const Tensor& t) {
        return loss(which == 0 ? t : beta, which == 1 ? t : gamma, which == 2 ? t : flows).item();
      };
      const double numeric = (eval(up) - eval(down)) / 2e-6;
      EXPECT_NEAR(var->grad()[i], numeric, 1e-6 * std::max(1.0, std::fabs(numeric)));
    }
  }
}
