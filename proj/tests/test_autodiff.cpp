#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "stoep/autodiff.hpp"
#include "stoep/random.hpp"

namespace ad = stoep::ad;
using stoep::Rng;
using stoep::Shape;
using stoep::Tensor;

namespace {

// Central-difference check of d sum(w * f(x)) / dx for a fixed random weighting w.
void expect_gradients(const std::function<ad::Var(const std::vector<ad::Var>&)>& f, std::vector<Tensor> inputs,
                      double tol = 1e-7) {
  Rng rng(99);
  std::vector<ad::Var> vars;
  for (auto& t : inputs) vars.push_back(ad::Var::parameter(t));
  ad::Var out = f(vars);
  const Tensor weights = stoep::uniform_tensor(out.shape(), 1.0, rng);
  auto objective = [&](const std::vector<ad::Var>& v) {
    return ad::sum(ad::mul_const(f(v), weights));
  };
  ad::backward(objective(vars));
  for (std::size_t k = 0; k < vars.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double h = 1e-6;
      std::vector<ad::Var> up, down;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        Tensor a = inputs[j], b = inputs[j];
        if (j == k) {
          a[i] += h;
          b[i] -= h;
        }
        up.push_back(ad::Var::constant(a));
        down.push_back(ad::Var::constant(b));
      }
      const double numeric = (objective(up).item() - objective(down).item()) / (2 * h);
      EXPECT_NEAR(vars[k].grad()[i], numeric, tol * std::max(1.0, std::fabs(numeric)))
          << "input " << k << " element " << i;
    }
  }
}

Tensor random(Shape s, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  return stoep::uniform_tensor(std::move(s), bound, rng);
}

Tensor positive(Shape s, std::uint64_t seed) {
  Tensor t = random(std::move(s), seed);
  for (auto& v : t.values()) v = 0.5 + std::fabs(v);
  return t;
}

}  // namespace

TEST(Autodiff, ElementwiseGradients) {
  expect_gradients([](auto& v) { return ad::add(v[0], v[1]); }, {random({3, 2}, 1), random({3, 2}, 2)});
  expect_gradients([](auto& v) { return ad::sub(v[0], v[1]); }, {random({3, 2}, 1), random({3, 2}, 2)});
  expect_gradients([](auto& v) { return ad::mul(v[0], v[1]); }, {random({3, 2}, 1), random({3, 2}, 2)});
  expect_gradients([](auto& v) { return ad::scale_by(v[0], v[1]); }, {random({4}, 3), random({1}, 4)});
  expect_gradients([](auto& v) { return ad::shift_by(v[0], v[1]); }, {random({4}, 3), random({1}, 4)});
  expect_gradients([](auto& v) { return ad::lerp(v[0], v[1], v[2]); },
                   {random({2, 3}, 5), random({2, 3}, 6), random({1}, 7)});
  expect_gradients([](auto& v) { return ad::sigmoid(v[0]); }, {random({5}, 8, 3.0)});
  expect_gradients([](auto& v) { return ad::tanh(v[0]); }, {random({5}, 9, 2.0)});
  expect_gradients([](auto& v) { return ad::abs(v[0]); }, {positive({5}, 10)});
  expect_gradients([](auto& v) { return ad::relu(ad::add_const(v[0], 0.25)); }, {positive({5}, 11)});
  expect_gradients([](auto& v) { return ad::minimum(v[0], v[1]); }, {random({6}, 12), random({6}, 13)});
  expect_gradients([](auto& v) { return ad::one_minus(v[0]); }, {random({3}, 14)});
}

TEST(Autodiff, ShapeGradients) {
  expect_gradients([](auto& v) { return ad::transpose(v[0]); }, {random({2, 3}, 1)});
  expect_gradients([](auto& v) { return ad::swap_last(v[0]); }, {random({2, 3, 4}, 2)});
  expect_gradients([](auto& v) { return ad::slice_cols(v[0], 1, 2); }, {random({3, 4}, 3)});
  expect_gradients([](auto& v) { return ad::stack_columns({v[0], v[1], v[0]}); }, {random({3}, 4), random({3}, 5)});
  expect_gradients([](auto& v) { return ad::time_shift(v[0], 2); }, {random({2, 5, 3}, 6)});
  expect_gradients([](auto& v) { return ad::mean_last(v[0]); }, {random({2, 2, 4}, 7)});
}

TEST(Autodiff, LinearAlgebraGradients) {
  expect_gradients([](auto& v) { return ad::matmul(v[0], v[1]); }, {random({3, 4}, 1), random({4, 2, 3}, 2)});
  expect_gradients([](auto& v) { return ad::linear(v[0], v[1], v[2]); },
                   {random({2, 3, 4}, 3), random({4, 5}, 4), random({5}, 5)});
  expect_gradients([](auto& v) { return ad::linear(v[0], v[1]); }, {random({3, 4}, 6), random({4, 2}, 7)});
  expect_gradients([](auto& v) { return ad::softmax_rows(v[0]); }, {random({3, 4}, 8, 2.0)});
  expect_gradients([](auto& v) { return ad::row_normalize(v[0], 1e-8); }, {positive({3, 3}, 9)});
  expect_gradients([](auto& v) { return ad::attention_average(v[0], v[1], 2); },
                   {random({3, 5, 4}, 10), random({3, 5, 4}, 11)});
}

TEST(Autodiff, MeanAbsErrorGradient) {
  Tensor truth({3}, {1.0, 1.0, 1.0});
  ad::Var pred = ad::Var::parameter(Tensor({3}, {1.5, 2.0, -3.0}));
  ad::Var loss = ad::mean_abs_error(pred, truth);
  EXPECT_DOUBLE_EQ(loss.item(), (0.5 + 1.0 + 4.0) / 3.0);
  ad::backward(loss);
  EXPECT_DOUBLE_EQ(pred.grad()[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(pred.grad()[2], -1.0 / 3.0);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  ad::Var x = ad::Var::parameter(Tensor({1}, {3.0}));
  ad::Var y = ad::mul(x, x);
  ad::Var z = ad::add(y, y);  // 2 x^2
  ad::backward(z);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, NoGradGuardBuildsNoGraph) {
  ad::Var x = ad::Var::parameter(Tensor({2}, {1.0, 2.0}));
  {
    ad::NoGradGuard guard;
    ad::Var y = ad::mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
  }
  EXPECT_TRUE(ad::mul(x, x).requires_grad());
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  ad::Var s = ad::softmax_rows(ad::Var::constant(random({4, 6}, 3, 50.0)));
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 6; ++j) row += s.value()(i, j);
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(Autodiff, ShapeErrors) {
  ad::Var a = ad::Var::constant(Tensor({2, 3}));
  ad::Var b = ad::Var::constant(Tensor({3, 2}));
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(ad::matmul(a, a), std::invalid_argument);
  EXPECT_THROW(ad::backward(a), std::invalid_argument);
}
