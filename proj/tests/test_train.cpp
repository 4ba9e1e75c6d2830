#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "stoep/config.hpp"
#include "stoep/train.hpp"

using namespace stoep;

namespace {

struct Fixture {
  RunConfig cfg = [] {
    RunConfig c = RunConfig::tiny();
    c.synthetic.days = 100;
    c.train.batch_size = 16;
    c.train.max_epochs = 4;
    c.train.patience = 2;
    c.train.curriculum_step = 3;
    c.train.learning_rate = 5e-3;
    return c;
  }();
  data::Dataset ds = data::generate_synthetic(cfg.synthetic).dataset;
  data::Split split = data::chronological_split(ds);
  data::WindowSet train = data::windowize(split.train, cfg.model.t_in, cfg.model.t_out);
  data::WindowSet validation = data::windowize(split.validation, cfg.model.t_in, cfg.model.t_out);

  StoepModel model() const {
    ModelConfig m = cfg.model;
    m.regions = ds.regions();
    m.channels = ds.channels();
    StoepModel out(m, cfg.thresholds);
    out.scaler = FeatureScaler::fit(split.train.observations);
    return out;
  }
};

std::vector<std::vector<double>> values(StoepModel& m) {
  std::vector<std::vector<double>> out;
  for (auto& p : m.parameters()) out.push_back(p.var.value().vec());
  return out;
}

}  // namespace

TEST(MaeLoss, Examples) {
  Tensor y({1, 3}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(mae_loss(Tensor({1, 3}, {1, 2, 3}), y), 1.0);
  EXPECT_EQ(mae_loss(y, y), 0.0);
}

TEST(Curriculum, Schedule) {
  EXPECT_EQ(curriculum_horizon(0, 300, 14), 1u);
  EXPECT_EQ(curriculum_horizon(450, 300, 14), 2u);
  EXPECT_EQ(curriculum_horizon(13 * 300, 300, 14), 14u);
  EXPECT_EQ(curriculum_horizon(1000000, 300, 14), 14u);
  EXPECT_EQ(curriculum_horizon(299, 300, 14), 1u);
  EXPECT_EQ(curriculum_horizon(300, 300, 14), 2u);
}

TEST(Curriculum, LeadingColumns) {
  Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(leading_columns(m, 2).vec(), (std::vector<double>{1, 2, 4, 5}));
}

TEST(AdamW, OneStepMatchesHandFormula) {
  ad::Var theta = ad::Var::parameter(Tensor({1}, 1.0));
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt({theta}, cfg);
  ad::backward(ad::scale(theta, 0.5));
  opt.step();
  const double g = 0.5, m = 0.1 * g, v = 0.001 * g * g;
  const double m_hat = m / (1 - 0.9), v_hat = v / (1 - 0.999);
  const double expected = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(theta.value()[0], expected, 1e-15);
}

TEST(AdamW, TwoStepsAccumulateMoments) {
  ad::Var theta = ad::Var::parameter(Tensor({1}, 2.0));
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({theta}, cfg);
  double m = 0, v = 0, x = 2.0;
  for (int t = 1; t <= 2; ++t) {
    opt.zero_grad();
    ad::backward(ad::mul(theta, theta));  // grad 2x
    opt.step();
    const double g = 2 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 1e-3 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(theta.value()[0], x, 1e-15);
  EXPECT_EQ(opt.steps(), 2u);
}

TEST(TrainEpoch, ZeroLearningRateLeavesParameters) {
  Fixture f;
  StoepModel model = f.model();
  const auto before = values(model);
  std::vector<ad::Var> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  TrainConfig tc = f.cfg.train;
  tc.learning_rate = 0.0;
  AdamW opt(params, tc.optimizer());
  TrainState state{0, Rng(1)};
  const double loss = train_epoch(model, f.train, opt, state, tc);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  EXPECT_EQ(values(model), before);
  EXPECT_EQ(state.iteration, (f.train.windows.size() + 15) / 16);
}

TEST(TrainEpoch, NonFiniteLossRaisesWithGroupNorms) {
  Fixture f;
  StoepModel model = f.model();
  model.spe().heads.beta_b.mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<ad::Var> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  AdamW opt(params, f.cfg.train.optimizer());
  TrainState state;
  try {
    train_epoch(model, f.train, opt, state, f.cfg.train);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("spe.heads"), std::string::npos);
  }
}

TEST(Fit, Deterministic) {
  Fixture f;
  StoepModel a = f.model(), b = f.model();
  auto ra = fit(a, f.train, f.validation, f.cfg.train);
  auto rb = fit(b, f.train, f.validation, f.cfg.train);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].validation_loss, rb.history[i].validation_loss);
  }
  EXPECT_EQ(values(a), values(b));
}

TEST(Fit, EarlyStoppingFollowsPatience) {
  for (std::size_t patience : {0u, 1u}) {
    Fixture f;
    f.cfg.train.patience = patience;
    f.cfg.train.max_epochs = 8;
    f.cfg.train.learning_rate = 0.05;
    StoepModel model = f.model();
    auto r = fit(model, f.train, f.validation, f.cfg.train);
    // Replay the stopping rule over the recorded history.
    double best = std::numeric_limits<double>::infinity();
    std::size_t since = 0, best_epoch = 0;
    bool stop = false;
    std::size_t epochs = 0;
    for (const auto& s : r.history) {
      ASSERT_FALSE(stop);
      ++epochs;
      if (s.validation_loss < best) {
        best = s.validation_loss;
        best_epoch = s.epoch;
        since = 0;
      } else if (++since > patience) {
        stop = true;
      }
    }
    EXPECT_EQ(r.stopped_early, stop);
    if (!stop) {
      EXPECT_EQ(epochs, 8u);
    }
    EXPECT_EQ(r.best.epoch, best_epoch);
    EXPECT_EQ(r.best.validation_loss, best);
  }
}

TEST(Fit, BestCheckpointReproducesValidationLoss) {
  Fixture f;
  StoepModel model = f.model();
  auto r = fit(model, f.train, f.validation, f.cfg.train);
  StoepModel best = restore(r.best);
  EXPECT_EQ(evaluate_loss(best, f.validation), r.best.validation_loss);
}

TEST(Fit, CurriculumHorizonGrows) {
  Fixture f;
  StoepModel model = f.model();
  auto r = fit(model, f.train, f.validation, f.cfg.train);
  const std::size_t per_epoch = (f.train.windows.size() + 15) / 16;
  for (const auto& s : r.history)
    EXPECT_EQ(s.horizon, curriculum_horizon(s.epoch * per_epoch, f.cfg.train.curriculum_step, 4));
}

TEST(GradCheck, RelativeError) {
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-6), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0, 1e-6), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-6), 1e-3);
}

TEST(GradCheck, LinearLiftIsExact) {
  Rng rng(6);
  spe::FeatureLift lift{ad::Var::parameter(xavier(4, 3, rng)), ad::Var::parameter(uniform_tensor({3}, 1.0, rng))};
  const Tensor x = uniform_tensor({2, 5, 4}, 1.0, rng), c = uniform_tensor({2, 5, 3}, 1.0, rng);
  auto loss = [&] { return ad::sum(ad::mul_const(spe::lift_features(ad::Var::constant(x), lift), c)); };
  ad::backward(loss());
  for (ad::Var* v : {&lift.weight, &lift.bias})
    for (std::size_t i = 0; i < v->size(); ++i) {
      const double orig = v->value()[i];
      v->mutable_value()[i] = orig + 1e-5;
      const double up = loss().item();
      v->mutable_value()[i] = orig - 1e-5;
      const double down = loss().item();
      v->mutable_value()[i] = orig;
      EXPECT_LT(relative_error(v->grad()[i], (up - down) / 2e-5, 1e-6), 1e-8);
    }
}

TEST(GradCheck, TinyModelEveryGroupPasses) {
  Fixture f;
  StoepModel model = f.model();
  model.memory().scale.mutable_value()[0] = 30.0;
  model.spe().prior.residual.mutable_value()[0] = 0.5;
  const auto& w = f.train.windows[20];
  double scale = 0.0;
  for (double v : w.target.values()) scale += std::fabs(v);
  const GradCheckReport report = gradient_check(model, w, f.train.population, scale / w.target.size());
  EXPECT_EQ(report.groups.size(), 7u);
  for (const auto& g : report.groups) {
    EXPECT_TRUE(g.passed) << g.group << " max rel err " << g.max_relative_error;
    EXPECT_GT(g.max_abs_gradient, 0.0) << g.group;
    EXPECT_EQ(g.checked, std::min<std::size_t>(g.scalars, 50));
  }
  for (auto& p : model.parameters())
    for (double v : p.var.grad().values()) EXPECT_EQ(v, 0.0);
}
