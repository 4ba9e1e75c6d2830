#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "stoep/eval.hpp"

using namespace stoep;

namespace {

Tensor leading_row(const Tensor& m, std::size_t r) {
  Tensor out({1, m.dim(1)});
  for (std::size_t t = 0; t < m.dim(1); ++t) out(0, t) = m(r, t);
  return out;
}

}  // namespace

TEST(Metrics, PerfectPrediction) {
  const auto m = eval::metrics(std::vector<double>{1, 5, 2}, std::vector<double>{1, 5, 2});
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.smape, 0.0);
  EXPECT_EQ(m.rae, 0.0);
  EXPECT_EQ(m.count, 3u);
}

TEST(Metrics, HandFixture) {
  const auto m = eval::metrics(std::vector<double>{1, 2}, std::vector<double>{1, 4});
  EXPECT_NEAR(m.rmse, std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(m.mae, 1.0, 1e-12);
  EXPECT_NEAR(m.smape, 100.0 / 3.0, 1e-9);
  EXPECT_NEAR(m.rae, 2.0 / 3.0, 1e-12);
  EXPECT_FALSE(m.rae_undefined);
}

TEST(Metrics, ConstantTruthLeavesRaeUndefined) {
  const auto m = eval::metrics(std::vector<double>{1, 2, 3}, std::vector<double>{2, 2, 2});
  EXPECT_TRUE(m.rae_undefined);
  EXPECT_TRUE(std::isnan(m.rae));
  EXPECT_NEAR(m.mae, 2.0 / 3.0, 1e-15);
}

TEST(Metrics, ZeroPairsContributeNoSmape) {
  const auto m = eval::metrics(std::vector<double>{0, 1}, std::vector<double>{0, 3});
  EXPECT_NEAR(m.smape, 0.5 * 200.0 * 2.0 / 4.0, 1e-12);
}

TEST(Metrics, ShapeErrors) {
  EXPECT_THROW(eval::metrics(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
  EXPECT_THROW(eval::metrics(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
  eval::PredictionSet set{{Tensor({2, 3})}, {Tensor({2, 4})}};
  EXPECT_THROW(eval::metrics(set, 1, 3), std::invalid_argument);
}

TEST(HorizonReport, ErrorOnlyAtLastIndex) {
  Tensor truth({2, 14});
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = static_cast<double>(i % 5);
  Tensor pred = truth;
  pred(0, 13) += 4.0;
  pred(1, 13) -= 2.0;
  const auto rows = eval::horizon_report({{pred}, {truth}});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(eval::row(rows, "3d").metrics.mae, 0.0);
  EXPECT_EQ(eval::row(rows, "7d").metrics.rmse, 0.0);
  EXPECT_DOUBLE_EQ(eval::row(rows, "14d").metrics.mae, 3.0);
  EXPECT_DOUBLE_EQ(eval::row(rows, "overall").metrics.mae, 6.0 / 28.0);
  EXPECT_THROW(eval::row(rows, "5d"), std::invalid_argument);
}

TEST(HorizonReport, HomogeneousErrorGivesEqualRows) {
  Tensor truth({3, 14}), pred({3, 14});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < 14; ++t) {
      truth(i, t) = static_cast<double>(i * 10);
      pred(i, t) = truth(i, t) + (i == 1 ? -1.5 : 1.5);
    }
  const auto rows = eval::horizon_report({{pred}, {truth}});
  for (const auto& r : rows) {
    EXPECT_DOUBLE_EQ(r.metrics.rmse, 1.5);
    EXPECT_DOUBLE_EQ(r.metrics.mae, 1.5);
    EXPECT_NEAR(r.metrics.smape, rows[0].metrics.smape, 1e-12);
  }
}

TEST(HorizonReport, TwoWindowSpreadsheetOracle) {
  // Window 1: region 0 preds [1,2,3,...], region 1 zeros. Window 2 shifts truth.
  eval::PredictionSet set;
  for (int w = 0; w < 2; ++w) {
    Tensor pred({2, 14}), truth({2, 14});
    for (std::size_t t = 0; t < 14; ++t) {
      pred(0, t) = static_cast<double>(t + 1);
      truth(0, t) = static_cast<double>(t + 1 + w);
      pred(1, t) = 10.0;
      truth(1, t) = 10.0 - static_cast<double>(w) * 2.0 * static_cast<double>(t + 1);
    }
    set.pred.push_back(pred);
    set.truth.push_back(truth);
  }
  const auto rows = eval::horizon_report(set);
  // 7d slice: errors {0, 0, -1, 14} -> abs {0, 0, 1, 14}.
  const auto& r7 = eval::row(rows, "7d").metrics;
  EXPECT_EQ(r7.count, 4u);
  EXPECT_DOUBLE_EQ(r7.mae, 15.0 / 4.0);
  EXPECT_DOUBLE_EQ(r7.rmse, std::sqrt((1.0 + 196.0) / 4.0));
  // truths {7, 10, 8, -4}: mean 5.25, sum |y - mean| = 1.75 + 4.75 + 2.75 + 9.25 = 18.5
  EXPECT_DOUBLE_EQ(r7.rae, 15.0 / 18.5);
  const double smape = (200.0 * 1.0 / 15.0 + 200.0 * 14.0 / 14.0) / 4.0;
  EXPECT_NEAR(r7.smape, smape, 1e-12);
  EXPECT_EQ(eval::row(rows, "overall").metrics.count, 56u);
}

TEST(HorizonReport, RejectsHorizonBeyondTout) {
  eval::PredictionSet set{{Tensor({1, 7})}, {Tensor({1, 7})}};
  EXPECT_THROW(eval::horizon_report(set), std::invalid_argument);
  EXPECT_EQ(eval::horizon_report(set, {3, 7}).size(), 3u);
}

TEST(Persistence, ConstantAndRamp) {
  data::Dataset ds;
  ds.region_names = {"A", "B"};
  for (int t = 0; t < 30; ++t) ds.dates.push_back(data::add_days("2020-01-01", t));
  ds.channel_names = {"cases", "S", "I", "R"};
  ds.observations = Tensor({2, 30, 4});
  const double slope = 2.5;
  for (std::size_t t = 0; t < 30; ++t) {
    ds.observations(0, t, 0) = 7.0;
    ds.observations(1, t, 0) = slope * static_cast<double>(t);
  }
  ds.mobility = Tensor({2, 2, 30});
  ds.population.sizes = {1, 1};
  const auto set = data::windowize(ds, 14, 14);
  const auto preds = eval::persistence_predictions(set);
  for (const auto& p : preds.pred)
    for (std::size_t t = 1; t < 14; ++t) {
      EXPECT_EQ(p(0, t), p(0, 0));
      EXPECT_EQ(p(1, t), p(1, 0));
    }
  eval::PredictionSet constant, ramp;
  for (std::size_t w = 0; w < preds.pred.size(); ++w) {
    constant.pred.push_back(leading_row(preds.pred[w], 0));
    constant.truth.push_back(leading_row(preds.truth[w], 0));
    ramp.pred.push_back(leading_row(preds.pred[w], 1));
    ramp.truth.push_back(leading_row(preds.truth[w], 1));
  }
  EXPECT_EQ(eval::metrics(constant, 1, 14).mae, 0.0);
  for (std::size_t i = 1; i <= 14; ++i) EXPECT_DOUBLE_EQ(eval::metrics(ramp, i, i).mae, slope * static_cast<double>(i));
}

TEST(Report, CsvAndTable) {
  Tensor truth({1, 14}, 3.0), pred({1, 14}, 4.0);
  const auto rows = eval::horizon_report({{pred}, {truth}});
  std::ostringstream csv, table;
  eval::write_csv(csv, {{"stoep", rows}});
  eval::write_table(table, {{"stoep", rows}});
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "model,horizon,rmse,mae,smape,rae,rae_undefined");
  EXPECT_NE(csv.str().find("stoep,3d,1,1,"), std::string::npos);
  EXPECT_NE(csv.str().find(",nan,1\n"), std::string::npos);
  EXPECT_NE(table.str().find("undef"), std::string::npos);
}
