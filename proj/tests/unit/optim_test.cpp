#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "vefuse/optim.hpp"

using namespace vefuse;

namespace {

ParameterMap single(double value, double grad) {
  ParameterMap params;
  params.emplace("p", Tensor(Shape{1}, value, true));
  params.at("p").mutable_grad()[0] = grad;
  return params;
}

}  // namespace

TEST(AdamW, ZeroGradientZeroDecayLeavesParametersUnchanged) {
  std::mt19937_64 rng(4);
  ParameterMap params{{"w", xavier_uniform(3, 4, rng)}};
  const auto before = params.at("w").vec();
  params.at("w").mutable_grad();
  OptimizerState state;
  state.weight_decay = 0.0;
  state.schedule = {0.1, 0.0, 0};
  for (int i = 0; i < 5; ++i) adamw_step(state, params);
  EXPECT_EQ(params.at("w").vec(), before);
}

TEST(AdamW, HandTracedFirstStep) {
  // m = 0.1, v = 0.001, bias-corrected m = 1, v = 1, so p' = 1 - 0.1 * 1 / (1 + 1e-8).
  auto params = single(1.0, 1.0);
  OptimizerState state;
  state.weight_decay = 0.0;
  state.schedule = {0.1, 0.0, 0};
  adamw_step(state, params);
  EXPECT_NEAR(params.at("p")[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, DecoupledWeightDecay) {
  auto params = single(2.0, 0.0);
  OptimizerState state;
  state.weight_decay = 0.05;
  state.schedule = {0.1, 0.0, 0};
  adamw_step(state, params);
  EXPECT_NEAR(params.at("p")[0], 2.0 * (1.0 - 0.1 * 0.05), 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto params = single(1.0, std::numeric_limits<double>::quiet_NaN());
  OptimizerState state;
  try {
    adamw_step(state, params);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("'p'"), std::string::npos);
  }
}

TEST(AdamW, RejectsWarmupFractionOfOne) {
  auto params = single(1.0, 1.0);
  OptimizerState state;
  state.schedule.warmup_fraction = 1.0;
  EXPECT_THROW(adamw_step(state, params), ConfigurationError);
}

TEST(LinearSchedule, WarmupThenDecayToZero) {
  LinearSchedule s{1e-3, 0.05, 200};
  // step 4 of 200 is fraction 0.02 of training: 0.02 / 0.05 of the base rate.
  EXPECT_NEAR(s.rate(4), 0.4 * 1e-3, 1e-18);
  EXPECT_NEAR(s.rate(10), 1e-3, 1e-18);
  EXPECT_NEAR(s.rate(105), 1e-3 * (1.0 - 105.0 / 200.0) / 0.95, 1e-18);
  EXPECT_EQ(s.rate(200), 0.0);
  for (std::size_t t = 1; t < 10; ++t) EXPECT_LT(s.rate(t), s.rate(t + 1));
  for (std::size_t t = 10; t < 200; ++t) EXPECT_GT(s.rate(t), s.rate(t + 1));
}

TEST(Init, XavierBound) {
  std::mt19937_64 rng(0);
  Tensor w = xavier_uniform(10, 30, rng);
  const double bound = std::sqrt(6.0 / 40.0);
  for (double v : w.values()) EXPECT_LE(std::abs(v), bound);
  EXPECT_TRUE(w.requires_grad());
}
