#include <gtest/gtest.h>

#include <cmath>

#include "dnet/error.hpp"
#include "dnet/gradcheck.hpp"
#include "dnet/layers.hpp"
#include "support.hpp"

using namespace dnet;
using nn::Mode;
using support::random_tensor;

TEST(BatchNorm, TrainModeNormalizesEachChannel) {
  Rng rng(1);
  const auto x = random_tensor(rng, {4, 3, 5, 5}, -3, 7);
  auto state = nn::BnState<double>::identity(3);
  const auto y = nn::batchnorm_forward(x, state, Mode::Train);
  const auto [mean, var] = channel_moments(y);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(mean[c], 0.0, 1e-12);
    EXPECT_NEAR(var[c], 1.0, 1e-4);  // var / (var + eps)
  }
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  Rng rng(2);
  const auto x = random_tensor(rng, {3, 2, 4, 4}, 0, 4);
  auto state = nn::BnState<double>::identity(2);
  state.running_mean = Tensor<double>({2}, std::vector<double>{1.0, -1.0});
  state.running_var = Tensor<double>({2}, std::vector<double>{2.0, 0.5});
  const auto before = state;
  nn::batchnorm_forward(x, state, Mode::Train);
  const auto [mean, var] = channel_moments(x);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(state.running_mean[c], 0.9 * before.running_mean[c] + 0.1 * mean[c], 1e-14);
    EXPECT_NEAR(state.running_var[c], 0.9 * before.running_var[c] + 0.1 * var[c], 1e-14);
  }
}

TEST(BatchNorm, EvalModeUsesRunningStatisticsAndLeavesThemAlone) {
  auto state = nn::BnState<double>::identity(1);
  state.running_mean[0] = 2.0;
  state.running_var[0] = 4.0;
  state.gamma[0] = 3.0;
  state.beta[0] = 1.0;
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{2.0, 6.0});
  const auto y = nn::batchnorm_forward(x, state, Mode::Eval);
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 3.0 * 4.0 / std::sqrt(4.0 + 1e-5) + 1.0, 1e-12);
  EXPECT_EQ(state.running_mean[0], 2.0);
  EXPECT_EQ(state.running_var[0], 4.0);
}

TEST(BatchNorm, RejectsBadState) {
  auto state = nn::BnState<double>::identity(2);
  EXPECT_THROW(nn::batchnorm_forward(Tensor<double>({1, 3, 2, 2}), state, Mode::Train), ShapeError);
  state.running_var[0] = -1;
  EXPECT_THROW(state.validate(), ShapeError);
}

TEST(Composite, ShapesAndPadding) {
  Rng rng(3);
  auto p = nn::HParams<double>::init(5, 4, rng);
  const auto y = nn::composite_h_forward(random_tensor(rng, {2, 5, 7, 6}), p, Mode::Train);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 7, 6}));
}

TEST(Composite, FanInUniformBounds) {
  Rng rng(4);
  const auto p = nn::HParams<double>::init(6, 3, rng);
  const double bound = std::sqrt(1.0 / (6 * 9));
  double max_abs = 0;
  for (double w : p.conv_weight.data()) max_abs = std::max(max_abs, std::abs(w));
  EXPECT_LE(max_abs, bound);
  EXPECT_GT(max_abs, 0.8 * bound);
  for (double b : p.conv_bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(Linear, KnownValues) {
  Tensor<double> x({1, 2}, std::vector<double>{1, 2});
  Tensor<double> w({2, 2}, std::vector<double>{1, 0, 3, -1});
  Tensor<double> b({2}, std::vector<double>{0.5, 0.5});
  EXPECT_EQ(nn::linear_forward(x, w, b), (Tensor<double>({1, 2}, std::vector<double>{7.5, -1.5})));
}

class LayerGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(LayerGradient, BelowTolerance) {
  const auto r = gradcheck::run_preset(GetParam());
  EXPECT_LT(r.max_rel_err, gradcheck::kTolerance) << "worst param " << r.worst_param << " index "
                                                  << r.worst_index;
  EXPECT_GT(r.coordinates, 0u);
}

INSTANTIATE_TEST_SUITE_P(Presets, LayerGradient, ::testing::ValuesIn(gradcheck::preset_names()),
                         [](const auto& info) {
                           std::string n = info.param;
                           for (auto& ch : n)
                             if (ch == '-') ch = '_';
                           return n;
                         });

TEST(LayerGradient, UnknownPresetThrows) {
  EXPECT_THROW(gradcheck::run_preset("nope"), ConfigError);
}
