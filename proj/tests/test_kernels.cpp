#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dnet/error.hpp"
#include "dnet/kernels.hpp"
#include "dnet/parallel.hpp"
#include "oracles.hpp"
#include "support.hpp"

using dnet::ConvSpec;
using dnet::Rng;
using dnet::Shape;
using dnet::Tensor;
using support::between;
using support::random_tensor;

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Matmul, MatchesNaiveOnRandomShapes) {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = between(rng, 1, 70), k = between(rng, 1, 300), n = between(rng, 1, 140);
    const auto a = random_tensor(rng, {m, k});
    const auto b = random_tensor(rng, {k, n});
    EXPECT_LT(max_abs_diff(dnet::matmul(a, b), oracle::naive_matmul(a, b)), 1e-12)
        << m << "x" << k << "x" << n;
  }
}

TEST(Matmul, TiledFloatIsBitIdenticalToNaiveLoopOrder) {
  // Both accumulate every output over k in increasing order.
  Rng rng(2);
  const auto a = random_tensor<float>(rng, {37, 300});
  const auto b = random_tensor<float>(rng, {300, 150});
  EXPECT_EQ(dnet::matmul(a, b), oracle::naive_matmul(a, b));
}

TEST(Matmul, ThreadCountDoesNotChangeBits) {
  Rng rng(3);
  const auto a = random_tensor<float>(rng, {256, 128});
  const auto b = random_tensor<float>(rng, {128, 96});
  const auto one = dnet::matmul(a, b);
  dnet::set_num_threads(4);
  const auto four = dnet::matmul(a, b);
  dnet::set_num_threads(1);
  EXPECT_EQ(one, four);
}

TEST(Matmul, ShapeAndFiniteChecks) {
  EXPECT_THROW(dnet::matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), dnet::ShapeError);
  Tensor<double> a({1, 1}, std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(dnet::matmul(a, Tensor<double>({1, 1})), dnet::NumericError);
}

TEST(Conv2d, MatchesDirectConvolutionOnRandomGeometry) {
  Rng rng(4);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = between(rng, 1, 3) * 2 - 1;  // 1, 3, 5
    const std::size_t stride = between(rng, 1, 2), pad = between(rng, 0, k / 2 + 1);
    const std::size_t h = between(rng, k, 9), w = between(rng, k, 9);
    const std::size_t n = between(rng, 1, 3), c = between(rng, 1, 4), o = between(rng, 1, 5);
    const auto x = random_tensor(rng, {n, c, h, w});
    const auto wt = random_tensor(rng, {o, c, k, k});
    const auto b = random_tensor(rng, {o});
    const ConvSpec spec{k, k, stride, pad};
    EXPECT_LT(max_abs_diff(dnet::conv2d(x, wt, b, spec), oracle::direct_conv2d(x, wt, b, stride, pad)),
              1e-12);
  }
}

TEST(Conv2d, Im2colAndCol2imAreAdjoint) {
  // <im2col(x), y> == <x, col2im(y)> for every x, y.
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const ConvSpec spec{3, 3, between(rng, 1, 2), between(rng, 0, 2)};
    const Shape shape{between(rng, 1, 2), between(rng, 1, 3), between(rng, 3, 7), between(rng, 3, 7)};
    const auto x = random_tensor(rng, shape);
    const auto cols = dnet::im2col(x, spec);
    const auto y = random_tensor(rng, cols.shape());
    const auto back = dnet::col2im(y, shape, spec);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cols.numel(); ++i) lhs += cols[i] * y[i];
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * back[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Conv2d, OutputExtentAndErrors) {
  EXPECT_EQ(dnet::conv_output_extent(16, 3, 1, 1), 16u);
  EXPECT_EQ(dnet::conv_output_extent(7, 3, 2, 0), 3u);
  EXPECT_THROW(dnet::conv_output_extent(2, 5, 1, 0), dnet::ShapeError);
  EXPECT_THROW(dnet::conv2d(Tensor<double>({1, 2, 4, 4}), Tensor<double>({1, 3, 3, 3}),
                            Tensor<double>({1}), ConvSpec{}),
               dnet::ShapeError);
}

TEST(Pooling, AvgAndMaxOnKnownValues) {
  Tensor<double> x({1, 1, 2, 3}, std::vector<double>{1, 2, 9, 3, 4, 9});
  const auto avg = dnet::avgpool2(x);
  ASSERT_EQ(avg.shape(), (Shape{1, 1, 1, 1}));  // odd width floors
  EXPECT_DOUBLE_EQ(avg[0], 2.5);
  std::vector<std::size_t> arg;
  const auto mx = dnet::maxpool2(x, &arg);
  EXPECT_DOUBLE_EQ(mx[0], 4);
  EXPECT_EQ(arg[0], 4u);
}

TEST(Pooling, MaxTiesPickFirst) {
  Tensor<double> x({1, 1, 2, 2}, 1.0);
  std::vector<std::size_t> arg;
  dnet::maxpool2(x, &arg);
  EXPECT_EQ(arg[0], 0u);
}

TEST(Pooling, GlobalAverage) {
  Tensor<double> x({1, 2, 1, 2}, std::vector<double>{1, 3, 10, 20});
  const auto g = dnet::global_avg_pool(x);
  ASSERT_EQ(g.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(g[0], 2);
  EXPECT_DOUBLE_EQ(g[1], 15);
}

TEST(Channels, ConcatThenSliceRecoversParts) {
  Rng rng(6);
  const auto a = random_tensor(rng, {2, 3, 2, 2});
  const auto b = random_tensor(rng, {2, 1, 2, 2});
  const auto c = dnet::concat_channels(std::vector<Tensor<double>>{a, b});
  EXPECT_EQ(c.shape(), (Shape{2, 4, 2, 2}));
  EXPECT_EQ(dnet::slice_channels(c, 0, 3), a);
  EXPECT_EQ(dnet::slice_channels(c, 3, 1), b);
  EXPECT_THROW(dnet::slice_channels(c, 3, 2), dnet::ShapeError);
  EXPECT_THROW(dnet::concat_channels(std::vector<Tensor<double>>{a, random_tensor(rng, {2, 1, 3, 2})}),
               dnet::ShapeError);
}

TEST(Channels, MomentsAreBiased) {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6});
  const auto [mean, var] = dnet::channel_moments(x);
  EXPECT_DOUBLE_EQ(mean[0], 3);
  EXPECT_DOUBLE_EQ(var[0], (4 + 1 + 0 + 9) / 4.0);
}

TEST(Relu, ZeroesNegatives) {
  Tensor<double> x({3}, std::vector<double>{-1, 0, 2});
  EXPECT_EQ(dnet::relu(x), (Tensor<double>({3}, std::vector<double>{0, 0, 2})));
}
