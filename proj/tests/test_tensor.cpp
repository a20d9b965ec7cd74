#include <gtest/gtest.h>

#include <set>

#include "dnet/error.hpp"
#include "dnet/parallel.hpp"
#include "dnet/rng.hpp"
#include "dnet/tensor.hpp"

using dnet::Rng;
using dnet::Shape;
using dnet::Tensor;

TEST(Rng, SameSeedSameStream) {
  Rng a(123), b(123), c(124);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs = differs || x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, KnownFirstOutputs) {
  // splitmix64 from state 0 is a published sequence.
  std::uint64_t s = 0;
  EXPECT_EQ(dnet::splitmix64(s), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(dnet::splitmix64(s), 0x6e789e6aa1b965f4ULL);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng rng(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_EQ(rng.below(1), 0u);
}

TEST(Rng, UniformInUnitInterval) {
  Rng rng(9);
  double sum = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 10000, 0.5, 0.02);
}

TEST(Rng, DeriveSeedIsOrderSensitive) {
  EXPECT_NE(dnet::derive_seed(1, 2), dnet::derive_seed(2, 1));
  EXPECT_EQ(dnet::derive_seed(1, 2), dnet::derive_seed(1, 2));
}

TEST(Tensor, ShapeAndFill) {
  Tensor<float> t({2, 3, 4}, 1.5f);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.dim(2), 4u);
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);
  EXPECT_EQ(dnet::shape_str(t.shape()), "[2x3x4]");
}

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), dnet::ShapeError);
}

TEST(Tensor, CheckedIndexing) {
  Tensor<double> t({2, 3});
  t.at({1, 2}) = 7;
  EXPECT_EQ(t[5], 7);
  EXPECT_THROW(t.at({2, 0}), dnet::ShapeError);
  EXPECT_THROW(t.at({0}), dnet::ShapeError);
}

TEST(Tensor, ReshapeKeepsDataAndRejectsBadCounts) {
  Tensor<double> t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  const auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r[4], 4);
  EXPECT_THROW(t.reshaped({4}), dnet::ShapeError);
}

TEST(Tensor, CastAndEquality) {
  Tensor<double> t({2}, std::vector<double>{0.5, -1.25});
  const auto f = t.cast<float>();
  EXPECT_EQ(f[1], -1.25f);
  EXPECT_EQ(f.cast<double>(), t);
  EXPECT_FALSE(t == Tensor<double>({1, 2}, std::vector<double>{0.5, -1.25}));
}

TEST(Parallel, CoversRangeOnceWithSeveralThreads) {
  dnet::set_num_threads(3);
  std::vector<int> hits(1000, 0);
  dnet::parallel_for(hits.size(), 10, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ++hits[i];
  });
  dnet::set_num_threads(1);
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Parallel, PropagatesExceptions) {
  dnet::set_num_threads(2);
  EXPECT_THROW(dnet::parallel_for(100, 1,
                                  [](std::size_t b, std::size_t) {
                                    if (b == 0) throw std::runtime_error("boom");
                                  }),
               std::runtime_error);
  dnet::set_num_threads(1);
}
