#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <string>

#include "overseg/tensor.hpp"

using namespace overseg;

TEST(Shape, RejectsBadRankAndDims) {
  EXPECT_THROW(Shape(std::vector<std::int64_t>{}), ShapeError);
  EXPECT_THROW(Shape({1, 2, 3, 4, 5, 6}), ShapeError);
  EXPECT_THROW(Shape({3, 0}), ShapeError);
  EXPECT_NO_THROW(Shape({1, 1, 1, 1, 1}));
  EXPECT_EQ(Shape({2, 3, 4}).numel(), 24);
  EXPECT_EQ(Shape({2, 3, 4}).str(), "[2,3,4]");
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.at(1, 0), 4.0f);
  EXPECT_EQ(t.at(0, 2), 3.0f);
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{3, 2}).at(2, 1), 6.0f);
}

TEST(Rng, MatchesCommittedGoldenSequenceForSeed7) {
  std::ifstream in(std::string(OVERSEG_FIXTURES) + "/rng_seed7_u64.txt");
  ASSERT_TRUE(in.good());
  Rng rng(7);
  std::uint64_t expected = 0;
  int n = 0;
  while (in >> expected) {
    ASSERT_EQ(rng.next_u64(), expected) << "draw " << n;
    ++n;
  }
  EXPECT_EQ(n, 1000);
}

TEST(Rng, UniformRangesAndDerivedStreams) {
  Rng rng(123);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = rng.uniform_int(-2, 3);
    ASSERT_GE(k, -2);
    ASSERT_LE(k, 3);
  }
  Rng a(5), b(5);
  EXPECT_EQ(a.derive(1).next_u64(), b.derive(1).next_u64());
  EXPECT_NE(a.derive(1).next_u64(), a.derive(2).next_u64());
  // derive does not advance the parent
  EXPECT_EQ(a.next_u64(), Rng(5).next_u64());
}

TEST(Rng, NormalHasRoughlyUnitMoments) {
  Rng rng(99);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}
