#include <gtest/gtest.h>

#include "overseg/rf.hpp"

using namespace overseg;
using K = RFLayer::Kind;

TEST(Rational, ArithmeticIsExact) {
  EXPECT_EQ(Rational(6, 8), Rational(3, 4));
  EXPECT_EQ(Rational(1, 2) + Rational(1, 3), Rational(5, 6));
  EXPECT_EQ(Rational(3) / Rational(16), Rational(3, 16));
  EXPECT_EQ(Rational(43, 8).ceil(), 6);
  EXPECT_EQ(Rational(43, 8).floor(), 5);
  EXPECT_EQ(Rational(-1, 2).floor(), -1);
  EXPECT_EQ(Rational(22).ceil(), 22);
  EXPECT_LT(Rational(3, 16), Rational(3, 4));
  EXPECT_EQ(Rational(9, 12).str(), "3/4");
}

TEST(ClosedForm, LevelValues) {
  for (auto mode : {RFMode::Under, RFMode::Over})
    for (std::int64_t k : {1, 3, 5}) EXPECT_EQ(rf_paper_approx(1, k, mode), Rational(k));
  EXPECT_EQ(rf_paper_approx(2, 3, RFMode::Under), Rational(12));
  EXPECT_EQ(rf_paper_approx(3, 3, RFMode::Under), Rational(48));
  EXPECT_EQ(rf_paper_approx(2, 3, RFMode::Over), Rational(3, 4));
  EXPECT_EQ(rf_paper_approx(3, 3, RFMode::Over), Rational(3, 16));
  EXPECT_EQ(rf_paper_side(3, 3, RFMode::Under), Rational(12));
  EXPECT_EQ(rf_paper_side(3, 3, RFMode::Over), Rational(3, 4));
  EXPECT_THROW(rf_paper_approx(0, 3, RFMode::Under), ValidationError);
}

TEST(Exact, TextbookCases) {
  auto one = rf_exact({{K::Conv, 3, 1, "c"}}, RFMode::Under);
  EXPECT_EQ(one.back().rf, Rational(3));
  EXPECT_EQ(one.back().jump, Rational(1));
  auto pooled = rf_exact({{K::Conv, 3, 1, "c1"}, {K::MaxPool2, 1, 1, "p"}, {K::Conv, 3, 2, "c2"}}, RFMode::Under);
  EXPECT_EQ(pooled.back().rf, Rational(8));
  EXPECT_EQ(pooled.back().jump, Rational(2));
  auto up = rf_exact({{K::Conv, 3, 1, "c1"}, {K::Upsample2, 1, 1, "u"}, {K::Conv, 3, 2, "c2"}}, RFMode::Over);
  EXPECT_EQ(up.back().rf, Rational(9, 2));
  EXPECT_EQ(up.back().jump, Rational(1, 2));
}

TEST(Exact, ThreeLevelEncoders) {
  const auto u = rf_exact(encoder_stack(3, RFMode::Under), RFMode::Under);
  EXPECT_EQ(u.back().rf, Rational(22));
  EXPECT_EQ(u.back().jump, Rational(8));
  const auto o = rf_exact(encoder_stack(3, RFMode::Over), RFMode::Over);
  EXPECT_EQ(o.back().rf, Rational(43, 8));
  EXPECT_EQ(o.back().jump, Rational(1, 8));
  // rf never shrinks under conv or maxpool
  for (std::size_t i = 1; i < u.size(); ++i) EXPECT_GE(u[i].rf, u[i - 1].rf);
}

TEST(Exact, JumpDoublesOrHalvesPerLevel) {
  for (auto mode : {RFMode::Under, RFMode::Over}) {
    const auto rec = rf_exact(encoder_stack(4, mode), mode);
    Rational prev(1);
    for (const auto& r : rec)
      if (r.id.find("relu") != std::string::npos) {
        EXPECT_EQ(r.jump, mode == RFMode::Under ? prev * Rational(2) : prev / Rational(2)) << r.id;
        prev = r.jump;
      }
  }
}

TEST(Exact, PoolingOnlyStackAgreesWithClosedForm) {
  // The closed form counts the window of a k-wide conv at block i's input:
  // side k * jump_i, so side^2 == k * paper_approx.
  for (auto mode : {RFMode::Under, RFMode::Over})
    for (std::int64_t k : {1, 3, 5})
      for (int i = 1; i <= 5; ++i) {
        Rational jump(1);
        if (i > 1) jump = rf_exact(pooling_only_stack(i - 1, mode), mode, k).back().jump;
        EXPECT_EQ(jump, jump_at_level(i, mode));
        const auto side = Rational(k) * jump;
        EXPECT_EQ(side, rf_paper_side(i, k, mode));
        EXPECT_EQ(side * side, Rational(k) * rf_paper_approx(i, k, mode)) << "k=" << k << " i=" << i;
      }
}

TEST(Empirical, IdentityAndSingleConv) {
  const auto id = rf_empirical({{K::Relu, 1, 1, "r"}}, Shape{9, 9}, {4, 4}, 1);
  EXPECT_EQ(id.extent(), (std::vector<std::int64_t>{1, 1}));
  const auto c = rf_empirical({{K::Conv, 3, 1, "c"}}, Shape{9, 9}, {4, 4}, 1);
  EXPECT_EQ(c.extent(), (std::vector<std::int64_t>{3, 3}));
  const auto c3 = rf_empirical({{K::Conv, 3, 1, "c"}}, Shape{7, 7, 7}, {3, 3, 3}, 1);
  EXPECT_EQ(c3.extent(), (std::vector<std::int64_t>{3, 3, 3}));
}

TEST(Empirical, UnderEncoderBoxEqualsCeilOfExact) {
  const auto stack = encoder_stack(3, RFMode::Under);
  const auto exact = rf_exact(stack, RFMode::Under).back().rf;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto box = rf_empirical(stack, Shape{64, 64}, {4, 4}, seed);
    EXPECT_EQ(box.extent(), (std::vector<std::int64_t>{exact.ceil(), exact.ceil()})) << "seed " << seed;
    EXPECT_GE(Rational(box.max_extent()), rf_paper_side(3, 3, RFMode::Under));
  }
}

TEST(Empirical, OverEncoderBoxIsSmallerThanUnder) {
  const auto under = rf_empirical(encoder_stack(3, RFMode::Under), Shape{64, 64}, {4, 4}, 1);
  const auto over = rf_empirical(encoder_stack(3, RFMode::Over), Shape{16, 16}, {64, 64}, 1);
  EXPECT_EQ(over.max_extent(), rf_exact(encoder_stack(3, RFMode::Over), RFMode::Over).back().rf.ceil());
  EXPECT_LT(over.max_extent(), under.max_extent());
}

TEST(Empirical, ProbeNearBorderIsRejected) {
  EXPECT_THROW(rf_empirical(encoder_stack(3, RFMode::Under), Shape{64, 64}, {0, 4}, 1), ValidationError);
  EXPECT_THROW(rf_empirical({{K::Conv, 3, 1, "c"}}, Shape{9, 9}, {0, 4}, 1), ValidationError);
}
