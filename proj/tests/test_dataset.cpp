#include <gtest/gtest.h>

#include <set>

#include "causalformer/dataset.hpp"
#include "causalformer/errors.hpp"
#include "causalformer/kernel/rng.hpp"

using namespace causalformer;

namespace {

Matrix random_series(Index T, Index n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(T, n);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(-50.0, 15.0);
  return m;
}

}  // namespace

TEST(Split, ReferenceLength) {
  const auto s = split_indices(5000);
  EXPECT_EQ(s.train, (StepRange{0, 3000}));
  EXPECT_EQ(s.val, (StepRange{3000, 4000}));
  EXPECT_EQ(s.test, (StepRange{4000, 5000}));
}

TEST(Split, ShortSeries) {
  const auto s = split_indices(100);
  EXPECT_EQ(s.train, (StepRange{0, 60}));
  EXPECT_EQ(s.val, (StepRange{60, 80}));
  EXPECT_EQ(s.test, (StepRange{80, 100}));
}

TEST(Split, TooShortForAWindow) {
  EXPECT_THROW(split_indices(10, 10, 1), ConfigError);
  // 60 steps give a 12-step validation split: exactly one window each.
  EXPECT_NO_THROW(split_indices(60, 10, 1));
  EXPECT_THROW(split_indices(59, 10, 1), ConfigError);
}

TEST(Split, ContiguousAndCovering) {
  for (Index T : {60, 61, 99, 123, 777, 5001}) {
    const auto s = split_indices(T, 10, 1);
    EXPECT_EQ(s.train.begin, 0);
    EXPECT_EQ(s.train.end, s.val.begin);
    EXPECT_EQ(s.val.end, s.test.begin);
    EXPECT_EQ(s.test.end, T);
    EXPECT_EQ(s.train.size(), (6 * T) / 10);
    EXPECT_EQ(s.val.size(), (2 * T) / 10);
  }
}

TEST(Normalize, ClipsBeforeStandardizing) {
  Matrix raw(4, 1);
  raw << 45, 30, 0, 10;
  const auto s = normalize(raw, {0, 4});
  Matrix clipped(4, 1);
  clipped << 30, 30, 0, 10;
  const double mean = clipped.mean();
  const double sd = std::sqrt((clipped.array() - mean).square().mean());
  EXPECT_NEAR(s.mean(0), mean, 1e-15);
  EXPECT_NEAR(s.stddev(0), sd, 1e-15);
  EXPECT_EQ(s.x(0, 0), s.x(1, 0));
  EXPECT_NEAR(s.x(0, 0), (30 - mean) / sd, 1e-15);
}

TEST(Normalize, PopulationStdHandExample) {
  Matrix raw(2, 1);
  raw << 0, 2;
  const auto s = normalize(raw, {0, 2});
  EXPECT_EQ(s.mean(0), 1.0);
  EXPECT_EQ(s.stddev(0), 1.0);
  EXPECT_EQ(s.x(0, 0), -1.0);
  EXPECT_EQ(s.x(1, 0), 1.0);
}

TEST(Normalize, ConstantColumnNamesTheNeuron) {
  Matrix raw = random_series(50, 3, 1);
  raw.col(2).setConstant(-60.0);
  try {
    normalize(raw, {0, 30});
    FAIL() << "expected DegenerateError";
  } catch (const DegenerateError& e) {
    EXPECT_NE(std::string(e.what()).find("neuron 2"), std::string::npos);
  }
  // A column pinned above the threshold is constant after clipping.
  Matrix above = random_series(50, 2, 2);
  above.col(0).setConstant(40.0);
  above(3, 0) = 55.0;
  EXPECT_THROW(normalize(above, {0, 30}), DegenerateError);
}

TEST(Normalize, TrainingSegmentHasZeroMeanUnitStd) {
  const Matrix raw = random_series(500, 4, 3);
  const auto s = normalize(raw, {0, 300});
  const auto seg = s.x.topRows(300);
  for (Index j = 0; j < 4; ++j) {
    const double m = seg.col(j).mean();
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt((seg.col(j).array() - m).square().mean()), 1.0, 1e-9);
  }
}

TEST(Normalize, GlobalScopeSharesStatistics) {
  Matrix raw = random_series(200, 3, 4);
  raw.col(1).array() += 20.0;
  const auto s = normalize(raw, {0, 120}, 30.0, NormalizationScope::Global);
  EXPECT_EQ(s.mean(0), s.mean(1));
  EXPECT_EQ(s.stddev(0), s.stddev(2));
  const auto seg = s.x.topRows(120);
  EXPECT_NEAR(seg.mean(), 0.0, 1e-9);
  EXPECT_NEAR(std::sqrt((seg.array() - seg.mean()).square().mean()), 1.0, 1e-9);
}

TEST(Normalize, DenormalizeRoundTrip) {
  const Matrix raw = random_series(300, 5, 5).cwiseMin(29.0);
  const auto s = normalize(raw, {0, 180});
  EXPECT_LT((denormalize(s, s.x) - raw).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalize, TestSegmentNeverLeaksIntoStatistics) {
  Matrix raw = random_series(400, 3, 6);
  const auto a = normalize(raw, {0, 240});
  raw.bottomRows(80).setRandom();
  raw.bottomRows(80) *= 1000.0;
  const auto b = normalize(raw, {0, 240});
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.stddev, b.stddev);
  EXPECT_EQ(a.x.topRows(240), b.x.topRows(240));
}

TEST(Normalize, BadRange) {
  const Matrix raw = random_series(20, 2, 7);
  EXPECT_THROW(normalize(raw, {0, 21}), ConfigError);
  EXPECT_THROW(normalize(raw, {5, 5}), ConfigError);
}

TEST(Window, Examples) {
  EXPECT_EQ(window({0, 100}, 10, 1).size(), 89u);
  const auto one = window({7, 19}, 10, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].start, 7);
  EXPECT_THROW(window({0, 11}, 10, 1), EmptySplitError);
}

TEST(Window, CountFormulaOnRandomShapes) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Index c = static_cast<Index>(rng.below(15));
    const Index h = 1 + static_cast<Index>(rng.below(4));
    const Index len = c + 1 + h + static_cast<Index>(rng.below(60));
    const Index begin = static_cast<Index>(rng.below(100));
    const auto w = window({begin, begin + len}, c, h);
    ASSERT_EQ(static_cast<Index>(w.size()), len - (c + 1) - h + 1);
    ASSERT_EQ(window_count(len, c, h), static_cast<Index>(w.size()));
    for (std::size_t k = 0; k < w.size(); ++k) {
      ASSERT_EQ(w[k].start, begin + static_cast<Index>(k));
      ASSERT_LT(w[k].target_steps(c, h).back(), begin + len);
    }
  }
}

TEST(Window, StepOffsets) {
  const Window w{20};
  EXPECT_EQ(w.history_steps(3), (std::vector<Index>{20, 21, 22, 23}));
  EXPECT_EQ(w.target_steps(3, 2), (std::vector<Index>{24, 25}));
}

TEST(WindowedDataset, BlocksAndSplitsStayApart) {
  const Matrix raw = random_series(200, 3, 9);
  const auto splits = split_indices(200, 10, 1);
  WindowedDataset data(normalize(raw, splits.train), splits, 10, 1);
  EXPECT_EQ(data.train().size(), static_cast<std::size_t>(120 - 11));
  EXPECT_EQ(data.val().size(), static_cast<std::size_t>(40 - 11));
  EXPECT_EQ(data.test().size(), static_cast<std::size_t>(40 - 11));

  auto inside = [](const std::vector<Window>& ws, StepRange r) {
    for (const auto& w : ws) {
      if (w.start < r.begin || w.start + 12 > r.end) return false;
    }
    return true;
  };
  EXPECT_TRUE(inside(data.train(), splits.train));
  EXPECT_TRUE(inside(data.val(), splits.val));
  EXPECT_TRUE(inside(data.test(), splits.test));

  const auto& w = data.val()[5];
  const Matrix hist = data.history_block(w);
  const Matrix target = data.target_block(w);
  ASSERT_EQ(hist.rows(), 3);
  ASSERT_EQ(hist.cols(), 11);
  ASSERT_EQ(target.rows(), 3);
  ASSERT_EQ(target.cols(), 1);
  for (Index j = 0; j < 3; ++j) {
    for (Index k = 0; k <= 10; ++k) EXPECT_EQ(hist(j, k), data.series().x(w.start + k, j));
    EXPECT_EQ(target(j, 0), data.series().x(w.start + 11, j));
  }
}
