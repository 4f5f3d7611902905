#include <gtest/gtest.h>

#include "echoseg/metrics.hpp"
#include "support.hpp"

using namespace echoseg;
using namespace echoseg::testing;

namespace {

LabelMap mask_from_bits(std::uint32_t bits, std::size_t side) {
  LabelMap l({side, side}, 0);
  for (std::size_t i = 0; i < side * side; ++i) l[i] = (bits >> i) & 1u;
  return l;
}

void expect_same(const std::optional<double>& a, const std::optional<double>& b) {
  ASSERT_EQ(a.has_value(), b.has_value());
  if (a) ASSERT_EQ(*a, *b);
}

}  // namespace

TEST(DiceScore, HandCases) {
  const LabelMap a({2, 2}, std::vector<std::uint8_t>{1, 1, 0, 0});
  const LabelMap b({2, 2}, std::vector<std::uint8_t>{1, 0, 0, 0});
  EXPECT_DOUBLE_EQ(dice_score(a, b, 1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(dice_score(a, a, 1), 1.0);
  EXPECT_DOUBLE_EQ(dice_score(a, b, 2), 1.0);  // both empty
  EXPECT_THROW(dice_score(a, LabelMap({2, 3}), 1), InvalidShapeError);
}

TEST(Hausdorff, HandCases) {
  LabelMap a({5, 5}, 0), b({5, 5}, 0);
  a.at(0, 0) = 1;
  b.at(3, 4) = 1;
  EXPECT_DOUBLE_EQ(*hausdorff(a, b, 1), 5.0);
  EXPECT_DOUBLE_EQ(*hausdorff(a, a, 1), 0.0);
  EXPECT_DOUBLE_EQ(*hausdorff(a, b, 2), 0.0);  // both empty
  EXPECT_FALSE(hausdorff(a, LabelMap({5, 5}, 0), 1).has_value());
}

TEST(Metrics, ExhaustiveFourByFourAgainstFixedMask) {
  const LabelMap fixed = mask_from_bits(0b0110'1111'0110'0000u, 4);
  for (std::uint32_t bits = 0; bits < (1u << 16); ++bits) {
    const LabelMap p = mask_from_bits(bits, 4);
    ASSERT_EQ(dice_score(p, fixed, 1), dice_reference(p, fixed, 1)) << bits;
    expect_same(hausdorff(p, fixed, 1), hausdorff_reference(p, fixed, 1));
  }
}

TEST(Metrics, RandomSixteenBySixteenPairs) {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 1000; ++i) {
    const LabelMap a = random_labels({16, 16}, rng, i % 3 == 0 ? 2 : 4);
    const LabelMap b = random_labels({16, 16}, rng, i % 3 == 0 ? 2 : 4);
    for (std::uint8_t c = 1; c < 4; ++c) {
      ASSERT_EQ(dice_score(a, b, c), dice_reference(a, b, c));
      expect_same(hausdorff(a, b, c), hausdorff_reference(a, b, c));
    }
  }
}

TEST(Metrics, HausdorffIsSymmetric) {
  std::mt19937_64 rng(78);
  for (int i = 0; i < 100; ++i) {
    const LabelMap a = random_labels({12, 12}, rng), b = random_labels({12, 12}, rng);
    expect_same(hausdorff(a, b, 1), hausdorff(b, a, 1));
  }
}

TEST(DistanceTransform, MatchesBruteForce) {
  std::mt19937_64 rng(79);
  for (int i = 0; i < 50; ++i) {
    const Mask sites = class_mask(random_labels({9, 13}, rng, 8), 1);
    bool any = false;
    for (auto v : sites.values()) any = any || v;
    if (!any) continue;
    const auto d = squared_distance_transform(sites);
    for (std::size_t y = 0; y < 9; ++y) {
      for (std::size_t x = 0; x < 13; ++x) {
        double best = 1e300;
        for (std::size_t v = 0; v < 9; ++v) {
          for (std::size_t u = 0; u < 13; ++u) {
            if (!sites[v * 13 + u]) continue;
            const double dy = double(y) - double(v), dx = double(x) - double(u);
            best = std::min(best, dy * dy + dx * dx);
          }
        }
        ASSERT_EQ(d[y * 13 + x], best);
      }
    }
  }
}

TEST(Outliers, Rules) {
  auto base = [] {
    LabelMap l({8, 8}, 0);
    for (std::size_t y = 1; y < 3; ++y) l.at(y, 1) = 1;
    for (std::size_t y = 1; y < 3; ++y) l.at(y, 3) = 2;
    for (std::size_t y = 1; y < 3; ++y) l.at(y, 5) = 3;
    return l;
  };
  EXPECT_FALSE(anatomical_outlier(base()));

  LabelMap missing = base();
  missing.at(1, 5) = missing.at(2, 5) = 0;
  EXPECT_TRUE(outlier_reasons(missing).empty[3]);

  LabelMap split = base();
  split.at(6, 6) = 1;
  EXPECT_TRUE(outlier_reasons(split).fragmented[1]);

  LabelMap ring = base();
  for (std::size_t y = 4; y < 7; ++y) {
    for (std::size_t x = 4; x < 7; ++x) ring.at(y, x) = (y == 5 && x == 5) ? 0 : 2;
  }
  for (std::size_t y = 1; y < 3; ++y) ring.at(y, 3) = 0;
  const OutlierReasons r = outlier_reasons(ring);
  EXPECT_TRUE(r.hole);
  EXPECT_FALSE(r.fragmented[2]);
}

TEST(Report, RoundTripAndSummary) {
  MetricsReport rep;
  rep.postprocessed = true;
  rep.records.push_back({"a", {0.9, 0.8, 0.7}, {1.5, std::nullopt, 2.0}, false});
  rep.records.push_back({"b", {0.1 + 0.2, 1.0, 0.0}, {3.0, 4.0, std::nullopt}, true});
  const MetricsReport back = parse_report(format_report(rep));
  EXPECT_EQ(back.postprocessed, rep.postprocessed);
  EXPECT_EQ(back.records, rep.records);
  const MetricsSummary s = back.summary();
  EXPECT_EQ(s.samples, 2u);
  EXPECT_EQ(s.outliers, 1u);
  EXPECT_DOUBLE_EQ(s.mean_hausdorff[1], 4.0);
  EXPECT_EQ(s.undefined_hausdorff[2], 1u);
  EXPECT_DOUBLE_EQ(rep.records[0].mean_hausdorff().value(), 1.75);
}

TEST(Report, RejectsGarbage) {
  EXPECT_THROW(parse_report("nonsense\n"), CorruptFileError);
  EXPECT_THROW(parse_report("# echoseg-metrics 1\npostprocess 0\nrecord x 1 1\n"), CorruptFileError);
}

TEST(EvaluateFrame, GroundTruthAgainstItself) {
  LabelMap l({8, 8}, 0);
  for (std::size_t x = 1; x < 7; ++x) {
    l.at(2, x) = 1;
    l.at(4, x) = 2;
    l.at(6, x) = 3;
  }
  const SampleMetrics m = evaluate_frame("gt", l, l);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(m.dice[c], 1.0);
    EXPECT_EQ(*m.hausdorff[c], 0.0);
  }
  EXPECT_FALSE(m.outlier);
}
