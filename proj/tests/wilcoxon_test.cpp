#include <gtest/gtest.h>

#include <random>

#include "echoseg/wilcoxon.hpp"

using namespace echoseg;

namespace {

// Reference p-value by enumerating all 2^n sign assignments.
double brute_force_p(const std::vector<double>& ranks, double w) {
  const std::size_t n = ranks.size();
  std::size_t hits = 0;
  for (std::uint64_t mask = 0; mask < (1ull << n); ++mask) {
    double plus = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1) plus += ranks[i];
    }
    hits += plus <= w + 1e-9;
  }
  return std::min(1.0, 2.0 * static_cast<double>(hits) / std::ldexp(1.0, static_cast<int>(n)));
}

}  // namespace

TEST(Wilcoxon, SixPositiveDifferences) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b(6, 0.0);
  const WilcoxonResult r = wilcoxon(a, b);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.statistic, 0.0);
  EXPECT_DOUBLE_EQ(r.p_value, 0.03125);  // 2 / 2^6
}

TEST(Wilcoxon, IdenticalSamplesGiveOne) {
  const std::vector<double> a{0.3, 0.5, 0.9, 0.1, 0.7};
  EXPECT_EQ(wilcoxon(a, a).p_value, 1.0);
}

TEST(Wilcoxon, ExactMatchesEnumerationWithTies) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + trial % 11;
    std::vector<double> a(n), b(n, 0.0);
    std::uniform_int_distribution<int> d(-4, 4);
    for (auto& v : a) {
      do v = d(rng);
      while (v == 0);
    }
    const WilcoxonResult r = wilcoxon(a, b);
    const auto ranks = stats::signed_rank_ranks(a);
    EXPECT_NEAR(r.p_value, brute_force_p(ranks, r.statistic), 1e-12);
  }
}

TEST(Wilcoxon, NormalApproximationCloseToExactAtTwenty) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> noise(0.2, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> d(20);
    for (auto& v : d) v = noise(rng);
    const auto ranks = stats::signed_rank_ranks(d);
    double w_plus = 0, total = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      total += ranks[i];
      if (d[i] > 0) w_plus += ranks[i];
    }
    const double w = std::min(w_plus, total - w_plus);
    EXPECT_NEAR(stats::normal_p_value(ranks, w_plus), stats::exact_p_value(ranks, w), 0.01);
  }
}

TEST(Wilcoxon, SymmetricInArguments) {
  const std::vector<double> a{1, 5, 2, 8, 3, 9, 4}, b{2, 3, 2.5, 1, 7, 6, 0};
  EXPECT_DOUBLE_EQ(wilcoxon(a, b).p_value, wilcoxon(b, a).p_value);
}

TEST(Wilcoxon, AverageRanksForTies) {
  const std::vector<double> d{1, -1, 2, 3, -3};
  EXPECT_EQ(stats::signed_rank_ranks(d), (std::vector<double>{1.5, 1.5, 3, 4.5, 4.5}));
}

TEST(Wilcoxon, Errors) {
  EXPECT_THROW(wilcoxon(std::vector<double>{1, 2}, std::vector<double>{1}), InvalidInputError);
  EXPECT_THROW(wilcoxon(std::vector<double>{1, 2, 3}, std::vector<double>{0, 0, 0}), InvalidInputError);
  EXPECT_THROW(wilcoxon(std::vector<double>{1, 2, 3, 4, NAN}, std::vector<double>(5, 0.0)), InvalidInputError);
}
