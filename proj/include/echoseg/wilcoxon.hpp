#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "echoseg/error.hpp"

namespace echoseg {

struct WilcoxonResult {
  double statistic = 0;  // min(W+, W-)
  double p_value = 1;
  std::size_t n_effective = 0;
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactLimit = 15;
inline constexpr std::size_t kWilcoxonMinPairs = 5;

namespace stats {

/// Average ranks (1-based) of |d|, ties sharing the mean of their positions.
inline std::vector<double> signed_rank_ranks(std::span<const double> diffs) {
  const std::size_t n = diffs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return std::abs(diffs[a]) < std::abs(diffs[b]); });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Exact two-sided p-value: 2 P(W+ <= w) under the sign-flip null, capped at 1.
/// Ranks are multiples of 1/2, so the null distribution is counted over
/// doubled ranks with a subset-sum table.
inline double exact_p_value(std::span<const double> ranks, double w) {
  std::vector<std::size_t> doubled;
  std::size_t total = 0;
  for (double r : ranks) {
    doubled.push_back(static_cast<std::size_t>(std::llround(2 * r)));
    total += doubled.back();
  }
  std::vector<double> ways(total + 1, 0.0);
  ways[0] = 1;
  std::size_t reach = 0;
  for (std::size_t r : doubled) {
    reach += r;
    for (std::size_t s = reach; s >= r; --s) {
      ways[s] += ways[s - r];
      if (s == r) break;
    }
  }
  const auto limit = static_cast<std::size_t>(std::llround(2 * w));
  double tail = 0;
  for (std::size_t s = 0; s <= std::min(limit, total); ++s) tail += ways[s];
  const double p = 2 * tail / std::ldexp(1.0, static_cast<int>(ranks.size()));
  return std::min(1.0, p);
}

/// Normal approximation with tie-corrected variance and continuity correction.
inline double normal_p_value(std::span<const double> ranks, double w_plus) {
  const auto n = static_cast<double>(ranks.size());
  const double mean = n * (n + 1) / 4;
  double var = n * (n + 1) * (2 * n + 1) / 24;
  std::vector<double> sorted(ranks.begin(), ranks.end());
  std::ranges::sort(sorted);
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const auto t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48;
    i = j;
  }
  if (var <= 0) return 1.0;
  const double z = std::max(0.0, std::abs(w_plus - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace stats

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped. Exact null distribution up to 15 pairs, normal approximation
/// beyond.
inline WilcoxonResult wilcoxon(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw InvalidInputError("wilcoxon: samples have different lengths (" + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  }
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw InvalidInputError("wilcoxon: non-finite value at pair " + std::to_string(i));
    if (d != 0) diffs.push_back(d);
  }
  WilcoxonResult r;
  r.n_effective = diffs.size();
  if (diffs.empty()) return r;
  if (diffs.size() < kWilcoxonMinPairs) {
    throw InvalidInputError("wilcoxon: need at least " + std::to_string(kWilcoxonMinPairs) +
                            " nonzero differences, got " + std::to_string(diffs.size()));
  }
  const std::vector<double> ranks = stats::signed_rank_ranks(diffs);
  double w_plus = 0, w_minus = 0;
  for (std::size_t i = 0; i < diffs.size(); ++i) (diffs[i] > 0 ? w_plus : w_minus) += ranks[i];
  r.statistic = std::min(w_plus, w_minus);
  r.exact = diffs.size() <= kWilcoxonExactLimit;
  r.p_value = r.exact ? stats::exact_p_value(ranks, r.statistic) : stats::normal_p_value(ranks, w_plus);
  return r;
}

inline WilcoxonResult wilcoxon(const std::vector<double>& a, const std::vector<double>& b) {
  return wilcoxon(std::span<const double>(a), std::span<const double>(b));
}

}  // namespace echoseg
