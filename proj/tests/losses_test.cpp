#include <gtest/gtest.h>

#include "echoseg/losses.hpp"
#include "support.hpp"

using namespace echoseg;
using namespace echoseg::testing;

namespace {

// Independent soft-Dice oracle: explicit per-class loops.
double dice_loss_oracle(const Tensord& probs, const LabelMap& t) {
  const std::size_t N = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  double total = 0;
  for (std::size_t c = 1; c < C; ++c) {
    double inter = 0, p = 0, g = 0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double pv = probs.at(n, c, y, x);
          const bool tv = t[(n * H + y) * W + x] == c;
          inter += pv * tv;
          p += pv;
          g += tv;
        }
      }
    }
    total += (2 * inter + kDiceSmooth) / (p + g + kDiceSmooth);
  }
  return 1 - total / static_cast<double>(C - 1);
}

double ce_oracle(const Tensord& logits, const LabelMap& t) {
  const std::size_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double z = 0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(logits.at(n, c, y, x));
        total -= std::log(std::exp(logits.at(n, t[(n * H + y) * W + x], y, x)) / z);
      }
    }
  }
  return total / static_cast<double>(N * H * W);
}

}  // namespace

TEST(Losses, DiceMatchesOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensord logits = random_tensor({2, 4, 6, 5}, rng, -2, 2);
    const LabelMap t = random_labels({2, 6, 5}, rng);
    EXPECT_NEAR(dice_loss(kernels::softmax_forward(logits), t).value,
                dice_loss_oracle(kernels::softmax_forward(logits), t), 1e-12);
  }
}

TEST(Losses, CrossEntropyMatchesOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensord logits = random_tensor({2, 4, 6, 5}, rng, -2, 2);
    const LabelMap t = random_labels({2, 6, 5}, rng);
    EXPECT_NEAR(cross_entropy(logits, t).value, ce_oracle(logits, t), 1e-12);
  }
}

TEST(Losses, UniformLogitsGiveLogC) {
  const LabelMap t({1, 4, 4}, 2);
  EXPECT_NEAR(cross_entropy(Tensord({1, 4, 4, 4}, 0.0), t).value, std::log(4.0), 1e-12);
}

TEST(Losses, PerfectPredictionGivesZeroDice) {
  std::mt19937_64 rng(1);
  const LabelMap t = random_labels({1, 8, 8}, rng);
  Tensord probs({1, 4, 8, 8}, 0.0);
  for (std::size_t i = 0; i < 64; ++i) probs[t[i] * 64 + i] = 1.0;
  EXPECT_NEAR(dice_loss(probs, t).value, 0.0, 1e-9);
}

TEST(Losses, CombinationsAreAverageAndSum) {
  std::mt19937_64 rng(2);
  const Tensord logits = random_tensor({2, 4, 4, 4}, rng);
  const LabelMap t = random_labels({2, 4, 4}, rng);
  const double d = segmentation_loss(LossKind::dice, logits, t).value;
  const double ce = segmentation_loss(LossKind::cross_entropy, logits, t).value;
  EXPECT_NEAR(segmentation_loss(LossKind::dice_ce_avg, logits, t).value, (d + ce) / 2, 1e-12);
  EXPECT_NEAR(segmentation_loss(LossKind::dice_ce_sum, logits, t).value, d + ce, 1e-12);
}

TEST(Losses, RejectsBadTargets) {
  const Tensord logits({1, 4, 4, 4});
  EXPECT_THROW(cross_entropy(logits, LabelMap({1, 4, 4}, 4)), InvalidLabelError);
  EXPECT_THROW(cross_entropy(logits, LabelMap({1, 4, 5}, 0)), InvalidShapeError);
}

TEST(DeepSupervision, EqualAuxLossesGiveClosedForm) {
  // With every aux loss equal to the final loss: L = (1 + 0.3 n) L_final.
  std::mt19937_64 rng(3);
  const Tensord logits = random_tensor({2, 4, 8, 8}, rng);
  const LabelMap t = random_labels({2, 8, 8}, rng);
  for (std::size_t n = 0; n <= 5; ++n) {
    Graph<double> g;
    Var<double> x = g.input(logits);
    auto final_loss = ag::segmentation_loss<double>(LossKind::dice_ce_avg, x, std::nullopt, t);
    std::vector<ag::LossTerm<double>> aux;
    for (std::size_t i = 0; i < n; ++i) {
      aux.push_back(ag::segmentation_loss<double>(LossKind::dice_ce_avg, x, std::nullopt, t));
    }
    const double composite = ag::deep_supervision_loss<double>(final_loss, aux).scalar();
    EXPECT_NEAR(composite, (1 + 0.3 * static_cast<double>(n)) * final_loss.scalar(), 1e-6);

    const LossValue base = segmentation_loss(LossKind::dice_ce_avg, logits, t);
    const std::vector<LossValue> aux_values(n, base);
    EXPECT_NEAR(deep_supervision_loss(base, aux_values).value, (1 + 0.3 * static_cast<double>(n)) * base.value, 1e-6);
  }
}

TEST(DeepSupervision, TermsAreReported) {
  std::mt19937_64 rng(4);
  const Tensord logits = random_tensor({1, 4, 4, 4}, rng);
  const LabelMap t = random_labels({1, 4, 4}, rng);
  const LossValue base = segmentation_loss(LossKind::dice, logits, t);
  const LossValue aux[] = {base, base};
  const LossValue out = deep_supervision_loss(base, aux, 0.5);
  EXPECT_EQ(out.terms.size(), 3u);
  EXPECT_NEAR(out.value, 2 * base.value, 1e-12);
}
