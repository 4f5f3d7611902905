#include <gtest/gtest.h>

#include "echoseg/graph.hpp"
#include "echoseg/losses.hpp"
#include "support.hpp"

using namespace echoseg;
using namespace echoseg::testing;

namespace {

constexpr double kTol = 1e-3;
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

void expect_gradients(const ScalarFn& f, const std::function<std::vector<Tensord>(std::mt19937_64&)>& make) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    const GradcheckResult r = gradcheck(f, make(rng));
    EXPECT_LT(r.max_rel_error, kTol) << "seed " << seed << ": " << r.worst;
  }
}

}  // namespace

TEST(Gradcheck, Conv2dStride1Pad1) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        return weighted_sum(ag::conv2d<double>(v[0], v[1], v[2], 1, 1), 7);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 3, 8, 8}, rng), random_tensor({4, 3, 3, 3}, rng),
                                    random_tensor({4}, rng)};
      });
}

TEST(Gradcheck, Conv2dStride2) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        return weighted_sum(ag::conv2d<double>(v[0], v[1], std::nullopt, 2, 1), 8);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 2, 8, 8}, rng), random_tensor({3, 2, 3, 3}, rng)};
      });
}

TEST(Gradcheck, Conv2dPointwise) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        return weighted_sum(ag::conv2d<double>(v[0], v[1], v[2], 1, 0), 9);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 4, 8, 8}, rng), random_tensor({4, 4, 1, 1}, rng),
                                    random_tensor({4}, rng)};
      });
}

TEST(Gradcheck, ConvTranspose2d) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        return weighted_sum(ag::conv_transpose2d<double>(v[0], v[1], v[2], 2), 10);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 4, 4, 4}, rng), random_tensor({4, 3, 2, 2}, rng),
                                    random_tensor({3}, rng)};
      });
}

TEST(Gradcheck, MaxPool) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) { return weighted_sum(ag::maxpool2d(v[0]), 11); },
      [](std::mt19937_64& rng) { return std::vector<Tensord>{random_tensor({2, 4, 8, 8}, rng)}; });
}

TEST(Gradcheck, UpsampleNearest) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) { return weighted_sum(ag::upsample_nearest(v[0], 2), 12); },
      [](std::mt19937_64& rng) { return std::vector<Tensord>{random_tensor({2, 4, 4, 4}, rng)}; });
}

TEST(Gradcheck, BatchNormTrain) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        kernels::RunningStats<double> rs{Tensord({4}, 0.0), Tensord({4}, 1.0)};
        return weighted_sum(ag::normalize(v[0], kernels::NormKind::batch, v[1], v[2], &rs, true), 13);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 4, 8, 8}, rng), random_tensor({4}, rng, 0.5, 1.5),
                                    random_tensor({4}, rng)};
      });
}

TEST(Gradcheck, BatchNormEvalUsesRunningStats) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        kernels::RunningStats<double> rs{Tensord({4}, 0.2), Tensord({4}, 1.7)};
        return weighted_sum(ag::normalize(v[0], kernels::NormKind::batch, v[1], v[2], &rs, false), 14);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 4, 4, 4}, rng), random_tensor({4}, rng, 0.5, 1.5),
                                    random_tensor({4}, rng)};
      });
}

TEST(Gradcheck, InstanceNorm) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        return weighted_sum(ag::normalize<double>(v[0], kernels::NormKind::instance, v[1], v[2], nullptr, true), 15);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 4, 8, 8}, rng), random_tensor({4}, rng, 0.5, 1.5),
                                    random_tensor({4}, rng)};
      });
}

class ActivationGrad : public ::testing::TestWithParam<kernels::ActivationKind> {};

TEST_P(ActivationGrad, MatchesFiniteDifferences) {
  const auto kind = GetParam();
  expect_gradients(
      [kind](Graph<double>&, std::vector<Var<double>>& v) { return weighted_sum(ag::activation(v[0], kind), 16); },
      [](std::mt19937_64& rng) { return std::vector<Tensord>{away_from_zero({2, 4, 8, 8}, rng)}; });
}

INSTANTIATE_TEST_SUITE_P(All, ActivationGrad,
                         ::testing::Values(kernels::ActivationKind::relu, kernels::ActivationKind::leaky_relu,
                                           kernels::ActivationKind::mish, kernels::ActivationKind::gelu));

TEST(Gradcheck, Softmax) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) { return weighted_sum(ag::softmax(v[0]), 17); },
      [](std::mt19937_64& rng) { return std::vector<Tensord>{random_tensor({2, 4, 8, 8}, rng, -3, 3)}; });
}

TEST(Gradcheck, ConcatAndAdd) {
  expect_gradients(
      [](Graph<double>&, std::vector<Var<double>>& v) {
        Var<double> c = ag::concat_channels(v[0], v[1]);
        return weighted_sum(ag::add(c, v[2]), 18);
      },
      [](std::mt19937_64& rng) {
        return std::vector<Tensord>{random_tensor({2, 2, 8, 8}, rng), random_tensor({2, 3, 8, 8}, rng),
                                    random_tensor({2, 5, 8, 8}, rng)};
      });
}

TEST(Gradcheck, DiceLoss) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    const LabelMap target = random_labels({2, 8, 8}, rng);
    const GradcheckResult r = gradcheck(
        [&](Graph<double>&, std::vector<Var<double>>& v) { return ag::dice_loss(ag::softmax(v[0]), target); },
        {random_tensor({2, 4, 8, 8}, rng, -2, 2)});
    EXPECT_LT(r.max_rel_error, kTol) << "seed " << seed << ": " << r.worst;
  }
}

TEST(Gradcheck, CrossEntropy) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    const LabelMap target = random_labels({2, 8, 8}, rng);
    const GradcheckResult r = gradcheck(
        [&](Graph<double>&, std::vector<Var<double>>& v) { return ag::cross_entropy(v[0], target); },
        {random_tensor({2, 4, 8, 8}, rng, -2, 2)});
    EXPECT_LT(r.max_rel_error, kTol) << "seed " << seed << ": " << r.worst;
  }
}

TEST(Gradcheck, CombinedLossWithDeepSupervision) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    const LabelMap target = random_labels({2, 8, 8}, rng);
    const GradcheckResult r = gradcheck(
        [&](Graph<double>&, std::vector<Var<double>>& v) {
          auto final_loss = ag::segmentation_loss<double>(LossKind::dice_ce_avg, v[0], std::nullopt, target);
          Var<double> aux_logits = ag::upsample_nearest(v[1], 2);
          std::vector<ag::LossTerm<double>> aux{ag::segmentation_loss<double>(
              LossKind::dice_ce_avg, aux_logits, ag::softmax(aux_logits), target)};
          return ag::deep_supervision_loss<double>(final_loss, aux, 0.3).value;
        },
        {random_tensor({2, 4, 8, 8}, rng, -2, 2), random_tensor({2, 4, 4, 4}, rng, -2, 2)});
    EXPECT_LT(r.max_rel_error, kTol) << "seed " << seed << ": " << r.worst;
  }
}

TEST(Graph, BackwardTwiceIsAnError) {
  Parameter<double> p("p", Tensord({1, 1, 2, 2}, 1.0));
  Graph<double> g;
  Var<double> loss = ag::sum(g.parameter(p));
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), MissingGraphError);
}

TEST(Graph, GradientsAccumulateOverFanOut) {
  Parameter<double> p("p", Tensord({1, 1, 2, 2}, 3.0));
  Graph<double> g;
  Var<double> x = g.parameter(p);
  g.backward(ag::sum(ag::add(x, x)));
  for (double v : p.grad.values()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Graph, ForeignVariableRejected) {
  Parameter<double> p("p", Tensord({1, 1, 2, 2}, 1.0));
  Graph<double> a, b;
  Var<double> x = a.parameter(p);
  Var<double> y = b.parameter(p);
  EXPECT_THROW(ag::add(x, y), MissingGraphError);
}

TEST(Graph, InferenceGraphRecordsNoBackward) {
  Parameter<double> p("p", Tensord({1, 1, 2, 2}, 1.0));
  Graph<double> g(false);
  Var<double> loss = ag::sum(g.parameter(p));
  EXPECT_FALSE(g.requires_grad(loss));
  EXPECT_THROW(g.backward(loss), MissingGraphError);
}

TEST(Kernels, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  const Tensord x = random_tensor({2, 3, 9, 7}, rng), w = random_tensor({5, 3, 3, 3}, rng), b = random_tensor({5}, rng);
  for (std::size_t stride : {1u, 2u}) {
    const Tensord y = kernels::conv2d_forward(x, w, b, stride, 1);
    const std::size_t OH = (9 + 2 - 3) / stride + 1, OW = (7 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 5, OH, OW}));
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t o = 0; o < 5; ++o) {
        for (std::size_t oy = 0; oy < OH; ++oy) {
          for (std::size_t ox = 0; ox < OW; ++ox) {
            double s = b[o];
            for (std::size_t c = 0; c < 3; ++c) {
              for (std::size_t ky = 0; ky < 3; ++ky) {
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const long iy = static_cast<long>(oy * stride + ky) - 1, ix = static_cast<long>(ox * stride + kx) - 1;
                  if (iy < 0 || ix < 0 || iy >= 9 || ix >= 7) continue;
                  s += x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * w.at(o, c, ky, kx);
                }
              }
            }
            EXPECT_NEAR(y.at(n, o, oy, ox), s, 1e-12);
          }
        }
      }
    }
  }
}

TEST(Kernels, ConvTransposeIsAdjointOfConv) {
  // <conv_t(x), y> == <x, conv(y)> for the stride-2, kernel-2 pair.
  std::mt19937_64 rng(4);
  const Tensord x = random_tensor({1, 3, 4, 4}, rng), y = random_tensor({1, 2, 8, 8}, rng);
  const Tensord w = random_tensor({3, 2, 2, 2}, rng);
  const Tensord up = kernels::conv_transpose2d_forward(x, w, Tensord(), 2);
  const Tensord down = kernels::conv2d_forward(y, w, Tensord(), 2, 0);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < up.numel(); ++i) lhs += up[i] * y[i];
  for (std::size_t i = 0; i < down.numel(); ++i) rhs += down[i] * x[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Kernels, ConvResultIndependentOfThreadCount) {
  std::mt19937_64 rng(5);
  const Tensor<float> x = random_tensor({4, 8, 32, 32}, rng).cast<float>();
  const Tensor<float> w = random_tensor({8, 8, 3, 3}, rng).cast<float>();
  const Tensor<float> dy = random_tensor({4, 8, 32, 32}, rng).cast<float>();
  set_num_threads(1);
  const auto one = kernels::conv2d_backward(x, w, dy, 1, 1, true, true);
  set_num_threads(3);
  const auto three = kernels::conv2d_backward(x, w, dy, 1, 1, true, true);
  set_num_threads(1);
  EXPECT_TRUE(one.weight == three.weight);
  EXPECT_TRUE(one.bias == three.bias);
  EXPECT_TRUE(one.input == three.input);
}
