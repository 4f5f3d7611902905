#include <gtest/gtest.h>

#include "echoseg/augmentation.hpp"
#include "echoseg/dataset.hpp"

using namespace echoseg;

namespace {

SegmentationSample phantom() {
  PhantomOptions o;
  o.size = 64;
  return generate_phantoms(1, 3, o).front();
}

}  // namespace

TEST(Augmentation, IdentityTransformReturnsInput) {
  const SegmentationSample s = phantom();
  const SegmentationSample out = apply_geometric(s, SampledTransform{});
  EXPECT_TRUE(out.image == s.image);
  EXPECT_TRUE(out.label == s.label);
  const Augmented a = augment(s, augment_presets::none(), 7);
  EXPECT_TRUE(a.sample.image == s.image);
  EXPECT_TRUE(a.sample.label == s.label);
}

TEST(Augmentation, SameSeedSameResult) {
  const SegmentationSample s = phantom();
  for (const auto& name : augment_presets::names()) {
    const auto cfg = augment_presets::by_name(name);
    const Augmented a = augment(s, cfg, 99), b = augment(s, cfg, 99);
    EXPECT_EQ(a.transform, b.transform) << name;
    EXPECT_TRUE(a.sample.image == b.sample.image) << name;
    EXPECT_TRUE(a.sample.label == b.sample.label) << name;
  }
}

TEST(Augmentation, IntegerShiftMovesLabelExactly) {
  const SegmentationSample s = phantom();
  SampledTransform t;
  t.shift_x = 3;
  t.shift_y = -2;
  const SegmentationSample out = apply_geometric(s, t);
  const std::size_t H = 64, W = 64;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const long sy = static_cast<long>(y) + 2, sx = static_cast<long>(x) - 3;
      const bool inside = sy >= 0 && sx >= 0 && sy < 64 && sx < 64;
      const std::uint8_t want = inside ? s.label.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0;
      ASSERT_EQ(out.label.at(y, x), want) << y << "," << x;
      const float img = inside ? s.image.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0f;
      ASSERT_FLOAT_EQ(out.image.at(y, x), img);
    }
  }
}

TEST(Augmentation, MirrorTwiceIsIdentity) {
  const SegmentationSample s = phantom();
  SampledTransform t;
  t.mirror = true;
  const SegmentationSample once = apply_geometric(s, t);
  EXPECT_FALSE(once.label == s.label);
  const SegmentationSample twice = apply_geometric(once, t);
  EXPECT_TRUE(twice.label == s.label);
  EXPECT_TRUE(twice.image == s.image);
}

TEST(Augmentation, RotationBy90Degrees) {
  // About the center of an even-sized grid a quarter turn is a pure index
  // permutation.
  const SegmentationSample s = phantom();
  SampledTransform t;
  t.angle = 90;
  const SegmentationSample out = apply_geometric(s, t);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      ASSERT_EQ(out.label.at(y, x), s.label.at(63 - x, y));
    }
  }
}

TEST(Augmentation, LabelsStayValidAndImageInRange) {
  const SegmentationSample s = phantom();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Augmented a = augment(s, augment_presets::level(5), seed);
    EXPECT_NO_THROW(validate_sample(a.sample));
    for (float v : a.sample.image.values()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 255.0f);
    }
  }
}

TEST(Augmentation, SampledParametersStayInBands) {
  const AugmentationConfig cfg = augment_presets::level(3);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    const SampledTransform t = sample(cfg, rng, 256, 256);
    EXPECT_LE(std::abs(t.shift_x), 0.15 * 256 + 1e-9);
    EXPECT_LE(std::abs(t.shift_y), 0.15 * 256 + 1e-9);
    EXPECT_GE(t.scale, 0.7 - 1e-12);
    EXPECT_LE(t.scale, 1.15 + 1e-12);
    EXPECT_LE(std::abs(t.angle), 15.0);
    if (t.gamma) {
      EXPECT_GE(*t.gamma, 80);
      EXPECT_LE(*t.gamma, 120);
    }
    if (t.blackout) {
      EXPECT_GE(t.blackout->side_h, 25u);
      EXPECT_LE(t.blackout->side_h, 65u);
      EXPECT_LE(t.blackout->y1, 256u);
      EXPECT_LT(t.blackout->y0, t.blackout->y1);
    }
  }
}

TEST(Augmentation, AffinePresetIsGeometricOnly) {
  const AugmentationConfig cfg = augment_presets::affine();
  std::mt19937_64 rng(6);
  int fired = 0;
  for (int i = 0; i < 200; ++i) {
    const SampledTransform t = sample(cfg, rng, 256, 256);
    EXPECT_FALSE(t.gamma || t.noise_sigma || t.blackout || t.brightness || t.hue);
    fired += !t.is_identity_geometry();
  }
  EXPECT_GT(fired, 100);  // three transforms at p = 0.5: 7/8 expected
}

TEST(Augmentation, FireProbabilityIsRespected) {
  AugmentationConfig cfg = augment_presets::affine();
  cfg.fire_prob = 0;
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) EXPECT_TRUE(sample(cfg, rng, 64, 64).is_identity_geometry());
}

TEST(Augmentation, BlackoutZeroesImageOnly) {
  const SegmentationSample s = phantom();
  SampledTransform t;
  t.blackout = BlackoutRect{10, 12, 20, 30, 10, 18};
  const Tensor<float> img = apply_blackout(s.image, t);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const bool in = y >= 10 && y < 20 && x >= 12 && x < 30;
      EXPECT_EQ(img.at(y, x), in ? 0.0f : s.image.at(y, x));
    }
  }
}

TEST(Augmentation, GammaFormula) {
  Tensor<float> img({1, 3}, std::vector<float>{0, 127.5f, 255});
  SampledTransform t;
  t.gamma = 50;
  const Tensor<float> out = apply_photometric(img, t);
  EXPECT_FLOAT_EQ(out[0], 0.0f);
  EXPECT_NEAR(out[1], 255.0 * 0.25, 1e-3);
  EXPECT_FLOAT_EQ(out[2], 255.0f);
}

TEST(Augmentation, PresetLookup) {
  EXPECT_EQ(augment_presets::by_name("III").name, "III");
  EXPECT_EQ(augment_presets::by_name("nnunet-like").mirror_prob, 0.5);
  EXPECT_THROW(augment_presets::by_name("VI"), InvalidConfigError);
  EXPECT_THROW(augment_presets::level(0), InvalidConfigError);
}

TEST(Augmentation, ValidationRejectsBadRanges) {
  AugmentationConfig c = augment_presets::affine();
  c.rotate = Range{5, -5};
  EXPECT_THROW(c.validate(), InvalidConfigError);
  c = augment_presets::affine();
  c.fire_prob = 1.5;
  EXPECT_THROW(c.validate(), InvalidConfigError);
}
