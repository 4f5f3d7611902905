#include <gtest/gtest.h>

#include "echoseg/metrics.hpp"
#include "echoseg/postprocess.hpp"
#include "support.hpp"

using namespace echoseg;
using namespace echoseg::testing;

namespace {

LabelMap from_rows(const std::vector<std::string>& rows) {
  LabelMap l({rows.size(), rows[0].size()});
  for (std::size_t y = 0; y < rows.size(); ++y) {
    for (std::size_t x = 0; x < rows[0].size(); ++x) l.at(y, x) = static_cast<std::uint8_t>(rows[y][x] - '0');
  }
  return l;
}

// Random label maps with clumped regions so components vary in size.
LabelMap blobby(std::mt19937_64& rng, std::size_t size) {
  LabelMap l({size, size}, 0);
  std::uniform_int_distribution<std::size_t> pos(0, size - 1), rad(0, 4);
  std::uniform_int_distribution<int> cls(0, 3);
  const int blobs = std::uniform_int_distribution<int>(1, 12)(rng);
  for (int b = 0; b < blobs; ++b) {
    const std::size_t cy = pos(rng), cx = pos(rng), r = rad(rng);
    const auto c = static_cast<std::uint8_t>(cls(rng));
    for (std::size_t y = cy >= r ? cy - r : 0; y <= std::min(size - 1, cy + r); ++y) {
      for (std::size_t x = cx >= r ? cx - r : 0; x <= std::min(size - 1, cx + r); ++x) l.at(y, x) = c;
    }
  }
  return l;
}

}  // namespace

TEST(ConnectedComponents, FourVersusEight) {
  const LabelMap l = from_rows({"100", "010", "001"});
  EXPECT_EQ(connected_components(class_mask(l, 1), Connectivity::four).count(), 3u);
  EXPECT_EQ(connected_components(class_mask(l, 1), Connectivity::eight).count(), 1u);
}

TEST(ConnectedComponents, UShapeMergesLate) {
  const LabelMap l = from_rows({"1010", "1010", "1110"});
  const LabeledComponents c = connected_components(class_mask(l, 1));
  ASSERT_EQ(c.count(), 1u);
  EXPECT_EQ(c.sizes[0], 7u);
}

TEST(ConnectedComponents, IdsInRasterOrder) {
  const LabelMap l = from_rows({"0011", "1000", "1001"});
  const LabeledComponents c = connected_components(class_mask(l, 1));
  ASSERT_EQ(c.count(), 3u);
  EXPECT_EQ(c.ids[2], 1);
  EXPECT_EQ(c.ids[4], 2);
  EXPECT_EQ(c.ids[11], 3);
  EXPECT_EQ(c.sizes, (std::vector<std::size_t>{2, 2, 1}));
}

TEST(KeepLargest, RemovesSmallerPieces) {
  const LabelMap l = from_rows({"1100022", "1100002", "0003000", "1003330"});
  const LabelMap out = keep_largest(l);
  EXPECT_EQ(out, from_rows({"1100022", "1100002", "0003000", "0003330"}));
}

TEST(KeepLargest, TieGoesToFirstInRasterOrder) {
  const LabelMap l = from_rows({"1001", "0000"});
  EXPECT_EQ(keep_largest(l), from_rows({"1000", "0000"}));
}

TEST(KeepLargest, AgreesWithFloodFillReference) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const LabelMap l = i % 2 ? random_labels({32, 32}, rng) : blobby(rng, 32);
    ASSERT_EQ(keep_largest(l), keep_largest_reference(l)) << "map " << i;
  }
}

TEST(KeepLargest, Idempotent) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const LabelMap once = keep_largest(blobby(rng, 24));
    EXPECT_EQ(keep_largest(once), once);
  }
}

TEST(KeepLargest, EachClassEndsWithAtMostOneComponent) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 100; ++i) {
    const LabelMap out = keep_largest(random_labels({20, 20}, rng));
    for (std::uint8_t c = 1; c < 4; ++c) EXPECT_LE(class_components(out, c).count(), 1u);
  }
}

TEST(KeepLargest, BatchOfFrames) {
  std::mt19937_64 rng(7);
  LabelMap batch({3, 16, 16});
  std::vector<LabelMap> frames;
  for (std::size_t n = 0; n < 3; ++n) {
    frames.push_back(blobby(rng, 16));
    std::copy(frames.back().values().begin(), frames.back().values().end(), batch.storage().begin() + n * 256);
  }
  const LabelMap out = keep_largest(batch);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(out.slice0(n, n + 1).reshaped({16, 16}), keep_largest(frames[n]));
  }
}

TEST(KeepLargest, RejectsInvalidLabels) {
  EXPECT_THROW(keep_largest(LabelMap({4, 4}, 7)), CorruptLabelError);
}

TEST(Morphology, OpeningRemovesSpecksClosingFillsGaps) {
  const LabelMap speck = from_rows({"000000", "011100", "011100", "011100", "000001", "000000"});
  const Mask opened = morphology(class_mask(speck, 1), MorphOp::open, 1);
  EXPECT_EQ(opened[4 * 6 + 5], 0);
  EXPECT_EQ(opened[2 * 6 + 2], 1);
  const LabelMap gap = from_rows({"0000000", "0111110", "0110110", "0111110", "0000000"});
  const Mask closed = morphology(class_mask(gap, 1), MorphOp::close, 1);
  EXPECT_EQ(closed[2 * 7 + 3], 1);
}

TEST(Morphology, ErosionDilationDuality) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) {
    const Mask m = class_mask(random_labels({12, 12}, rng, 2), 1);
    Mask inv(m.shape());
    for (std::size_t k = 0; k < m.numel(); ++k) inv[k] = !m[k];
    const Mask e = erode(m, 1), d = dilate(inv, 1);
    // Interior pixels only: the clipped window breaks duality at the border.
    for (std::size_t y = 1; y + 1 < 12; ++y) {
      for (std::size_t x = 1; x + 1 < 12; ++x) EXPECT_EQ(e[y * 12 + x], !d[y * 12 + x]);
    }
  }
}

TEST(Morphology, RadiusZeroRejected) {
  EXPECT_THROW(morphology(Mask({4, 4}), MorphOp::open, 0), InvalidConfigError);
}

TEST(Postprocess, ConfigCombinations) {
  const LabelMap l = from_rows({"1100001", "1100000", "0000000"});
  PostprocessConfig none{false, std::nullopt, 1};
  EXPECT_EQ(postprocess(l, none), l);
  PostprocessConfig cca;
  EXPECT_EQ(postprocess(l, cca), keep_largest(l));
}
