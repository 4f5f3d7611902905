#include <gtest/gtest.h>

#include <filesystem>

#include "echoseg/io.hpp"
#include "support.hpp"

using namespace echoseg;
using namespace echoseg::testing;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "echoseg_io_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST(Pgm, RoundTrip) {
  std::mt19937_64 rng(1);
  const Tensor<std::uint8_t> img = random_labels({13, 7}, rng, 256);
  EXPECT_EQ(parse_pgm(format_pgm(img)), img);
  const std::string path = temp_path("a.pgm");
  write_pgm(path, img);
  EXPECT_EQ(read_pgm(path), img);
}

TEST(Pgm, HeaderCommentsAndMaxval) {
  const std::string bytes = std::string("P5\n# made by hand\n2 1\n# another\n255\n") + '\x07' + '\x09';
  const Tensor<std::uint8_t> img = parse_pgm(bytes);
  EXPECT_EQ(img.shape(), (Shape{1, 2}));
  EXPECT_EQ(img[1], 9);
}

TEST(Pgm, RejectsCorruptInput) {
  EXPECT_THROW(parse_pgm("P2\n1 1\n255\n0"), CorruptFileError);
  EXPECT_THROW(parse_pgm("P5\n2 2\n255\nab"), CorruptFileError);
  EXPECT_THROW(parse_pgm("P5\n2 2\n65535\nabcdefgh"), CorruptFileError);
  EXPECT_THROW(parse_pgm("P5\n0 2\n255\n"), CorruptFileError);
  EXPECT_THROW(read_pgm(temp_path("missing.pgm")), MissingFileError);
}

TEST(Pgm, ToBytesRoundsAndClamps) {
  const Tensor<float> f({1, 4}, std::vector<float>{-3.0f, 1.4f, 1.6f, 300.0f});
  const Tensor<std::uint8_t> b = to_bytes(f);
  EXPECT_EQ(std::vector<std::uint8_t>(b.values().begin(), b.values().end()), (std::vector<std::uint8_t>{0, 1, 2, 255}));
}

TEST(Overlay, TintsClassesAndKeepsSize) {
  const Tensor<std::uint8_t> gray({2, 2}, 100);
  const LabelMap label({2, 2}, std::vector<std::uint8_t>{0, 1, 2, 3});
  const Tensor<std::uint8_t> rgb = overlay(gray, label);
  EXPECT_EQ(rgb.shape(), (Shape{2, 2, 3}));
  EXPECT_EQ(rgb[0], 100);
  EXPECT_EQ(rgb[1], 100);
  EXPECT_GT(rgb[3], rgb[4]);   // LV: red dominates
  EXPECT_GT(rgb[7], rgb[6]);   // MYO: green
  EXPECT_GT(rgb[11], rgb[9]);  // LA: blue
}

TEST(Weights, RoundTripIsBitExact) {
  std::mt19937_64 rng(2);
  NamedTensors t;
  t.emplace_back("enc0.conv1.weight", random_tensor({4, 1, 3, 3}, rng).cast<float>());
  t.emplace_back("bias", Tensor<float>({4}, std::vector<float>{0.0f, -0.0f, 1e-38f, 3.4e38f}));
  const std::string bytes = format_weights(t);
  const NamedTensors back = parse_weights(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, t[0].first);
  EXPECT_EQ(format_weights(back), bytes);
  const std::string path = temp_path("w.ckpt");
  write_weights(path, t);
  EXPECT_EQ(format_weights(read_weights(path)), bytes);
}

TEST(Weights, RejectsCorruption) {
  NamedTensors t;
  t.emplace_back("x", Tensor<float>({2}, 1.0f));
  const std::string bytes = format_weights(t);
  EXPECT_THROW(parse_weights(bytes.substr(0, bytes.size() - 1)), CorruptFileError);
  EXPECT_THROW(parse_weights(bytes + "x"), CorruptFileError);
  EXPECT_THROW(parse_weights("NOTMAGIC" + bytes.substr(8)), CorruptFileError);
  NamedTensors dup = t;
  dup.push_back(t[0]);
  EXPECT_THROW(to_map(parse_weights(format_weights(dup))), CorruptFileError);
}
