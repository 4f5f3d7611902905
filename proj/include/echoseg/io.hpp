#pragma once

// Binary file formats: 8-bit PGM/PPM images and the weights container.
//
// Weights layout (all integers little-endian):
//   8 bytes   magic "ECHOSEGW"
//   u32       format version (1)
//   u32       tensor count
//   per tensor:
//     u32     name length in bytes, then the UTF-8 name
//     u32     rank, then rank x u64 dimensions
//     f32     product(dims) values, IEEE-754 binary32, row-major

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "echoseg/error.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingFileError("cannot create '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CorruptFileError("failed writing '" + path + "'");
}

}  // namespace detail

// ------------------------------------------------------------------ PGM

/// Parses a binary 8-bit PGM (P5) into [H,W] bytes.
inline Tensor<std::uint8_t> parse_pgm(std::string_view bytes, const std::string& source = "pgm") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> CorruptFileError { return CorruptFileError(source + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) throw fail(std::string(what) + " too large");
    }
    if (digits == 0) throw fail(std::string("missing ") + what);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("not a binary PGM (magic must be P5)");
  pos = 2;
  const std::size_t width = number("width"), height = number("height"), maxval = number("maxval");
  if (width == 0 || height == 0) throw fail("zero image dimension");
  if (maxval == 0 || maxval > 255) throw fail("maxval " + std::to_string(maxval) + " unsupported (need 1..255)");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("malformed header");
  ++pos;
  if (bytes.size() - pos < width * height) {
    throw fail("truncated payload: " + std::to_string(bytes.size() - pos) + " of " + std::to_string(width * height) +
               " bytes");
  }
  Tensor<std::uint8_t> img({height, width});
  std::memcpy(img.data(), bytes.data() + pos, width * height);
  return img;
}

inline Tensor<std::uint8_t> read_pgm(const std::string& path) { return parse_pgm(detail::read_file(path), path); }

inline std::string format_pgm(const Tensor<std::uint8_t>& img) {
  if (img.rank() != 2) throw InvalidShapeError("PGM image must be 2-D, got " + shape_string(img.shape()));
  std::string out = "P5\n" + std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data()), img.numel());
  return out;
}

inline void write_pgm(const std::string& path, const Tensor<std::uint8_t>& img) {
  detail::write_file(path, format_pgm(img));
}

/// Rounds and clamps float intensities to bytes.
inline Tensor<std::uint8_t> to_bytes(const Tensor<float>& img) {
  Tensor<std::uint8_t> out(img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(img[i]), 0L, 255L));
  }
  return out;
}

/// Writes an RGB image [H,W,3] as binary PPM (P6).
inline void write_ppm(const std::string& path, const Tensor<std::uint8_t>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) throw InvalidShapeError("PPM image must be [H,W,3]");
  std::string out = "P6\n" + std::to_string(rgb.dim(1)) + " " + std::to_string(rgb.dim(0)) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.numel());
  detail::write_file(path, out);
}

/// Tints LV red, MYO green and LA blue over the grayscale image.
inline Tensor<std::uint8_t> overlay(const Tensor<std::uint8_t>& gray, const LabelMap& label, double alpha = 0.45) {
  if (gray.rank() != 2 || gray.shape() != label.shape()) throw InvalidShapeError("overlay: image/label shape mismatch");
  static constexpr std::uint8_t colors[4][3] = {{0, 0, 0}, {230, 40, 40}, {40, 200, 60}, {50, 90, 230}};
  const std::size_t H = gray.dim(0), W = gray.dim(1);
  Tensor<std::uint8_t> out({H, W, 3});
  for (std::size_t i = 0; i < H * W; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double v = gray[i];
      if (label[i] > 0 && label[i] < 4) v = (1 - alpha) * v + alpha * colors[label[i]][ch];
      out[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return out;
}

// -------------------------------------------------------------- weights

inline constexpr std::string_view kWeightsMagic = "ECHOSEGW";
inline constexpr std::uint32_t kWeightsVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& why) const {
    throw CorruptFileError(source_ + ": " + why + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated file");
  }
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string format_weights(const NamedTensors& tensors) {
  std::string out(kWeightsMagic);
  detail::put_le<std::uint32_t>(out, kWeightsVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (float v : t.values()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline NamedTensors parse_weights(std::string_view bytes, const std::string& source = "weights") {
  detail::Reader r(bytes, source);
  if (bytes.size() < kWeightsMagic.size() || r.take(kWeightsMagic.size()) != kWeightsMagic) {
    throw CorruptFileError(source + ": not a weights file (bad magic)");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kWeightsVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto rank = r.le<std::uint32_t>();
    if (rank == 0 || rank > 8) r.fail("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.le<std::uint64_t>();
      if (dim == 0 || dim > (std::uint64_t{1} << 32)) r.fail("tensor '" + name + "' has invalid dimension");
      shape.push_back(static_cast<std::size_t>(dim));
      numel *= dim;
      if (numel > (std::uint64_t{1} << 34)) r.fail("tensor '" + name + "' is implausibly large");
    }
    const std::string_view raw = r.take(static_cast<std::size_t>(numel) * 4);
    std::vector<float> data(static_cast<std::size_t>(numel));
    for (std::size_t j = 0; j < data.size(); ++j) {
      std::uint32_t u = 0;
      for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[j * 4 + b])) << (8 * b);
      data[j] = std::bit_cast<float>(u);
    }
    out.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");
  return out;
}

inline void write_weights(const std::string& path, const NamedTensors& tensors) {
  detail::write_file(path, format_weights(tensors));
}

inline NamedTensors read_weights(const std::string& path) { return parse_weights(detail::read_file(path), path); }

inline std::map<std::string, Tensor<float>> to_map(const NamedTensors& tensors) {
  std::map<std::string, Tensor<float>> m;
  for (const auto& [name, t] : tensors) {
    if (!m.emplace(name, t).second) throw CorruptFileError("duplicate tensor name '" + name + "'");
  }
  return m;
}

/// Persistent state of a model as named float tensors.
template <class Model>
NamedTensors model_state(Model& model) {
  NamedTensors out;
  for (auto& [name, t] : model.state()) out.emplace_back(name, t->template cast<float>());
  return out;
}

template <class Model>
void save_model(const std::string& path, Model& model) {
  write_weights(path, model_state(model));
}

template <class Model>
void load_model(const std::string& path, Model& model) {
  model.load_state(to_map(read_weights(path)));
}

}  // namespace echoseg
