#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "echoseg/error.hpp"
#include "echoseg/io.hpp"
#include "echoseg/metrics.hpp"
#include "echoseg/sample.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

inline constexpr const char* kImageSuffix = "_img.pgm";
inline constexpr const char* kLabelSuffix = "_lbl.pgm";
inline constexpr const char* kManifestName = "manifest.txt";

inline SegmentationSample load_sample(const std::filesystem::path& dir, const std::string& id) {
  const auto img_path = dir / (id + kImageSuffix), lbl_path = dir / (id + kLabelSuffix);
  if (!std::filesystem::exists(img_path)) throw MissingFileError("sample '" + id + "': missing " + img_path.string());
  if (!std::filesystem::exists(lbl_path)) throw MissingFileError("sample '" + id + "': missing " + lbl_path.string());
  SegmentationSample s{id, read_pgm(img_path.string()).cast<float>(), read_pgm(lbl_path.string())};
  validate_label(s.label, id);
  validate_sample(s);
  return s;
}

/// Loads every `<id>_img.pgm` / `<id>_lbl.pgm` pair in a directory, sorted by
/// id. A `manifest.txt` (one id per line) pins the set and order instead.
inline std::vector<SegmentationSample> load_dataset(const std::string& directory) {
  const std::filesystem::path dir(directory);
  if (!std::filesystem::is_directory(dir)) throw MissingFileError("dataset directory '" + directory + "' not found");
  std::vector<std::string> ids;
  const auto manifest = dir / kManifestName;
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
      line.erase(line.find_last_not_of(" \t\r") + 1);
      line.erase(0, line.find_first_not_of(" \t"));
      if (line.empty() || line[0] == '#') continue;
      if (!seen.insert(line).second) throw InvalidInputError("manifest lists '" + line + "' twice");
      ids.push_back(line);
    }
  } else {
    std::set<std::string> images, labels;
    auto strip = [](const std::string& name, std::string_view suffix, std::set<std::string>& into) {
      if (name.size() > suffix.size() && name.ends_with(suffix)) into.insert(name.substr(0, name.size() - suffix.size()));
    };
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string name = entry.path().filename().string();
      strip(name, kImageSuffix, images);
      strip(name, kLabelSuffix, labels);
    }
    for (const auto& id : images) {
      if (!labels.contains(id)) throw MissingFileError("sample '" + id + "' has an image but no label file");
    }
    for (const auto& id : labels) {
      if (!images.contains(id)) throw MissingFileError("sample '" + id + "' has a label but no image file");
    }
    ids.assign(images.begin(), images.end());
  }
  std::vector<SegmentationSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_sample(dir, id));
  return out;
}

/// Writes samples as PGM pairs plus a manifest preserving their order.
inline void save_dataset(const std::string& directory, const std::vector<SegmentationSample>& samples) {
  const std::filesystem::path dir(directory);
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (const auto& s : samples) {
    validate_sample(s);
    write_pgm((dir / (s.id + kImageSuffix)).string(), to_bytes(s.image));
    write_pgm((dir / (s.id + kLabelSuffix)).string(), s.label);
    manifest += s.id + "\n";
  }
  detail::write_file((dir / kManifestName).string(), manifest);
}

// --------------------------------------------------------------- split

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
};

/// Seeded shuffle, then 10% validation and 10% test (each rounded down) with
/// the remainder used for training.
inline DatasetSplit split(const std::vector<std::string>& ids, std::uint64_t seed) {
  if (ids.size() < 10) {
    throw InvalidInputError("split needs at least 10 samples, got " + std::to_string(ids.size()));
  }
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t n_val = ids.size() / 10, n_test = ids.size() / 10;
  DatasetSplit s;
  s.seed = seed;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), order.end());
  return s;
}

inline DatasetSplit split(const std::vector<SegmentationSample>& samples, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.id);
  return split(ids, seed);
}

inline std::vector<SegmentationSample> select(const std::vector<SegmentationSample>& samples,
                                              const std::vector<std::string>& ids) {
  std::map<std::string, const SegmentationSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<SegmentationSample> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InvalidInputError("unknown sample id '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

// ------------------------------------------------------------ phantoms

/// Geometry bands for the synthetic apical-view phantoms. Lengths are
/// fractions of the image side.
struct PhantomOptions {
  std::size_t size = 256;
  Range lv_long{0.20, 0.26};   // LV semi-axis along the long axis
  Range lv_short{0.09, 0.13};  // LV semi-axis across
  Range tilt{-15, 15};         // long-axis tilt from vertical, degrees
  Range center_jitter{-0.05, 0.05};
  Range myo_thickness{0.030, 0.050};
  Range la_long{0.08, 0.11};
  Range la_short{0.08, 0.12};
  double speckle = 0.30;  // std-dev of the multiplicative noise
  std::size_t max_attempts = 100;

  bool operator==(const PhantomOptions&) const = default;
};

/// A second domain whose myocardium is drawn markedly thicker.
inline PhantomOptions thick_myocardium(PhantomOptions o = {}) {
  o.myo_thickness = Range{0.060, 0.080};
  return o;
}

namespace detail {

struct Ellipse {
  double cy, cx, a, b;  // a along the (tilted) long axis, b across
  double uy, ux;        // unit long-axis direction (pointing away from the apex)

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double along = dy * uy + dx * ux, across = -dy * ux + dx * uy;
    return (along * along) / (a * a) + (across * across) / (b * b) <= 1.0;
  }
};

inline SegmentationSample draw_phantom(const PhantomOptions& o, std::mt19937_64& rng) {
  auto uni = [&](const Range& r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  const auto S = static_cast<double>(o.size);
  const double tilt = uni(o.tilt) * std::numbers::pi / 180;
  const double uy = std::cos(tilt), ux = std::sin(tilt);
  const double lv_a = uni(o.lv_long) * S, lv_b = uni(o.lv_short) * S;
  const double cy = 0.40 * S + uni(o.center_jitter) * S, cx = 0.50 * S + uni(o.center_jitter) * S;
  const double t = uni(o.myo_thickness) * S;
  const double la_a = uni(o.la_long) * S, la_b = uni(o.la_short) * S;
  const Ellipse lv{cy, cx, lv_a, lv_b, uy, ux};
  const Ellipse myo{cy, cx, lv_a + t, lv_b + t, uy, ux};
  // The atrium sits past the base of the ventricle and overlaps the
  // myocardial wall slightly so the two touch.
  const double off = lv_a + t + 0.8 * la_a;
  const Ellipse la{cy + off * uy, cx + off * ux, la_a, la_b, uy, ux};

  // Imaging sector: apex at the top center, +-38 degrees, radius 0.92 S.
  const double apex_y = 0.02 * S, apex_x = 0.5 * S, radius = 0.92 * S;
  const double half_angle = 38 * std::numbers::pi / 180;
  auto in_sector = [&](double y, double x) {
    const double dy = y - apex_y, dx = x - apex_x;
    return dy > 0 && dy * dy + dx * dx <= radius * radius && std::abs(std::atan2(dx, dy)) <= half_angle;
  };

  SegmentationSample s{"", Tensor<float>({o.size, o.size}), LabelMap({o.size, o.size})};
  std::normal_distribution<double> speckle(1.0, o.speckle);
  for (std::size_t yi = 0; yi < o.size; ++yi) {
    for (std::size_t xi = 0; xi < o.size; ++xi) {
      const double y = static_cast<double>(yi) + 0.5, x = static_cast<double>(xi) + 0.5;
      std::uint8_t cls = 0;
      if (lv.contains(y, x)) {
        cls = 1;
      } else if (myo.contains(y, x)) {
        cls = 2;
      } else if (la.contains(y, x)) {
        cls = 3;
      }
      const bool sector = in_sector(y, x);
      if (cls != 0 && !sector) cls = 0;
      double base = sector ? 70.0 : 0.0;
      if (cls == 1 || cls == 3) base = 22.0;
      if (cls == 2) base = 160.0;
      // Draw the noise for every pixel so the stream does not depend on the geometry.
      const double v = base * std::max(0.0, speckle(rng));
      s.image.at(yi, xi) = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
      s.label.at(yi, xi) = cls;
    }
  }
  return s;
}

}  // namespace detail

/// n synthetic frames: a bright sector on black, a dark elliptical LV
/// wrapped in a bright myocardial ring, and a dark LA below it, with
/// multiplicative speckle. Frames whose labels would count as anatomical
/// outliers are redrawn.
inline std::vector<SegmentationSample> generate_phantoms(std::size_t n, std::uint64_t seed,
                                                         const PhantomOptions& options = {}) {
  if (n == 0) throw InvalidInputError("generate_phantoms: n must be >= 1");
  if (options.size < 32) throw InvalidInputError("generate_phantoms: size must be >= 32");
  std::mt19937_64 rng(seed);
  std::vector<SegmentationSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t attempt = 0;
    while (true) {
      SegmentationSample s = detail::draw_phantom(options, rng);
      if (!anatomical_outlier(s.label)) {
        char id[32];
        std::snprintf(id, sizeof id, "phantom_%05zu", i);
        s.id = id;
        out.push_back(std::move(s));
        break;
      }
      if (++attempt >= options.max_attempts) {
        throw InvalidConfigError("generate_phantoms: geometry bands never produce a valid frame");
      }
    }
  }
  return out;
}

}  // namespace echoseg
