#pragma once

// Joint image/label geometric warps and image-only photometric transforms.
// Everything is driven by a SampledTransform, so a pipeline run can be
// replayed exactly from (config, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "echoseg/error.hpp"
#include "echoseg/sample.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

struct AugmentationConfig {
  std::string name = "none";
  std::optional<Range> shift;      // fraction of image side, per axis
  std::optional<Range> scale;      // zoom factor is 1 + delta
  std::optional<Range> rotate;     // degrees
  std::optional<Range> gamma;      // percent, 100 is identity
  std::optional<Range> noise_var;  // intensity^2
  double blackout_prob = 0;
  Range blackout_side{25, 65};  // pixels
  std::optional<Range> bcs;     // brightness, contrast, saturation factors
  std::optional<Range> hue;     // fractional hue shift
  double mirror_prob = 0;       // horizontal flip
  double fire_prob = 0.5;       // per-transform application probability

  bool empty() const {
    return !shift && !scale && !rotate && !gamma && !noise_var && blackout_prob == 0 && !bcs && !hue &&
           mirror_prob == 0;
  }

  void validate() const {
    auto check = [this](const std::optional<Range>& r, const char* what) {
      if (r && !(r->lo <= r->hi)) {
        throw InvalidConfigError("augmentation '" + name + "': " + what + " range has low > high");
      }
    };
    check(shift, "shift");
    check(scale, "scale");
    check(rotate, "rotate");
    check(gamma, "gamma");
    check(noise_var, "noise");
    check(bcs, "brightness/contrast/saturation");
    check(hue, "hue");
    if (!(blackout_side.lo <= blackout_side.hi) || blackout_side.lo < 1) {
      throw InvalidConfigError("augmentation '" + name + "': blackout side range invalid");
    }
    for (double p : {blackout_prob, mirror_prob, fire_prob}) {
      if (!(p >= 0 && p <= 1)) throw InvalidConfigError("augmentation '" + name + "': probability outside [0,1]");
    }
    if (gamma && gamma->lo <= 0) throw InvalidConfigError("augmentation '" + name + "': gamma must be positive");
    if (noise_var && noise_var->lo < 0) throw InvalidConfigError("augmentation '" + name + "': negative noise variance");
    if (scale && scale->lo <= -1) throw InvalidConfigError("augmentation '" + name + "': scale delta must exceed -1");
  }

  bool operator==(const AugmentationConfig&) const = default;
};

struct BlackoutRect {
  std::size_t y0, x0, y1, x1;  // half-open, already clipped to the image
  std::size_t side_h, side_w;  // sampled sides before clipping

  bool operator==(const BlackoutRect&) const = default;
};

/// Concrete parameters for one sample. Absent optionals mean "not applied".
struct SampledTransform {
  double shift_x = 0, shift_y = 0;  // pixels
  double scale = 1;
  double angle = 0;  // degrees, clockwise as displayed (rows grow downward)
  bool mirror = false;
  std::optional<double> gamma;
  std::optional<double> noise_sigma;
  std::optional<BlackoutRect> blackout;
  std::optional<double> brightness, contrast, saturation;
  std::optional<double> hue;
  std::uint64_t seed = 0;

  bool is_identity_geometry() const { return shift_x == 0 && shift_y == 0 && scale == 1 && angle == 0 && !mirror; }

  bool operator==(const SampledTransform&) const = default;
};

namespace augment_presets {

inline AugmentationConfig none() { return {}; }

/// Rows I..V of the augmentation plan. The shift column is read as a
/// symmetric fraction of the image side.
inline AugmentationConfig level(int row) {
  struct Row {
    double shift, scale_lo, scale_hi, rot, gamma_lo, gamma_hi, noise_lo, noise_hi, bcs, hue;
  };
  static constexpr Row rows[] = {
      {0.05, -0.1, 0.05, 5, 90, 110, 5, 10, 0.05, 0.05},
      {0.10, -0.2, 0.10, 10, 85, 115, 10, 25, 0.10, 0.10},
      {0.15, -0.3, 0.15, 15, 80, 120, 20, 35, 0.15, 0.15},
      {0.20, -0.4, 0.20, 20, 70, 130, 30, 45, 0.20, 0.20},
      {0.25, -0.5, 0.25, 30, 60, 140, 40, 50, 0.25, 0.25},
  };
  if (row < 1 || row > 5) throw InvalidConfigError("augmentation level must be 1..5");
  const Row& r = rows[row - 1];
  static constexpr std::string_view names[] = {"I", "II", "III", "IV", "V"};
  AugmentationConfig c;
  c.name = std::string(names[row - 1]);
  c.shift = Range{-r.shift, r.shift};
  c.scale = Range{r.scale_lo, r.scale_hi};
  c.rotate = Range{-r.rot, r.rot};
  c.gamma = Range{r.gamma_lo, r.gamma_hi};
  c.noise_var = Range{r.noise_lo, r.noise_hi};
  c.blackout_prob = 0.25;
  c.bcs = Range{1 - r.bcs, 1 + r.bcs};
  c.hue = Range{-r.hue, r.hue};
  return c;
}

inline AugmentationConfig affine() {
  AugmentationConfig c;
  c.name = "affine";
  c.shift = Range{-0.1, 0.1};
  c.scale = Range{-0.2, 0.1};
  c.rotate = Range{-10, 10};
  return c;
}

/// Stand-in for the reference framework's default pipeline: level III plus
/// horizontal mirroring.
inline AugmentationConfig nnunet_like() {
  AugmentationConfig c = level(3);
  c.name = "nnunet-like";
  c.mirror_prob = 0.5;
  return c;
}

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> n{"none", "I", "II", "III", "IV", "V", "affine", "nnunet-like"};
  return n;
}

inline AugmentationConfig by_name(std::string_view name) {
  if (name == "none") return none();
  if (name == "affine") return affine();
  if (name == "nnunet-like") return nnunet_like();
  static constexpr std::string_view roman[] = {"I", "II", "III", "IV", "V"};
  for (int i = 0; i < 5; ++i) {
    if (name == roman[i]) return level(i + 1);
  }
  std::string list;
  for (const auto& n : names()) list += (list.empty() ? "" : ", ") + n;
  throw InvalidConfigError("unknown augmentation preset '" + std::string(name) + "' (available: " + list + ")");
}

}  // namespace augment_presets

namespace detail {
inline double uniform(std::mt19937_64& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}
inline bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0, 1)(rng) < p; }
}  // namespace detail

/// Draws concrete parameters for an image of the given size. Each configured
/// transform consumes its random numbers whether or not it fires, so later
/// draws never depend on earlier coin flips.
inline SampledTransform sample(const AugmentationConfig& config, std::mt19937_64& rng, std::size_t height,
                               std::size_t width) {
  config.validate();
  SampledTransform t;
  t.seed = rng();
  const double p = config.fire_prob;
  auto draw = [&](const std::optional<Range>& r) -> std::optional<double> {
    if (!r) return std::nullopt;
    const bool fire = detail::coin(rng, p);
    const double v = detail::uniform(rng, *r);
    return fire ? std::optional<double>(v) : std::nullopt;
  };
  if (config.shift) {
    const bool fire = detail::coin(rng, p);
    const double sx = detail::uniform(rng, *config.shift), sy = detail::uniform(rng, *config.shift);
    if (fire) {
      t.shift_x = sx * static_cast<double>(width);
      t.shift_y = sy * static_cast<double>(height);
    }
  }
  if (auto s = draw(config.scale)) t.scale = 1 + *s;
  if (auto a = draw(config.rotate)) t.angle = *a;
  if (config.mirror_prob > 0) t.mirror = detail::coin(rng, config.mirror_prob);
  t.gamma = draw(config.gamma);
  if (auto v = draw(config.noise_var)) t.noise_sigma = std::sqrt(*v);
  if (config.blackout_prob > 0) {
    const bool fire = detail::coin(rng, config.blackout_prob);
    std::uniform_int_distribution<std::size_t> side(static_cast<std::size_t>(std::ceil(config.blackout_side.lo)),
                                                    static_cast<std::size_t>(std::floor(config.blackout_side.hi)));
    const std::size_t h = side(rng), w = side(rng);
    const std::size_t cy = std::uniform_int_distribution<std::size_t>(0, height - 1)(rng);
    const std::size_t cx = std::uniform_int_distribution<std::size_t>(0, width - 1)(rng);
    if (fire) {
      // Centered on (cy, cx); the parts outside the frame are clipped.
      auto span = [](std::size_t center, std::size_t side, std::size_t limit) {
        const auto lo = static_cast<std::ptrdiff_t>(center) - static_cast<std::ptrdiff_t>(side / 2);
        const auto hi = lo + static_cast<std::ptrdiff_t>(side);
        return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo, 0)),
                                                   std::min(limit, static_cast<std::size_t>(hi)));
      };
      const auto [y0, y1] = span(cy, h, height);
      const auto [x0, x1] = span(cx, w, width);
      t.blackout = BlackoutRect{y0, x0, y1, x1, h, w};
    }
  }
  if (config.bcs) {
    t.brightness = draw(config.bcs);
    t.contrast = draw(config.bcs);
    t.saturation = draw(config.bcs);
  }
  t.hue = draw(config.hue);
  return t;
}

/// Warps image (bilinear) and label (nearest) with the same similarity
/// transform about the image center. Pixels mapping outside the frame become 0.
inline SegmentationSample apply_geometric(const SegmentationSample& s, const SampledTransform& t) {
  validate_sample(s);
  if (t.is_identity_geometry()) return s;
  const std::size_t H = s.image.dim(0), W = s.image.dim(1);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  const double rad = t.angle * std::numbers::pi / 180;
  const double c = std::cos(rad) / t.scale, sn = std::sin(rad) / t.scale;
  SegmentationSample out{s.id, Tensor<float>({H, W}), LabelMap({H, W})};
  const auto h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
  auto pixel = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
    return (y >= 0 && y < h && x >= 0 && x < w) ? static_cast<double>(s.image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)))
                                                : 0.0;
  };
  for (std::size_t oy = 0; oy < H; ++oy) {
    for (std::size_t ox = 0; ox < W; ++ox) {
      // Inverse map: undo shift, then rotation and scale about the center.
      const double dx = static_cast<double>(ox) - cx - t.shift_x;
      const double dy = static_cast<double>(oy) - cy - t.shift_y;
      double sx = c * dx + sn * dy;
      const double sy = -sn * dx + c * dy;
      if (t.mirror) sx = -sx;
      const double fx = sx + cx, fy = sy + cy;

      const double nx = std::floor(fx + 0.5), ny = std::floor(fy + 0.5);
      if (nx >= 0 && nx < static_cast<double>(W) && ny >= 0 && ny < static_cast<double>(H)) {
        out.label.at(oy, ox) = s.label.at(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx));
      }
      if (fx <= -1 || fy <= -1 || fx >= static_cast<double>(W) || fy >= static_cast<double>(H)) continue;
      const double x0 = std::floor(fx), y0 = std::floor(fy);
      const double ax = fx - x0, ay = fy - y0;
      const auto ix = static_cast<std::ptrdiff_t>(x0), iy = static_cast<std::ptrdiff_t>(y0);
      const double v = (1 - ay) * ((1 - ax) * pixel(iy, ix) + ax * pixel(iy, ix + 1)) +
                       ay * ((1 - ax) * pixel(iy + 1, ix) + ax * pixel(iy + 1, ix + 1));
      out.image.at(oy, ox) = static_cast<float>(v);
    }
  }
  return out;
}

/// Gamma, brightness, contrast and additive Gaussian noise on a grayscale
/// image, clipped to [0,255]. Saturation and hue have no effect on a single
/// channel and are ignored. Noise is drawn from t.seed.
inline Tensor<float> apply_photometric(const Tensor<float>& image, const SampledTransform& t) {
  Tensor<float> out = image;
  auto& v = out.storage();
  if (t.gamma) {
    const double e = 100.0 / *t.gamma;
    for (float& x : v) x = static_cast<float>(std::pow(std::clamp<double>(x, 0, 255) / 255.0, e) * 255.0);
  }
  if (t.brightness) {
    for (float& x : v) x = static_cast<float>(x * *t.brightness);
  }
  if (t.contrast) {
    double mean = 0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (float& x : v) x = static_cast<float>((x - mean) * *t.contrast + mean);
  }
  if (t.noise_sigma && *t.noise_sigma > 0) {
    std::mt19937_64 rng(t.seed);
    std::normal_distribution<double> noise(0, *t.noise_sigma);
    for (float& x : v) x = static_cast<float>(x + noise(rng));
  }
  for (float& x : v) x = std::clamp(x, 0.0f, 255.0f);
  return out;
}

inline Tensor<float> apply_blackout(const Tensor<float>& image, const SampledTransform& t) {
  if (!t.blackout) return image;
  Tensor<float> out = image;
  const BlackoutRect& r = *t.blackout;
  for (std::size_t y = r.y0; y < r.y1; ++y) {
    for (std::size_t x = r.x0; x < r.x1; ++x) out.at(y, x) = 0;
  }
  return out;
}

struct Augmented {
  SegmentationSample sample;
  SampledTransform transform;
};

/// Full pipeline: geometric, photometric, then blackout.
inline Augmented augment(const SegmentationSample& s, const AugmentationConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SampledTransform t = sample(config, rng, s.image.dim(0), s.image.dim(1));
  SegmentationSample out = apply_geometric(s, t);
  out.image = apply_blackout(apply_photometric(out.image, t), t);
  return {std::move(out), t};
}

}  // namespace echoseg
