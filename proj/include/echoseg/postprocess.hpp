#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "echoseg/error.hpp"
#include "echoseg/sample.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

enum class Connectivity { four = 4, eight = 8 };

/// ids[y*W+x] is 0 for background, otherwise a component id in 1..count.
/// sizes[i] is the pixel count of component i+1.
struct LabeledComponents {
  std::size_t height = 0, width = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> sizes;
  int cls = -1;  // class the mask was taken from, -1 when not applicable

  std::size_t count() const { return sizes.size(); }
};

namespace detail {

inline void require_2d(const Tensor<std::uint8_t>& m, const char* what) {
  if (m.rank() != 2) throw InvalidShapeError(std::string(what) + " must be 2-D, got " + shape_string(m.shape()));
}

class DisjointSet {
 public:
  std::int32_t make() {
    parent_.push_back(static_cast<std::int32_t>(parent_.size()));
    return parent_.back();
  }
  std::int32_t find(std::int32_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::int32_t> parent_;
};

}  // namespace detail

/// Two-pass union-find labeling of the nonzero pixels. Ids follow the raster
/// order of each component's first pixel.
inline LabeledComponents connected_components(const Mask& mask, Connectivity conn = Connectivity::four) {
  detail::require_2d(mask, "connected_components mask");
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  LabeledComponents out{H, W, std::vector<std::int32_t>(H * W, -1), {}, -1};
  detail::DisjointSet sets;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!mask[y * W + x]) continue;
      std::int32_t label = -1;
      auto link = [&](std::size_t ny, std::size_t nx) {
        const std::int32_t other = out.ids[ny * W + nx];
        if (other < 0) return;
        if (label < 0) {
          label = other;
        } else {
          sets.unite(label, other);
        }
      };
      if (x > 0) link(y, x - 1);
      if (y > 0) {
        link(y - 1, x);
        if (conn == Connectivity::eight) {
          if (x > 0) link(y - 1, x - 1);
          if (x + 1 < W) link(y - 1, x + 1);
        }
      }
      out.ids[y * W + x] = label < 0 ? sets.make() : label;
    }
  }
  std::vector<std::int32_t> final_id;
  for (auto& id : out.ids) {
    if (id < 0) {
      id = 0;
      continue;
    }
    const std::int32_t root = sets.find(id);
    if (static_cast<std::size_t>(root) >= final_id.size()) final_id.resize(root + 1, 0);
    if (final_id[root] == 0) {
      out.sizes.push_back(0);
      final_id[root] = static_cast<std::int32_t>(out.sizes.size());
    }
    id = final_id[root];
    ++out.sizes[id - 1];
  }
  return out;
}

inline Mask class_mask(const LabelMap& label, std::uint8_t cls) {
  Mask m(label.shape());
  for (std::size_t i = 0; i < label.numel(); ++i) m[i] = label[i] == cls;
  return m;
}

inline LabeledComponents class_components(const LabelMap& label, std::uint8_t cls,
                                          Connectivity conn = Connectivity::four) {
  LabeledComponents c = connected_components(class_mask(label, cls), conn);
  c.cls = cls;
  return c;
}

namespace detail {

inline LabelMap keep_largest_2d(const LabelMap& label) {
  LabelMap out = label;
  for (std::uint8_t cls = 1; cls < kNumClasses; ++cls) {
    const LabeledComponents c = class_components(label, cls);
    if (c.count() <= 1) continue;
    // max_element returns the first maximum, i.e. the earliest in raster order.
    const auto keep = static_cast<std::int32_t>(std::max_element(c.sizes.begin(), c.sizes.end()) - c.sizes.begin()) + 1;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      if (c.ids[i] != 0 && c.ids[i] != keep) out[i] = 0;
    }
  }
  return out;
}

template <class F>
LabelMap per_frame(const LabelMap& label, F&& f) {
  if (label.rank() == 2) return f(label);
  if (label.rank() != 3) throw InvalidShapeError("label map must be [H,W] or [N,H,W], got " + shape_string(label.shape()));
  LabelMap out(label.shape());
  const std::size_t plane = label.dim(1) * label.dim(2);
  for (std::size_t n = 0; n < label.dim(0); ++n) {
    const LabelMap frame = f(label.slice0(n, n + 1).reshaped({label.dim(1), label.dim(2)}));
    std::copy(frame.values().begin(), frame.values().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(n * plane));
  }
  return out;
}

}  // namespace detail

/// Keeps only the largest 4-connected component of every foreground class;
/// the other pixels become background. Accepts [H,W] or [N,H,W].
inline LabelMap keep_largest(const LabelMap& label) {
  validate_label(label, "prediction");
  return detail::per_frame(label, detail::keep_largest_2d);
}

enum class MorphOp { open, close };

namespace detail {

/// Square min/max filter of side 2r+1. The window is clipped to the image,
/// which for erosion treats outside pixels as foreground and for dilation
/// as background.
inline Mask rank_filter(const Mask& m, std::size_t r, bool erode) {
  const std::size_t H = m.dim(0), W = m.dim(1);
  Mask rows(m.shape()), out(m.shape());
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t lo = x >= r ? x - r : 0, hi = std::min(W - 1, x + r);
      std::uint8_t v = erode ? 1 : 0;
      for (std::size_t k = lo; k <= hi; ++k) v = erode ? std::min<std::uint8_t>(v, m[y * W + k] != 0) : std::max<std::uint8_t>(v, m[y * W + k] != 0);
      rows[y * W + x] = v;
    }
  }
  for (std::size_t y = 0; y < H; ++y) {
    const std::size_t lo = y >= r ? y - r : 0, hi = std::min(H - 1, y + r);
    for (std::size_t x = 0; x < W; ++x) {
      std::uint8_t v = erode ? 1 : 0;
      for (std::size_t k = lo; k <= hi; ++k) v = erode ? std::min(v, rows[k * W + x]) : std::max(v, rows[k * W + x]);
      out[y * W + x] = v;
    }
  }
  return out;
}

}  // namespace detail

inline Mask erode(const Mask& m, std::size_t radius) { return detail::rank_filter(m, radius, true); }
inline Mask dilate(const Mask& m, std::size_t radius) { return detail::rank_filter(m, radius, false); }

/// Binary opening or closing with a (2r+1)x(2r+1) square.
inline Mask morphology(const Mask& mask, MorphOp op, std::size_t radius) {
  detail::require_2d(mask, "morphology mask");
  if (radius < 1) throw InvalidConfigError("morphology radius must be >= 1");
  return op == MorphOp::open ? dilate(erode(mask, radius), radius) : erode(dilate(mask, radius), radius);
}

struct PostprocessConfig {
  bool keep_largest = true;
  std::optional<MorphOp> morphology;
  std::size_t radius = 1;

  bool operator==(const PostprocessConfig&) const = default;
};

/// Optional per-class morphology followed by largest-component selection.
/// Morphology is applied to each foreground class in order 1..3; where a
/// class grows into another class's pixels, the later class wins.
inline LabelMap postprocess(const LabelMap& label, const PostprocessConfig& cfg) {
  validate_label(label, "prediction");
  return detail::per_frame(label, [&](const LabelMap& frame) {
    LabelMap out = frame;
    if (cfg.morphology) {
      std::fill(out.storage().begin(), out.storage().end(), std::uint8_t{0});
      for (std::uint8_t cls = 1; cls < kNumClasses; ++cls) {
        const Mask m = morphology(class_mask(frame, cls), *cfg.morphology, cfg.radius);
        for (std::size_t i = 0; i < m.numel(); ++i) {
          if (m[i]) out[i] = cls;
        }
      }
    }
    return cfg.keep_largest ? detail::keep_largest_2d(out) : out;
  });
}

}  // namespace echoseg
