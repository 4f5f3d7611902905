#pragma once

#include <string>

#include "echoseg/error.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

inline constexpr std::size_t kNumClasses = 4;  // background, LV, MYO, LA

/// Closed interval used for sampling bands.
struct Range {
  double lo = 0, hi = 0;

  bool contains(double v) const { return v >= lo && v <= hi; }
  bool operator==(const Range&) const = default;
};

/// One grayscale frame with its label map. image is [H,W] with intensities in
/// [0,255]; label is [H,W] with values in {0,1,2,3}.
struct SegmentationSample {
  std::string id;
  Tensor<float> image;
  LabelMap label;
};

inline void validate_label(const LabelMap& label, const std::string& id) {
  for (std::size_t i = 0; i < label.numel(); ++i) {
    if (label[i] >= kNumClasses) {
      throw CorruptLabelError("sample '" + id + "': label value " + std::to_string(label[i]) + " at pixel " +
                              std::to_string(i) + " is outside {0,1,2,3}");
    }
  }
}

inline void validate_sample(const SegmentationSample& s) {
  if (s.image.rank() != 2 || s.label.rank() != 2) {
    throw InvalidInputError("sample '" + s.id + "': image and label must be 2-D");
  }
  if (s.image.shape() != s.label.shape()) {
    throw InvalidInputError("sample '" + s.id + "': image " + shape_string(s.image.shape()) + " and label " +
                            shape_string(s.label.shape()) + " differ in shape");
  }
  validate_label(s.label, s.id);
}

}  // namespace echoseg
