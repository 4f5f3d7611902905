#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "echoseg/error.hpp"
#include "echoseg/postprocess.hpp"
#include "echoseg/sample.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

namespace detail {
inline void require_same_2d(const LabelMap& a, const LabelMap& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw InvalidShapeError(std::string(what) + ": label maps " + shape_string(a.shape()) + " and " +
                            shape_string(b.shape()) + " must be 2-D and equal in shape");
  }
}
}  // namespace detail

/// 2|P∩G| / (|P|+|G|) for one class; 1 when both are empty.
inline double dice_score(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  if (pred.shape() != gt.shape()) {
    throw InvalidShapeError("dice_score: shapes " + shape_string(pred.shape()) + " and " + shape_string(gt.shape()) +
                            " differ");
  }
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool a = pred[i] == cls, b = gt[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Foreground pixels with at least one 8-neighbour that is background or
/// outside the image.
inline Mask boundary(const Mask& m) {
  const std::size_t H = m.dim(0), W = m.dim(1);
  Mask out(m.shape());
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!m[y * W + x]) continue;
      bool edge = y == 0 || x == 0 || y + 1 == H || x + 1 == W;
      for (int dy = -1; dy <= 1 && !edge; ++dy) {
        for (int dx = -1; dx <= 1 && !edge; ++dx) {
          edge = !m[(y + dy) * W + (x + dx)];
        }
      }
      out[y * W + x] = edge;
    }
  }
  return out;
}

namespace detail {

/// Exact 1-D squared distance transform of a sampled function (lower
/// envelope of parabolas). f uses +inf for "no site".
inline void edt_1d(const double* f, std::size_t n, std::size_t stride, double* d, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q * stride] < inf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    for (std::size_t q = 0; q < n; ++q) d[q * stride] = inf;
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == inf) continue;
    const auto qd = static_cast<double>(q);
    double s = 0;
    // z[0] is -inf, so k never drops below zero.
    while (true) {
      const auto vk = static_cast<double>(v[k]);
      s = ((fq + qd * qd) - (f[v[k] * stride] + vk * vk)) / (2 * qd - 2 * vk);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q * stride] = diff * diff + f[v[k] * stride];
  }
}

}  // namespace detail

/// Squared Euclidean distance from every pixel to the nearest nonzero pixel
/// of `sites` (+inf when there is none). Exact for integer coordinates.
inline std::vector<double> squared_distance_transform(const Mask& sites) {
  const std::size_t H = sites.dim(0), W = sites.dim(1);
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(H * W), tmp(H * W);
  for (std::size_t i = 0; i < H * W; ++i) f[i] = sites[i] ? 0.0 : inf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < W; ++x) detail::edt_1d(f.data() + x, H, W, tmp.data() + x, v, z);
  for (std::size_t y = 0; y < H; ++y) detail::edt_1d(tmp.data() + y * W, W, 1, f.data() + y * W, v, z);
  return f;
}

/// Symmetric Hausdorff distance in pixels between the boundaries of one
/// class in two label maps. 0 when both are empty, nullopt (undefined) when
/// exactly one is empty.
inline std::optional<double> hausdorff(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  detail::require_same_2d(pred, gt, "hausdorff");
  const Mask bp = boundary(class_mask(pred, cls)), bg = boundary(class_mask(gt, cls));
  const bool ep = std::ranges::none_of(bp.values(), [](auto v) { return v != 0; });
  const bool eg = std::ranges::none_of(bg.values(), [](auto v) { return v != 0; });
  if (ep && eg) return 0.0;
  if (ep != eg) return std::nullopt;
  const std::vector<double> dp = squared_distance_transform(bp), dg = squared_distance_transform(bg);
  double worst = 0;
  for (std::size_t i = 0; i < bp.numel(); ++i) {
    if (bp[i]) worst = std::max(worst, dg[i]);
    if (bg[i]) worst = std::max(worst, dp[i]);
  }
  return std::sqrt(worst);
}

/// Which plausibility rules a label map breaks.
struct OutlierReasons {
  std::array<bool, kNumClasses> empty{}, fragmented{};
  bool hole = false;

  bool any() const {
    return hole || std::ranges::any_of(empty, [](bool b) { return b; }) ||
           std::ranges::any_of(fragmented, [](bool b) { return b; });
  }
};

/// A frame is an anatomical outlier when a foreground class is missing, is
/// split into several 4-connected pieces, or when some background region is
/// enclosed by foreground (an 8-connected background component that does not
/// reach the image border).
inline OutlierReasons outlier_reasons(const LabelMap& label) {
  if (label.rank() != 2) throw InvalidShapeError("anatomical_outlier expects a 2-D label map");
  validate_label(label, "prediction");
  OutlierReasons r;
  for (std::uint8_t cls = 1; cls < kNumClasses; ++cls) {
    const LabeledComponents c = class_components(label, cls);
    r.empty[cls] = c.count() == 0;
    r.fragmented[cls] = c.count() >= 2;
  }
  const LabeledComponents bg = class_components(label, 0, Connectivity::eight);
  std::vector<bool> touches(bg.count() + 1, false);
  const std::size_t H = label.dim(0), W = label.dim(1);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (y == 0 || x == 0 || y + 1 == H || x + 1 == W) touches[bg.ids[y * W + x]] = true;
    }
  }
  for (std::size_t id = 1; id <= bg.count(); ++id) r.hole = r.hole || !touches[id];
  return r;
}

inline bool anatomical_outlier(const LabelMap& label) { return outlier_reasons(label).any(); }

// ------------------------------------------------------------- reports

inline constexpr std::size_t kForegroundClasses = kNumClasses - 1;

struct SampleMetrics {
  std::string id;
  std::array<double, kForegroundClasses> dice{};
  std::array<std::optional<double>, kForegroundClasses> hausdorff{};
  bool outlier = false;

  /// Mean over classes; for Hausdorff only defined values count.
  double mean_dice() const { return (dice[0] + dice[1] + dice[2]) / 3; }
  std::optional<double> mean_hausdorff() const {
    double s = 0;
    int n = 0;
    for (const auto& h : hausdorff) {
      if (h) {
        s += *h;
        ++n;
      }
    }
    return n ? std::optional<double>(s / n) : std::nullopt;
  }

  bool operator==(const SampleMetrics&) const = default;
};

inline SampleMetrics evaluate_frame(const std::string& id, const LabelMap& pred, const LabelMap& gt) {
  detail::require_same_2d(pred, gt, "evaluate");
  SampleMetrics m{id, {}, {}, anatomical_outlier(pred)};
  for (std::uint8_t c = 1; c < kNumClasses; ++c) {
    m.dice[c - 1] = dice_score(pred, gt, c);
    m.hausdorff[c - 1] = hausdorff(pred, gt, c);
  }
  return m;
}

struct MetricsSummary {
  std::array<double, kForegroundClasses> mean_dice{};
  std::array<double, kForegroundClasses> mean_hausdorff{};  // over defined values; NaN if none
  std::array<std::size_t, kForegroundClasses> undefined_hausdorff{};
  std::size_t outliers = 0;
  std::size_t samples = 0;
};

struct MetricsReport {
  std::vector<SampleMetrics> records;
  bool postprocessed = false;

  MetricsSummary summary() const {
    MetricsSummary s;
    s.samples = records.size();
    std::array<std::size_t, kForegroundClasses> defined{};
    std::array<double, kForegroundClasses> hsum{};
    for (const auto& r : records) {
      for (std::size_t c = 0; c < kForegroundClasses; ++c) {
        s.mean_dice[c] += r.dice[c];
        if (r.hausdorff[c]) {
          hsum[c] += *r.hausdorff[c];
          ++defined[c];
        } else {
          ++s.undefined_hausdorff[c];
        }
      }
      s.outliers += r.outlier;
    }
    for (std::size_t c = 0; c < kForegroundClasses; ++c) {
      s.mean_dice[c] = records.empty() ? std::nan("") : s.mean_dice[c] / static_cast<double>(records.size());
      s.mean_hausdorff[c] = defined[c] ? hsum[c] / static_cast<double>(defined[c]) : std::nan("");
    }
    return s;
  }
};

namespace detail {

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& s, const std::string& where) {
  if (s == "nan") return std::nan("");
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw CorruptFileError(where + ": bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline constexpr const char* kReportHeader = "# echoseg-metrics 1";

/// Line-oriented report:
///   # echoseg-metrics 1
///   postprocess <0|1>
///   record <id> <dice LV> <dice MYO> <dice LA> <hd LV> <hd MYO> <hd LA> <outlier 0|1>
///   ...
///   summary dice <3 values> hausdorff <3 values> undefined <3 counts> outliers <n> samples <n>
/// Undefined Hausdorff values are written as "undef". The summary line is
/// informational; readers recompute it from the records.
inline std::string format_report(const MetricsReport& report) {
  std::ostringstream os;
  os << kReportHeader << "\n";
  os << "postprocess " << (report.postprocessed ? 1 : 0) << "\n";
  for (const auto& r : report.records) {
    if (r.id.empty() || r.id.find_first_of(" \t\r\n") != std::string::npos) {
      throw InvalidInputError("report: sample id '" + r.id + "' must be nonempty without whitespace");
    }
    os << "record " << r.id;
    for (double d : r.dice) os << ' ' << detail::format_double(d);
    for (const auto& h : r.hausdorff) os << ' ' << (h ? detail::format_double(*h) : "undef");
    os << ' ' << (r.outlier ? 1 : 0) << "\n";
  }
  const MetricsSummary s = report.summary();
  os << "summary dice";
  for (double d : s.mean_dice) os << ' ' << detail::format_double(d);
  os << " hausdorff";
  for (double h : s.mean_hausdorff) os << ' ' << detail::format_double(h);
  os << " undefined";
  for (std::size_t u : s.undefined_hausdorff) os << ' ' << u;
  os << " outliers " << s.outliers << " samples " << s.samples << "\n";
  return os.str();
}

inline MetricsReport parse_report(const std::string& text, const std::string& source = "report") {
  std::istringstream is(text);
  std::string line;
  MetricsReport report;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    if (!header) {
      if (line != kReportHeader) throw CorruptFileError(where + ": missing report header");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind.empty() || kind == "summary") continue;
    if (kind == "postprocess") {
      int v = 0;
      if (!(ls >> v)) throw CorruptFileError(where + ": bad postprocess line");
      report.postprocessed = v != 0;
      continue;
    }
    if (kind != "record") throw CorruptFileError(where + ": unknown line kind '" + kind + "'");
    SampleMetrics m;
    std::string tok;
    if (!(ls >> m.id)) throw CorruptFileError(where + ": record without id");
    for (auto& d : m.dice) {
      if (!(ls >> tok)) throw CorruptFileError(where + ": truncated record");
      d = detail::parse_double(tok, where);
    }
    for (auto& h : m.hausdorff) {
      if (!(ls >> tok)) throw CorruptFileError(where + ": truncated record");
      if (tok != "undef") h = detail::parse_double(tok, where);
    }
    int outlier = 0;
    if (!(ls >> outlier) || (outlier != 0 && outlier != 1)) throw CorruptFileError(where + ": bad outlier flag");
    m.outlier = outlier == 1;
    if (ls >> tok) throw CorruptFileError(where + ": trailing fields");
    report.records.push_back(std::move(m));
  }
  if (!header) throw CorruptFileError(source + ": empty report");
  return report;
}

inline void write_report(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError("cannot write report '" + path + "'");
  out << format_report(report);
  if (!out) throw CorruptFileError("failed writing report '" + path + "'");
}

inline MetricsReport read_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open report '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_report(ss.str(), path);
}

}  // namespace echoseg
