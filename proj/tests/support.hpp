#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "echoseg/graph.hpp"
#include "echoseg/postprocess.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg::testing {

using Tensord = Tensor<double>;

inline Tensord random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensord t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Values bounded away from zero by `margin`, for kinked functions.
inline Tensord away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 0.05) {
  Tensord t = random_tensor(std::move(shape), rng);
  for (auto& v : t.values()) v = v < 0 ? v - margin : v + margin;
  return t;
}

inline LabelMap random_labels(Shape shape, std::mt19937_64& rng, int classes = 4) {
  LabelMap l(std::move(shape));
  std::uniform_int_distribution<int> u(0, classes - 1);
  for (auto& v : l.values()) v = static_cast<std::uint8_t>(u(rng));
  return l;
}

struct GradcheckResult {
  double max_rel_error = 0;
  std::string worst;  // "input i, element j"
};

/// Builds a scalar from the inputs (one Var per input, in order).
using ScalarFn = std::function<Var<double>(Graph<double>&, std::vector<Var<double>>&)>;

/// Compares backward() against central differences for every element of
/// every input. Relative error uses max(|analytic|, |numeric|, 1) as scale.
inline GradcheckResult gradcheck(const ScalarFn& f, std::vector<Tensord> inputs, double eps = 1e-6) {
  std::vector<Parameter<double>> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("in" + std::to_string(i), inputs[i]);

  auto evaluate = [&](bool with_grad) {
    Graph<double> g(with_grad);
    std::vector<Var<double>> vars;
    for (auto& p : params) vars.push_back(g.parameter(p));
    Var<double> out = f(g, vars);
    const double v = out.value()[0];
    if (with_grad) g.backward(out);
    return v;
  };

  for (auto& p : params) p.zero_grad();
  evaluate(true);
  std::vector<Tensord> analytic;
  for (auto& p : params) analytic.push_back(p.grad);

  GradcheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].value.numel(); ++j) {
      const double saved = params[i].value[j];
      params[i].value[j] = saved + eps;
      const double up = evaluate(false);
      params[i].value[j] = saved - eps;
      const double down = evaluate(false);
      params[i].value[j] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = "input " + std::to_string(i) + ", element " + std::to_string(j) + ": analytic " +
                  std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights, so
/// every output element carries a distinct gradient.
inline Var<double> weighted_sum(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensord w = random_tensor(y.shape(), rng);
  return ag::sum(ag::mul_constant(y, w));
}

/// Flood-fill reference for largest-component filtering: BFS per class in
/// raster order, 4-connectivity, first component wins ties.
inline LabelMap keep_largest_reference(const LabelMap& label) {
  const std::size_t H = label.dim(0), W = label.dim(1);
  LabelMap out = label;
  for (std::uint8_t cls = 1; cls < 4; ++cls) {
    std::vector<int> comp(H * W, -1);
    std::vector<std::size_t> sizes;
    for (std::size_t start = 0; start < H * W; ++start) {
      if (label[start] != cls || comp[start] >= 0) continue;
      const int id = static_cast<int>(sizes.size());
      std::vector<std::size_t> stack{start};
      comp[start] = id;
      std::size_t size = 0;
      while (!stack.empty()) {
        const std::size_t p = stack.back();
        stack.pop_back();
        ++size;
        const std::size_t y = p / W, x = p % W;
        const std::size_t nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& n : nb) {
          if (n[0] >= H || n[1] >= W) continue;  // wraps around for -1
          const std::size_t q = n[0] * W + n[1];
          if (label[q] == cls && comp[q] < 0) {
            comp[q] = id;
            stack.push_back(q);
          }
        }
      }
      sizes.push_back(size);
    }
    if (sizes.size() <= 1) continue;
    int best = 0;
    for (std::size_t k = 1; k < sizes.size(); ++k) {
      if (sizes[k] > sizes[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
    }
    for (std::size_t i = 0; i < H * W; ++i) {
      if (comp[i] >= 0 && comp[i] != best) out[i] = 0;
    }
  }
  return out;
}

/// Brute-force Dice for one class.
inline double dice_reference(const LabelMap& p, const LabelMap& g, std::uint8_t cls) {
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    inter += p[i] == cls && g[i] == cls;
    sp += p[i] == cls;
    sg += g[i] == cls;
  }
  if (sp + sg == 0) return 1.0;
  return 2 * inter / (sp + sg);
}

/// Brute-force symmetric Hausdorff between class boundaries. Boundary pixels
/// are class pixels with an 8-neighbour outside the class or the image.
inline std::optional<double> hausdorff_reference(const LabelMap& p, const LabelMap& g, std::uint8_t cls) {
  const std::size_t H = p.dim(0), W = p.dim(1);
  auto edge = [&](const LabelMap& m) {
    std::vector<std::pair<long, long>> pts;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        if (m[y * W + x] != cls) continue;
        bool border = false;
        for (long dy = -1; dy <= 1 && !border; ++dy) {
          for (long dx = -1; dx <= 1 && !border; ++dx) {
            const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<long>(H) || nx >= static_cast<long>(W) ||
                m[static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx)] != cls) {
              border = true;
            }
          }
        }
        if (border) pts.emplace_back(static_cast<long>(y), static_cast<long>(x));
      }
    }
    return pts;
  };
  const auto a = edge(p), b = edge(g);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::nullopt;
  auto directed = [](const auto& from, const auto& to) {
    long worst = 0;
    for (const auto& [y, x] : from) {
      long best = std::numeric_limits<long>::max();
      for (const auto& [v, u] : to) best = std::min(best, (y - v) * (y - v) + (x - u) * (x - u));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(static_cast<double>(std::max(directed(a, b), directed(b, a))));
}

}  // namespace echoseg::testing
