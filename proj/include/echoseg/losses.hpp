#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoseg/graph.hpp"
#include "echoseg/kernels.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

enum class LossKind { dice, cross_entropy, dice_ce_avg, dice_ce_sum };

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kDeepSupervisionWeight = 0.3;

/// Scalar loss with a per-term breakdown.
struct LossValue {
  double value = 0;
  std::map<std::string, double> terms;
};

namespace losses {

/// target is [N,H,W] with class indices; predictions are [N,C,H,W].
template <class T>
void check_target(const Tensor<T>& pred, const LabelMap& target) {
  if (pred.rank() != 4 || target.rank() != 3 || pred.dim(0) != target.dim(0) || pred.dim(2) != target.dim(1) ||
      pred.dim(3) != target.dim(2)) {
    throw InvalidShapeError("loss: prediction " + shape_string(pred.shape()) + " does not match target " +
                            shape_string(target.shape()));
  }
  const std::size_t C = pred.dim(1);
  for (std::uint8_t v : target.values()) {
    if (v >= C) {
      throw InvalidLabelError("loss: target class " + std::to_string(v) + " >= number of classes " +
                              std::to_string(C));
    }
  }
}

/// Per-class sums of p*t, p and t over batch and pixels.
struct DiceSums {
  std::vector<double> intersection, predicted, truth;
};

template <class T>
DiceSums dice_sums(const Tensor<T>& probs, const LabelMap& target) {
  check_target(probs, target);
  const std::size_t N = probs.dim(0), C = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  DiceSums s{std::vector<double>(C), std::vector<double>(C), std::vector<double>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = probs.data() + (n * C + c) * plane;
      const std::uint8_t* t = target.data() + n * plane;
      const auto cls = static_cast<std::uint8_t>(c);
      s.predicted[c] += kernels::detail::strided_sum<T>(plane, [p](std::size_t i) { return static_cast<double>(p[i]); });
      s.intersection[c] += kernels::detail::strided_sum<T>(
          plane, [p, t, cls](std::size_t i) { return t[i] == cls ? static_cast<double>(p[i]) : 0.0; });
      s.truth[c] += kernels::detail::strided_sum<T>(plane, [t, cls](std::size_t i) { return t[i] == cls ? 1.0 : 0.0; });
    }
  }
  return s;
}

/// Soft Dice per foreground class (class 0 is background and excluded).
inline std::vector<double> class_dice(const DiceSums& s, double smooth = kDiceSmooth) {
  std::vector<double> d;
  for (std::size_t c = 1; c < s.intersection.size(); ++c) {
    d.push_back((2 * s.intersection[c] + smooth) / (s.predicted[c] + s.truth[c] + smooth));
  }
  return d;
}

inline double dice_loss_from_sums(const DiceSums& s, double smooth = kDiceSmooth) {
  const auto d = class_dice(s, smooth);
  double mean = 0;
  for (double v : d) mean += v;
  return 1.0 - mean / static_cast<double>(d.size());
}

template <class T>
Tensor<T> dice_loss_grad(const Tensor<T>& probs, const LabelMap& target, const DiceSums& s, double smooth, double upstream) {
  const std::size_t N = probs.dim(0), C = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  Tensor<T> g(probs.shape());
  const double scale = -upstream / static_cast<double>(C - 1);
  for (std::size_t c = 1; c < C; ++c) {
    const double den = s.predicted[c] + s.truth[c] + smooth;
    const double num = 2 * s.intersection[c] + smooth;
    // d/dp of num/den: (2 t den - num) / den^2
    const T on = static_cast<T>(scale * (2 * den - num) / (den * den));
    const T off = static_cast<T>(scale * (-num) / (den * den));
    const auto cls = static_cast<std::uint8_t>(c);
    for (std::size_t n = 0; n < N; ++n) {
      T* out = g.data() + (n * C + c) * plane;
      const std::uint8_t* t = target.data() + n * plane;
      for (std::size_t i = 0; i < plane; ++i) out[i] = t[i] == cls ? on : off;
    }
  }
  return g;
}

/// Mean over pixels of -log softmax(logits)[target], via log-sum-exp.
template <class T>
double cross_entropy_value(const Tensor<T>& logits, const LabelMap& target) {
  check_target(logits, target);
  const std::size_t N = logits.dim(0), C = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = logits.data() + n * C * plane;
    const std::uint8_t* t = target.data() + n * plane;
    total += kernels::detail::strided_sum<T>(plane, [base, t, C, plane](std::size_t i) {
      double m = static_cast<double>(base[i]);
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(base[c * plane + i]));
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(base[c * plane + i]) - m);
      return m + std::log(s) - static_cast<double>(base[t[i] * plane + i]);
    });
  }
  return total / static_cast<double>(N * plane);
}

template <class T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, const LabelMap& target, double upstream) {
  const std::size_t N = logits.dim(0), C = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  Tensor<T> g = kernels::softmax_forward(logits);
  const T scale = static_cast<T>(upstream / static_cast<double>(N * plane));
  for (std::size_t n = 0; n < N; ++n) {
    const std::uint8_t* t = target.data() + n * plane;
    T* base = g.data() + n * C * plane;
    for (std::size_t i = 0; i < plane; ++i) base[t[i] * plane + i] -= T{1};
  }
  kernels::ArrayMap<T>(g.data(), static_cast<Eigen::Index>(g.numel())) *= scale;
  return g;
}

}  // namespace losses

// ----------------------------------------------------------- value API

template <class T>
LossValue dice_loss(const Tensor<T>& probs, const LabelMap& target, double smooth = kDiceSmooth) {
  const double v = losses::dice_loss_from_sums(losses::dice_sums(probs, target), smooth);
  return {v, {{"dice", v}}};
}

template <class T>
LossValue cross_entropy(const Tensor<T>& logits, const LabelMap& target) {
  const double v = losses::cross_entropy_value(logits, target);
  return {v, {{"ce", v}}};
}

/// Average (or, for the sum variant, total) of Dice on softmax(logits) and CE.
template <class T>
LossValue dice_ce(const Tensor<T>& logits, const LabelMap& target, bool average = true) {
  const double d = dice_loss(kernels::softmax_forward(logits), target).value;
  const double ce = cross_entropy(logits, target).value;
  return {average ? (d + ce) / 2 : d + ce, {{"dice", d}, {"ce", ce}}};
}

template <class T>
LossValue segmentation_loss(LossKind kind, const Tensor<T>& logits, const LabelMap& target) {
  switch (kind) {
    case LossKind::dice: return dice_loss(kernels::softmax_forward(logits), target);
    case LossKind::cross_entropy: return cross_entropy(logits, target);
    case LossKind::dice_ce_avg: return dice_ce(logits, target, true);
    case LossKind::dice_ce_sum: return dice_ce(logits, target, false);
  }
  return {};
}

/// L = L_final + sum_i lambda * L_aux_i.
inline LossValue deep_supervision_loss(const LossValue& final_loss, std::span<const LossValue> aux,
                                       double lambda = kDeepSupervisionWeight) {
  LossValue out{final_loss.value, {{"final", final_loss.value}}};
  for (std::size_t i = 0; i < aux.size(); ++i) {
    out.value += lambda * aux[i].value;
    out.terms["aux" + std::to_string(i)] = aux[i].value;
  }
  return out;
}

// ------------------------------------------------------ differentiable API

namespace ag {

template <class T>
Var<T> dice_loss(Var<T> probs, const LabelMap& target, double smooth = kDiceSmooth) {
  Graph<T>& g = *probs.graph;
  auto sums = std::make_shared<losses::DiceSums>(losses::dice_sums(probs.value(), target));
  const double v = losses::dice_loss_from_sums(*sums, smooth);
  return g.record(Tensor<T>({1}, static_cast<T>(v)), {probs},
                  [&g, probs, &target, sums, smooth](const Tensor<T>& dy, const Tensor<T>&) {
                    g.accumulate(probs, losses::dice_loss_grad(probs.value(), target, *sums, smooth,
                                                               static_cast<double>(dy[0])));
                  });
}

template <class T>
Var<T> cross_entropy(Var<T> logits, const LabelMap& target) {
  Graph<T>& g = *logits.graph;
  const double v = losses::cross_entropy_value(logits.value(), target);
  return g.record(Tensor<T>({1}, static_cast<T>(v)), {logits},
                  [&g, logits, &target](const Tensor<T>& dy, const Tensor<T>&) {
                    g.accumulate(logits, losses::cross_entropy_grad(logits.value(), target, static_cast<double>(dy[0])));
                  });
}

template <class T>
struct LossTerm {
  Var<T> value;
  std::map<std::string, double> terms;

  double scalar() const { return static_cast<double>(value.value()[0]); }
};

/// Base loss on one output head. `probs` may carry an already computed
/// softmax of `logits`.
template <class T>
LossTerm<T> segmentation_loss(LossKind kind, Var<T> logits, std::optional<Var<T>> probs, const LabelMap& target) {
  auto soft = [&] { return probs ? *probs : softmax(logits); };
  switch (kind) {
    case LossKind::dice: {
      Var<T> d = dice_loss(soft(), target);
      return {d, {{"dice", static_cast<double>(d.value()[0])}}};
    }
    case LossKind::cross_entropy: {
      Var<T> ce = cross_entropy(logits, target);
      return {ce, {{"ce", static_cast<double>(ce.value()[0])}}};
    }
    case LossKind::dice_ce_avg:
    case LossKind::dice_ce_sum: {
      Var<T> d = dice_loss(soft(), target);
      Var<T> ce = cross_entropy(logits, target);
      const double w = kind == LossKind::dice_ce_avg ? 0.5 : 1.0;
      const std::array<Var<T>, 2> parts{d, ce};
      const std::array<double, 2> coeffs{w, w};
      return {linear_combination<T>(parts, coeffs),
              {{"dice", static_cast<double>(d.value()[0])}, {"ce", static_cast<double>(ce.value()[0])}}};
    }
  }
  throw InvalidConfigError("unknown loss kind");
}

template <class T>
LossTerm<T> deep_supervision_loss(const LossTerm<T>& final_loss, std::span<const LossTerm<T>> aux,
                                  double lambda = kDeepSupervisionWeight) {
  if (aux.empty()) return {final_loss.value, {{"final", final_loss.scalar()}}};
  std::vector<Var<T>> parts{final_loss.value};
  std::vector<double> coeffs{1.0};
  LossTerm<T> out{final_loss.value, {{"final", final_loss.scalar()}}};
  for (std::size_t i = 0; i < aux.size(); ++i) {
    parts.push_back(aux[i].value);
    coeffs.push_back(lambda);
    out.terms["aux" + std::to_string(i)] = aux[i].scalar();
  }
  out.value = linear_combination<T>(parts, coeffs);
  return out;
}

}  // namespace ag
}  // namespace echoseg
