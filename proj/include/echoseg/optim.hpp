#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "echoseg/error.hpp"
#include "echoseg/graph.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept per parameter in the order
/// the parameters were passed to the first step.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : opt_(options) {}

  std::size_t steps() const noexcept { return t_; }

  void step(std::deque<Parameter<T>>& params, double lr) {
    for (const auto& p : params) {
      if (!p.grad.all_finite()) throw NonFiniteError("non-finite gradient in parameter '" + p.name + "'");
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw InvalidConfigError("Adam: parameter set changed between steps");
    ++t_;
    const double c1 = 1 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<T>& p = params[i];
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::size_t j = 0; j < m.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        m[j] = opt_.beta1 * m[j] + (1 - opt_.beta1) * g;
        v[j] = opt_.beta2 * v[j] + (1 - opt_.beta2) * g * g;
        const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt_.eps);
        p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - update);
      }
    }
  }

  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  AdamOptions opt_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct PlateauOptions {
  double factor = 0.5;
  std::size_t patience = 10;
  double min_lr = 1e-6;
  double threshold = 1e-4;  // relative improvement required

  bool operator==(const PlateauOptions&) const = default;
};

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve on the best loss by the relative threshold.
class ReduceOnPlateau {
 public:
  ReduceOnPlateau(double lr, PlateauOptions options = {}) : lr_(lr), opt_(options) {
    if (!(opt_.factor > 0 && opt_.factor < 1)) throw InvalidConfigError("plateau factor must lie in (0,1)");
    if (opt_.patience == 0) throw InvalidConfigError("plateau patience must be >= 1");
  }

  double lr() const noexcept { return lr_; }

  double step(double loss) {
    if (loss < best_ * (1 - opt_.threshold)) {
      best_ = loss;
      bad_ = 0;
    } else if (++bad_ >= opt_.patience) {
      lr_ = std::max(opt_.min_lr, lr_ * opt_.factor);
      bad_ = 0;
    }
    return lr_;
  }

 private:
  double lr_;
  PlateauOptions opt_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

}  // namespace echoseg
