#pragma once

// Reverse-mode differentiation over a recorded tape. A Graph records every
// operator applied during a forward pass; backward() replays the tape in
// reverse and deposits gradients into the Parameter objects it touched.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "echoseg/kernels.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

/// A trainable tensor and its gradient accumulator.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T{}); }
};

template <class T>
class Graph;

/// Handle to a value recorded on a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Graph {
 public:
  /// Receives d(loss)/d(output) and the output value itself.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, const Tensor<T>& out)>;

  /// With record=false no backward closures are kept (inference).
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Constant input that owns its value.
  Var<T> constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Constant input referencing caller-owned storage.
  Var<T> input(const Tensor<T>& value) {
    Node n;
    n.ref = &value;
    return push(std::move(n));
  }

  /// Leaf whose gradient accumulates into p.grad.
  Var<T> parameter(Parameter<T>& p) {
    Node n;
    n.ref = &p.value;
    n.sink = &p.grad;
    n.requires_grad = record_;
    return push(std::move(n));
  }

  /// Records the output of an operator. `backward` receives d(loss)/d(output)
  /// and must call accumulate() for each input needing a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (const Var<T>& in : inputs) {
      check_owner(in);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    n.requires_grad = n.requires_grad && record_;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    if (n.released) throw MissingGraphError("value of node " + std::to_string(v.id) + " was released by backward()");
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    Tensor<T>& dst = n.sink ? *n.sink : n.grad;
    if (dst.empty()) {
      dst = g;
      return;
    }
    if (dst.shape() != g.shape()) {
      throw InvalidShapeError("gradient shape " + shape_string(g.shape()) + " does not match " +
                              shape_string(dst.shape()));
    }
    kernels::ArrayMap<T>(dst.data(), static_cast<Eigen::Index>(dst.numel())) +=
        kernels::ConstArrayMap<T>(g.data(), static_cast<Eigen::Index>(g.numel()));
  }

  void accumulate(Var<T> v, Tensor<T>&& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.sink && n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    accumulate(v, static_cast<const Tensor<T>&>(g));
  }

  /// Back-propagates from a scalar. Intermediate values (all but the loss)
  /// are released as the sweep passes them, so a graph is differentiated once.
  void backward(Var<T> loss, T seed = T{1}) {
    if (nodes_.empty() || loss.graph != this || loss.id >= nodes_.size() || consumed_) {
      throw MissingGraphError("backward() called without a recorded forward pass");
    }
    if (!record_) throw MissingGraphError("backward() on a graph recorded without gradients");
    if (value(loss).numel() != 1) throw InvalidShapeError("backward() expects a scalar loss");
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    accumulate(loss, Tensor<T>({1}, seed));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) {
        n.backward(n.grad, n.ref ? *n.ref : n.value);
      }
      n.backward = nullptr;
      n.grad = Tensor<T>();
      if (!n.ref && i != loss.id) {
        n.value = Tensor<T>();
        n.released = true;
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    Tensor<T>* sink = nullptr;
    bool requires_grad = false;
    bool released = false;
    BackwardFn backward;
  };

  Var<T> push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw MissingGraphError("variable does not belong to this graph");
  }

  bool record_;
  bool consumed_ = false;
  std::deque<Node> nodes_;  // deque keeps value references stable while recording
};

// Differentiable operators. Each wraps the matching pure kernel.
namespace ag {

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t stride, std::size_t pad) {
  Graph<T>& g = *x.graph;
  static const Tensor<T> no_bias;
  Tensor<T> y = kernels::conv2d_forward(x.value(), w.value(), b ? b->value() : no_bias, stride, pad);
  const Var<T> bias = b.value_or(w);
  const bool has_bias = b.has_value();
  return g.record(std::move(y), {x, w, bias}, [&g, x, w, bias, has_bias, stride, pad](const Tensor<T>& dy, const Tensor<T>&) {
    auto grads = kernels::conv2d_backward(x.value(), w.value(), dy, stride, pad, g.requires_grad(x), has_bias);
    if (!grads.input.empty()) g.accumulate(x, std::move(grads.input));
    g.accumulate(w, std::move(grads.weight));
    if (has_bias) g.accumulate(bias, std::move(grads.bias));
  });
}

template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t stride) {
  Graph<T>& g = *x.graph;
  static const Tensor<T> no_bias;
  Tensor<T> y = kernels::conv_transpose2d_forward(x.value(), w.value(), b ? b->value() : no_bias, stride);
  const Var<T> bias = b.value_or(w);
  const bool has_bias = b.has_value();
  return g.record(std::move(y), {x, w, bias}, [&g, x, w, bias, has_bias, stride](const Tensor<T>& dy, const Tensor<T>&) {
    auto grads = kernels::conv_transpose2d_backward(x.value(), w.value(), dy, stride, g.requires_grad(x), has_bias);
    if (!grads.input.empty()) g.accumulate(x, std::move(grads.input));
    g.accumulate(w, std::move(grads.weight));
    if (has_bias) g.accumulate(bias, std::move(grads.bias));
  });
}

template <class T>
Var<T> maxpool2d(Var<T> x) {
  Graph<T>& g = *x.graph;
  auto r = kernels::maxpool2d_forward(x.value());
  auto argmax = std::make_shared<std::vector<std::uint8_t>>(std::move(r.argmax));
  return g.record(std::move(r.output), {x}, [&g, x, argmax](const Tensor<T>& dy, const Tensor<T>&) {
    g.accumulate(x, kernels::maxpool2d_backward(x.value().shape(), *argmax, dy));
  });
}

template <class T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor) {
  Graph<T>& g = *x.graph;
  return g.record(kernels::upsample_nearest_forward(x.value(), factor), {x}, [&g, x, factor](const Tensor<T>& dy, const Tensor<T>&) {
    g.accumulate(x, kernels::upsample_nearest_backward(dy, factor));
  });
}

template <class T>
Var<T> normalize(Var<T> x, kernels::NormKind kind, Var<T> gamma, Var<T> beta, kernels::RunningStats<T>* running,
                 bool train, double eps = kernels::kNormEps) {
  Graph<T>& g = *x.graph;
  auto r = kernels::normalize_forward(x.value(), kind, gamma.value(), beta.value(), eps, running, train);
  auto cache = std::make_shared<kernels::NormCache>(std::move(r.cache));
  return g.record(std::move(r.output), {x, gamma, beta}, [&g, x, gamma, beta, kind, cache](const Tensor<T>& dy, const Tensor<T>&) {
    auto grads = kernels::normalize_backward(x.value(), kind, gamma.value(), *cache, dy);
    g.accumulate(x, std::move(grads.input));
    g.accumulate(gamma, std::move(grads.gamma));
    g.accumulate(beta, std::move(grads.beta));
  });
}

template <class T>
Var<T> activation(Var<T> x, kernels::ActivationKind kind) {
  Graph<T>& g = *x.graph;
  return g.record(kernels::activation_forward(kind, x.value()), {x}, [&g, x, kind](const Tensor<T>& dy, const Tensor<T>&) {
    g.accumulate(x, kernels::activation_backward(kind, x.value(), dy));
  });
}

template <class T>
Var<T> softmax(Var<T> x) {
  Graph<T>& g = *x.graph;
  return g.record(kernels::softmax_forward(x.value()), {x}, [&g, x](const Tensor<T>& dy, const Tensor<T>& y) {
    g.accumulate(x, kernels::softmax_backward(y, dy));
  });
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  return g.record(kernels::concat_channels(a.value(), b.value()), {a, b}, [&g, a, b](const Tensor<T>& dy, const Tensor<T>&) {
    const std::size_t N = dy.dim(0), plane = dy.dim(2) * dy.dim(3);
    const std::size_t ca = a.shape()[1], cb = b.shape()[1];
    Tensor<T> da(a.shape()), db(b.shape());
    for (std::size_t n = 0; n < N; ++n) {
      const T* src = dy.data() + n * (ca + cb) * plane;
      std::copy_n(src, ca * plane, da.data() + n * ca * plane);
      std::copy_n(src + ca * plane, cb * plane, db.data() + n * cb * plane);
    }
    g.accumulate(a, std::move(da));
    g.accumulate(b, std::move(db));
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  if (a.shape() != b.shape()) {
    throw InvalidShapeError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
  Tensor<T> y = a.value();
  kernels::ArrayMap<T>(y.data(), static_cast<Eigen::Index>(y.numel())) +=
      kernels::ConstArrayMap<T>(b.value().data(), static_cast<Eigen::Index>(y.numel()));
  return g.record(std::move(y), {a, b}, [&g, a, b](const Tensor<T>& dy, const Tensor<T>&) {
    g.accumulate(a, dy);
    g.accumulate(b, dy);
  });
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& v = x.value();
  const double s = kernels::detail::strided_sum<T>(v.numel(), [&v](std::size_t i) { return static_cast<double>(v[i]); });
  return g.record(Tensor<T>({1}, static_cast<T>(s)), {x}, [&g, x](const Tensor<T>& dy, const Tensor<T>&) {
    g.accumulate(x, Tensor<T>(x.shape(), dy[0]));
  });
}

/// Elementwise product with a constant tensor of the same shape.
template <class T>
Var<T> mul_constant(Var<T> x, const Tensor<T>& c) {
  Graph<T>& g = *x.graph;
  if (x.shape() != c.shape()) throw InvalidShapeError("mul_constant: shape mismatch");
  Tensor<T> y(x.shape());
  const auto n = static_cast<Eigen::Index>(y.numel());
  kernels::ArrayMap<T>(y.data(), n) =
      kernels::ConstArrayMap<T>(x.value().data(), n) * kernels::ConstArrayMap<T>(c.data(), n);
  return g.record(std::move(y), {x}, [&g, x, c](const Tensor<T>& dy, const Tensor<T>&) {
    Tensor<T> dx(dy.shape());
    const auto m = static_cast<Eigen::Index>(dx.numel());
    kernels::ArrayMap<T>(dx.data(), m) =
        kernels::ConstArrayMap<T>(dy.data(), m) * kernels::ConstArrayMap<T>(c.data(), m);
    g.accumulate(x, std::move(dx));
  });
}

/// sum_i coeffs[i] * terms[i] over scalar terms.
template <class T>
Var<T> linear_combination(std::span<const Var<T>> terms, std::span<const double> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) {
    throw InvalidShapeError("linear_combination needs one coefficient per term");
  }
  Graph<T>& g = *terms[0].graph;
  double total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().numel() != 1) throw InvalidShapeError("linear_combination expects scalar terms");
    total += coeffs[i] * static_cast<double>(terms[i].value()[0]);
  }
  std::vector<Var<T>> ts(terms.begin(), terms.end());
  std::vector<double> cs(coeffs.begin(), coeffs.end());
  return g.record(Tensor<T>({1}, static_cast<T>(total)), std::span<const Var<T>>(ts),
                  [&g, ts, cs](const Tensor<T>& dy, const Tensor<T>&) {
                    for (std::size_t i = 0; i < ts.size(); ++i) {
                      g.accumulate(ts[i], Tensor<T>({1}, static_cast<T>(cs[i] * static_cast<double>(dy[0]))));
                    }
                  });
}

}  // namespace ag
}  // namespace echoseg
