#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "echoseg/graph.hpp"
#include "echoseg/kernels.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg {

using Activation = kernels::ActivationKind;
enum class Downsampling { maxpool, strided_conv };
enum class Upsampling { nearest, transposed_conv };
enum class Normalization { none, batch, instance };
enum class Mode { train, eval };

/// Architecture of one member of the U-Net family.
struct ModelConfig {
  /// Channels per resolution level, shallowest first; the last entry is the
  /// bottleneck. Decoder level l reuses encoder_channels[l], except level 0
  /// which uses final_channels.
  std::vector<std::size_t> encoder_channels;
  std::size_t final_channels = 16;
  std::size_t input_size = 256;
  std::size_t min_resolution = 8;
  Downsampling downsampling = Downsampling::maxpool;
  Upsampling upsampling = Upsampling::nearest;
  Normalization normalization = Normalization::none;
  Activation activation = Activation::relu;
  bool deep_supervision = false;
  bool residual = false;
  std::size_t num_classes = 4;
  std::size_t in_channels = 1;

  std::size_t levels() const { return encoder_channels.size(); }

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (encoder_channels.empty()) throw InvalidConfigError("model: channel schedule must be nonempty");
    if (std::ranges::any_of(encoder_channels, [](std::size_t c) { return c == 0; }) || final_channels == 0) {
      throw InvalidConfigError("model: channel counts must be positive");
    }
    if (num_classes < 2) throw InvalidConfigError("model: num_classes must be >= 2");
    if (in_channels == 0) throw InvalidConfigError("model: in_channels must be positive");
    if (min_resolution == 0 || input_size % min_resolution != 0 ||
        !std::has_single_bit(input_size / min_resolution)) {
      throw InvalidConfigError("model: input resolution " + std::to_string(input_size) +
                               " is not divisible down to min-resolution " + std::to_string(min_resolution) +
                               " by a power of two");
    }
    const std::size_t stages = static_cast<std::size_t>(std::countr_zero(input_size / min_resolution)) + 1;
    if (stages != levels()) {
      throw InvalidConfigError("model: " + std::to_string(input_size) + " -> " + std::to_string(min_resolution) +
                               " needs " + std::to_string(stages) + " channel entries, got " +
                               std::to_string(levels()));
    }
  }

  /// Table-style notation "first ↓ deepest ↑ final".
  std::string channel_notation() const {
    return std::to_string(encoder_channels.front()) + " ↓ " + std::to_string(encoder_channels.back()) + " ↑ " +
           std::to_string(final_channels);
  }
};

inline std::string_view to_string(Downsampling d) { return d == Downsampling::maxpool ? "maxpool" : "strided-conv"; }
inline std::string_view to_string(Upsampling u) { return u == Upsampling::nearest ? "nearest" : "transposed-conv"; }
inline std::string_view to_string(Normalization n) {
  switch (n) {
    case Normalization::none: return "none";
    case Normalization::batch: return "batch";
    case Normalization::instance: return "instance";
  }
  return "?";
}
inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky-relu";
    case Activation::mish: return "mish";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

namespace presets {

/// U-Net 1: 32 ↓ 128 ↑ 16, 8x8 bottleneck, no normalization, ReLU.
inline ModelConfig unet1() {
  ModelConfig c;
  c.encoder_channels = {32, 32, 64, 128, 128, 128};
  c.final_channels = 16;
  c.min_resolution = 8;
  return c;
}

/// U-Net 0: 16 ↓ 64 ↑ 16, 64x64 bottleneck.
inline ModelConfig unet0() {
  ModelConfig c;
  c.encoder_channels = {16, 32, 64};
  c.final_channels = 16;
  c.min_resolution = 64;
  return c;
}

/// U-Net 2: 64 ↓ 512 ↑ 32, 8x8 bottleneck.
inline ModelConfig unet2() {
  ModelConfig c;
  c.encoder_channels = {64, 128, 128, 256, 256, 512};
  c.final_channels = 32;
  c.min_resolution = 8;
  return c;
}

/// U-Net 3: 64 ↓ 1024 ↑ 64, 16x16 bottleneck.
inline ModelConfig unet3() {
  ModelConfig c;
  c.encoder_channels = {64, 128, 256, 512, 1024};
  c.final_channels = 64;
  c.min_resolution = 16;
  return c;
}

/// nnU-Net-like reference: 32 ↓ 512 ↑ 32, 4x4 bottleneck, strided-conv
/// down, transposed-conv up, instance norm, leaky ReLU.
inline ModelConfig nnunet_like() {
  ModelConfig c;
  c.encoder_channels = {32, 64, 128, 256, 512, 512, 512};
  c.final_channels = 32;
  c.min_resolution = 4;
  c.downsampling = Downsampling::strided_conv;
  c.upsampling = Upsampling::transposed_conv;
  c.normalization = Normalization::instance;
  c.activation = Activation::leaky_relu;
  return c;
}

/// The final lightweight model: U-Net 1 + batch norm + Mish + deep supervision.
inline ModelConfig final_lw() {
  ModelConfig c = unet1();
  c.normalization = Normalization::batch;
  c.activation = Activation::mish;
  c.deep_supervision = true;
  return c;
}

}  // namespace presets

/// Output of one forward pass. Aux maps run deepest first.
template <class T>
struct ModelOutput {
  Var<T> logits;
  std::vector<Var<T>> aux_logits;  // upsampled to input resolution, pre-softmax
  std::vector<Var<T>> aux_probs;   // softmax of aux_logits
};

/// Per-pixel argmax over channels; ties go to the lowest class index.
template <class T>
LabelMap argmax_channels(const Tensor<T>& scores) {
  const std::size_t N = scores.dim(0), C = scores.dim(1), H = scores.dim(2), W = scores.dim(3);
  const std::size_t plane = H * W;
  LabelMap out({N, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = scores.data() + n * C * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (base[c * plane + i] > base[best * plane + i]) best = c;
      }
      out[n * plane + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

namespace detail {
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}
}  // namespace detail

template <class T>
class BasicUNet {
 public:
  using Scalar = T;

  /// Builds and initializes the network. Each tensor draws from its own
  /// stream keyed by (seed, name), so configs that share layer names share
  /// their initial weights.
  BasicUNet(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    build();
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }

  std::deque<Parameter<T>>& parameters() noexcept { return params_; }
  const std::deque<Parameter<T>>& parameters() const noexcept { return params_; }

  /// Trainable element count.
  std::size_t count_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// batch: [N, in_channels, S, S] with S = config().input_size.
  ModelOutput<T> forward(Graph<T>& g, const Tensor<T>& batch, Mode mode) {
    const ModelConfig& c = config_;
    if (batch.rank() != 4 || batch.dim(1) != c.in_channels || batch.dim(2) != c.input_size ||
        batch.dim(3) != c.input_size) {
      throw InvalidShapeError("model expects input [N," + std::to_string(c.in_channels) + "," +
                              std::to_string(c.input_size) + "," + std::to_string(c.input_size) + "], got " +
                              shape_string(batch.shape()));
    }
    const bool train = mode == Mode::train;
    Var<T> x = g.input(batch);
    std::vector<Var<T>> skips;
    for (std::size_t l = 0; l < c.levels(); ++l) {
      if (l > 0 && c.downsampling == Downsampling::maxpool) x = ag::maxpool2d(x);
      x = run_block(g, encoder_[l], x, train);
      if (l + 1 < c.levels()) skips.push_back(x);
    }
    ModelOutput<T> out;
    for (std::size_t l = c.levels() - 1; l-- > 0;) {
      Decoder& d = decoder_[l];
      Var<T> up = d.up ? run_conv(g, *d.up, x) : ag::upsample_nearest(x, 2);
      if (up.shape()[2] != skips[l].shape()[2]) {
        throw InvalidShapeError("skip connection at level " + std::to_string(l) + " has mismatched spatial size");
      }
      x = run_block(g, d.block, ag::concat_channels(up, skips[l]), train);
      if (d.ds_head) {
        Var<T> aux = run_conv(g, *d.ds_head, x);
        aux = ag::upsample_nearest(aux, std::size_t{1} << l);
        out.aux_logits.push_back(aux);
        out.aux_probs.push_back(ag::softmax(aux));
      }
    }
    out.logits = run_conv(g, head_, x);
    return out;
  }

  /// Eval-mode logits without recording gradients.
  Tensor<T> infer_logits(const Tensor<T>& batch) {
    Graph<T> g(false);
    return forward(g, batch, Mode::eval).logits.value();
  }

  LabelMap predict(const Tensor<T>& batch) { return argmax_channels(infer_logits(batch)); }

  /// Every persistent tensor (parameters, then normalization buffers) by name.
  std::vector<std::pair<std::string, Tensor<T>*>> state() {
    std::vector<std::pair<std::string, Tensor<T>*>> s;
    for (auto& p : params_) s.emplace_back(p.name, &p.value);
    for (auto& r : running_) {
      s.emplace_back(r.name + ".running_mean", &r.stats.mean);
      s.emplace_back(r.name + ".running_var", &r.stats.var);
    }
    return s;
  }

  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> s;
    for (const auto& p : params_) s.push_back(p.value);
    for (const auto& r : running_) {
      s.push_back(r.stats.mean);
      s.push_back(r.stats.var);
    }
    return s;
  }

  void restore(const std::vector<Tensor<T>>& snap) {
    std::size_t i = 0;
    for (auto& p : params_) p.value = snap.at(i++);
    for (auto& r : running_) {
      r.stats.mean = snap.at(i++);
      r.stats.var = snap.at(i++);
    }
  }

  /// Replaces every persistent tensor from a name->tensor map. Names and
  /// shapes must match exactly.
  template <class Map>
  void load_state(const Map& tensors) {
    auto s = state();
    if (tensors.size() != s.size()) {
      throw CheckpointMismatchError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model needs " +
                                    std::to_string(s.size()));
    }
    for (auto& [name, dst] : s) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw CheckpointMismatchError("checkpoint lacks tensor '" + name + "'");
      if (it->second.shape() != dst->shape()) {
        throw CheckpointMismatchError("tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                                      ", model expects " + shape_string(dst->shape()));
      }
      *dst = it->second.template cast<T>();
    }
  }

 private:
  struct Running {
    std::string name;
    kernels::RunningStats<T> stats;
  };
  struct Conv {
    std::size_t weight = 0, bias = 0;
    std::size_t stride = 1, pad = 0;
    bool transposed = false;
  };
  struct Norm {
    std::size_t gamma = 0, beta = 0;
    std::optional<std::size_t> running;  // index into running_ (batch norm only)
  };
  struct Block {
    Conv conv1, conv2;
    std::optional<Norm> norm1, norm2;
    std::optional<Conv> proj;
    bool residual = false;
  };
  struct Decoder {
    std::optional<Conv> up;
    Block block;
    std::optional<Conv> ds_head;
  };

  std::size_t add_param(const std::string& name, Shape shape, double stddev, double constant = 0) {
    Tensor<T> t(std::move(shape), static_cast<T>(constant));
    if (stddev > 0) {
      std::mt19937_64 rng(seed_ ^ detail::fnv1a(name));
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    }
    params_.emplace_back(name, std::move(t));
    return params_.size() - 1;
  }

  Conv make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
    Conv c;
    c.weight = add_param(name + ".weight", {out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    c.bias = add_param(name + ".bias", {out}, 0.0);
    c.stride = stride;
    c.pad = (k - 1) / 2;
    return c;
  }

  Conv make_transposed(const std::string& name, std::size_t in, std::size_t out) {
    Conv c;
    c.weight = add_param(name + ".weight", {in, out, 2, 2}, std::sqrt(2.0 / static_cast<double>(in)));
    c.bias = add_param(name + ".bias", {out}, 0.0);
    c.stride = 2;
    c.transposed = true;
    return c;
  }

  std::optional<Norm> make_norm(const std::string& name, std::size_t channels) {
    if (config_.normalization == Normalization::none) return std::nullopt;
    Norm n;
    n.gamma = add_param(name + ".gamma", {channels}, 0.0, 1.0);
    n.beta = add_param(name + ".beta", {channels}, 0.0, 0.0);
    if (config_.normalization == Normalization::batch) {
      n.running = running_.size();
      running_.push_back({name, {Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})}});
    }
    return n;
  }

  Block make_block(const std::string& name, std::size_t in, std::size_t out, std::size_t stride) {
    Block b;
    b.conv1 = make_conv(name + ".conv1", in, out, 3, stride);
    b.norm1 = make_norm(name + ".norm1", out);
    b.conv2 = make_conv(name + ".conv2", out, out, 3, 1);
    b.norm2 = make_norm(name + ".norm2", out);
    b.residual = config_.residual;
    if (b.residual && (in != out || stride != 1)) b.proj = make_conv(name + ".proj", in, out, 1, stride);
    return b;
  }

  void build() {
    const ModelConfig& c = config_;
    const std::size_t L = c.levels();
    std::size_t in = c.in_channels;
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t stride = (l > 0 && c.downsampling == Downsampling::strided_conv) ? 2 : 1;
      encoder_.push_back(make_block("enc" + std::to_string(l), in, c.encoder_channels[l], stride));
      in = c.encoder_channels[l];
    }
    decoder_.resize(L > 0 ? L - 1 : 0);
    std::size_t prev = c.encoder_channels[L - 1];
    for (std::size_t l = L - 1; l-- > 0;) {
      Decoder& d = decoder_[l];
      const std::string name = "dec" + std::to_string(l);
      const std::size_t skip = c.encoder_channels[l];
      const std::size_t out = l == 0 ? c.final_channels : c.encoder_channels[l];
      std::size_t up_channels = prev;
      if (c.upsampling == Upsampling::transposed_conv) {
        d.up = make_transposed(name + ".up", prev, skip);
        up_channels = skip;
      }
      d.block = make_block(name, up_channels + skip, out, 1);
      if (c.deep_supervision && l > 0) d.ds_head = make_conv("ds" + std::to_string(l), out, c.num_classes, 1, 1);
      prev = out;
    }
    head_ = make_conv("head", L > 1 ? c.final_channels : c.encoder_channels[0], c.num_classes, 1, 1);
  }

  Var<T> run_conv(Graph<T>& g, const Conv& c, Var<T> x) {
    Var<T> w = g.parameter(params_[c.weight]);
    Var<T> b = g.parameter(params_[c.bias]);
    if (c.transposed) return ag::conv_transpose2d(x, w, std::optional<Var<T>>(b), c.stride);
    return ag::conv2d(x, w, std::optional<Var<T>>(b), c.stride, c.pad);
  }

  Var<T> run_norm(Graph<T>& g, const std::optional<Norm>& n, Var<T> x, bool train) {
    if (!n) return x;
    Var<T> gamma = g.parameter(params_[n->gamma]);
    Var<T> beta = g.parameter(params_[n->beta]);
    if (config_.normalization == Normalization::instance) {
      return ag::normalize(x, kernels::NormKind::instance, gamma, beta, static_cast<kernels::RunningStats<T>*>(nullptr),
                           train);
    }
    return ag::normalize(x, kernels::NormKind::batch, gamma, beta, &running_[*n->running].stats, train);
  }

  Var<T> run_block(Graph<T>& g, const Block& b, Var<T> x, bool train) {
    const Activation act = config_.activation;
    Var<T> h = ag::activation(run_norm(g, b.norm1, run_conv(g, b.conv1, x), train), act);
    h = run_norm(g, b.norm2, run_conv(g, b.conv2, h), train);
    if (b.residual) h = ag::add(h, b.proj ? run_conv(g, *b.proj, x) : x);
    return ag::activation(h, act);
  }

  ModelConfig config_;
  std::uint64_t seed_;
  std::deque<Parameter<T>> params_;
  std::vector<Running> running_;
  std::vector<Block> encoder_;
  std::vector<Decoder> decoder_;
  Conv head_;
};

using UNet = BasicUNet<float>;

}  // namespace echoseg
