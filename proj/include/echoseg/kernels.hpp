#pragma once

// Forward and backward kernels for the layers of the U-Net family. Every
// function here is pure: inputs are read-only, results are returned by value.
// Layout is NCHW throughout. Convolutions lower to im2col + GEMM.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "echoseg/parallel.hpp"
#include "echoseg/tensor.hpp"

namespace echoseg::kernels {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

using Index = Eigen::Index;

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.01;

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidShapeError(message);
}

template <class T>
void require_rank4(const Tensor<T>& t, const char* what) {
  require(t.rank() == 4, std::string(what) + " must be rank 4 (NCHW), got " + shape_string(t.shape()));
}

/// Sum with eight fixed partial accumulators in double. Order is fixed, so
/// results are reproducible; the partials keep the loop from being
/// latency-bound.
template <class T, class F>
double strided_sum(std::size_t n, F&& term) {
  std::array<double, 8> acc{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += term(i + k);
  }
  for (; i < n; ++i) acc[i % 8] += term(i);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace detail

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  detail::require(in + 2 * pad >= kernel, "convolution kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

/// Output rows per GEMM tile. Keeps one im2col tile near 512 KB so it stays
/// in L2 while the weight matrix streams over it.
inline std::size_t tile_rows(const ConvGeometry& g) {
  const std::size_t target = std::clamp<std::size_t>((std::size_t{1} << 17) / g.col_rows(), 256, 1024);
  return std::clamp<std::size_t>(target / g.out_w, 1, g.out_h);
}

/// Unfolds output rows [oy0, oy1) of one image [C,H,W] into a
/// [C*kh*kw, (oy1-oy0)*out_w] matrix.
template <class T>
void im2col(const T* image, const ConvGeometry& g, T* col, std::size_t oy0, std::size_t oy1) {
  const std::size_t cols = (oy1 - oy0) * g.out_w;
  const auto width = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src_plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* dst = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * cols;
        const auto shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          T* drow = dst + (oy - oy0) * g.out_w;
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(drow, drow + g.out_w, T{});
            continue;
          }
          const T* srow = src_plane + static_cast<std::size_t>(iy) * g.width;
          if (g.stride == 1) {
            const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, g.out_w));
            const auto hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(width - shift, 0, g.out_w));
            std::fill(drow, drow + lo, T{});
            if (hi > lo) std::memcpy(drow + lo, srow + static_cast<std::ptrdiff_t>(lo) + shift, (hi - lo) * sizeof(T));
            std::fill(drow + std::max(lo, hi), drow + g.out_w, T{});
          } else {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride) + shift;
              drow[ox] = (ix >= 0 && ix < width) ? srow[ix] : T{};
            }
          }
        }
      }
    }
  }
}

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  im2col(image, g, col, 0, g.out_h);
}

/// Adjoint of im2col for output rows [oy0, oy1): scatters-and-adds the
/// columns into an image the caller has initialized.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* image, std::size_t oy0, std::size_t oy1) {
  const std::size_t cols = (oy1 - oy0) * g.out_w;
  const auto width = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* dst_plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* src = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * cols;
        const auto shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* irow = dst_plane + static_cast<std::size_t>(iy) * g.width;
          const T* srow = src + (oy - oy0) * g.out_w;
          if (g.stride == 1) {
            const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, g.out_w));
            const auto hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(width - shift, 0, g.out_w));
            for (std::size_t ox = lo; ox < hi; ++ox) irow[static_cast<std::ptrdiff_t>(ox) + shift] += srow[ox];
          } else {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride) + shift;
              if (ix >= 0 && ix < width) irow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  col2im(col, g, image, 0, g.out_h);
}

template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

/// Columns [first, first+count) of a row-major [rows, ld] block.
template <class T>
StridedMap<T> columns(T* base, std::size_t rows, std::size_t ld, std::size_t first, std::size_t count) {
  return StridedMap<T>(base + first, static_cast<Index>(rows), static_cast<Index>(count),
                       Eigen::OuterStride<>(static_cast<Index>(ld)));
}
template <class T>
ConstStridedMap<T> columns(const T* base, std::size_t rows, std::size_t ld, std::size_t first, std::size_t count) {
  return ConstStridedMap<T>(base + first, static_cast<Index>(rows), static_cast<Index>(count),
                            Eigen::OuterStride<>(static_cast<Index>(ld)));
}

template <class T>
struct ConvGrads {
  Tensor<T> input;  // empty when not requested
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Adds per-sample partial results into `total` in sample order. With one
/// thread the partials are produced and folded one at a time; with more they
/// are produced in parallel and folded afterwards. Both paths perform the
/// same additions in the same order.
template <class T, class Partial>
void ordered_reduce(std::size_t samples, AlignedVector<T>& total, Partial&& partial) {
  std::fill(total.begin(), total.end(), T{});
  if (num_threads() <= 1 || samples <= 1) {
    AlignedVector<T> buf(total.size());
    for (std::size_t n = 0; n < samples; ++n) {
      partial(n, buf.data());
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += buf[i];
    }
    return;
  }
  std::vector<AlignedVector<T>> parts(samples, AlignedVector<T>(total.size()));
  parallel_for(samples, [&](std::size_t n) { partial(n, parts[n].data()); });
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += p[i];
  }
}

/// Per-channel sums of a [K, plane] block, accumulated in double.
template <class T>
void channel_sums(const T* block, std::size_t channels, std::size_t plane, T* out) {
  for (std::size_t k = 0; k < channels; ++k) {
    const T* row = block + k * plane;
    out[k] = static_cast<T>(detail::strided_sum<T>(plane, [row](std::size_t i) { return static_cast<double>(row[i]); }));
  }
}

namespace detail {

/// Shared tiling driver for both convolution directions. `g` describes the
/// forward convolution whose output grid is tiled; body(oy0, oy1, col) gets
/// a scratch buffer sized for one tile.
template <class T, class Body>
void for_each_tile(const ConvGeometry& g, AlignedVector<T>& scratch, Body&& body) {
  const std::size_t rows = tile_rows(g);
  scratch.resize(g.col_rows() * rows * g.out_w);
  for (std::size_t oy0 = 0; oy0 < g.out_h; oy0 += rows) {
    body(oy0, std::min(g.out_h, oy0 + rows), scratch.data());
  }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

// ---------------------------------------------------------------- conv2d

/// Cross-correlation. weight [K,C,kh,kw], bias [K] (may be empty).
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                         std::size_t pad) {
  detail::require_rank4(x, "conv2d input");
  detail::require_rank4(w, "conv2d weight");
  detail::require(x.dim(1) == w.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                            " channels but weight expects " + std::to_string(w.dim(1)));
  detail::require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  detail::require(b.empty() || (b.rank() == 1 && b.dim(0) == w.dim(0)), "conv2d: bias shape mismatch");
  const std::size_t N = x.dim(0), K = w.dim(0);
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, pad, 0, 0};
  g.out_h = conv_out_size(g.height, g.kernel_h, stride, pad);
  g.out_w = conv_out_size(g.width, g.kernel_w, stride, pad);
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t rows = g.col_rows();
  const std::size_t in_size = g.channels * g.height * g.width;

  Tensor<T> y({N, K, g.out_h, g.out_w});
  ConstMatrixMap<T> W(w.data(), static_cast<Index>(K), static_cast<Index>(rows));
  parallel_for(N, [&](std::size_t n) {
    const T* xin = x.data() + n * in_size;
    T* yout = y.data() + n * K * plane;
    AlignedVector<T> scratch;
    detail::for_each_tile(g, scratch, [&](std::size_t oy0, std::size_t oy1, T* col) {
      const std::size_t first = oy0 * g.out_w, count = (oy1 - oy0) * g.out_w;
      auto Y = columns(yout, K, plane, first, count);
      if (detail::is_pointwise(g)) {
        Y.noalias() = W * columns(xin, rows, plane, first, count);
      } else {
        im2col(xin, g, col, oy0, oy1);
        Y.noalias() = W * ConstMatrixMap<T>(col, static_cast<Index>(rows), static_cast<Index>(count));
      }
    });
    if (!b.empty()) {
      for (std::size_t k = 0; k < K; ++k) ArrayMap<T>(yout + k * plane, static_cast<Index>(plane)) += b[k];
    }
  });
  return y;
}

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, std::size_t stride,
                             std::size_t pad, bool need_input_grad, bool has_bias = true) {
  const std::size_t N = x.dim(0), K = w.dim(0);
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, pad, dy.dim(2), dy.dim(3)};
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t rows = g.col_rows();
  const std::size_t in_size = g.channels * g.height * g.width;
  ConstMatrixMap<T> W(w.data(), static_cast<Index>(K), static_cast<Index>(rows));

  ConvGrads<T> grads;
  if (need_input_grad) {
    grads.input = Tensor<T>(x.shape());
    parallel_for(N, [&](std::size_t n) {
      const T* dyn = dy.data() + n * K * plane;
      T* dx = grads.input.data() + n * in_size;
      AlignedVector<T> scratch;
      detail::for_each_tile(g, scratch, [&](std::size_t oy0, std::size_t oy1, T* col) {
        const std::size_t first = oy0 * g.out_w, count = (oy1 - oy0) * g.out_w;
        if (detail::is_pointwise(g)) {
          columns(dx, rows, plane, first, count).noalias() = W.transpose() * columns(dyn, K, plane, first, count);
        } else {
          MatrixMap<T>(col, static_cast<Index>(rows), static_cast<Index>(count)).noalias() =
              W.transpose() * columns(dyn, K, plane, first, count);
          col2im(col, g, dx, oy0, oy1);
        }
      });
    });
  }

  grads.weight = Tensor<T>(w.shape());
  ordered_reduce<T>(N, grads.weight.storage(), [&](std::size_t n, T* out) {
    const T* xin = x.data() + n * in_size;
    const T* dyn = dy.data() + n * K * plane;
    MatrixMap<T> dW(out, static_cast<Index>(K), static_cast<Index>(rows));
    AlignedVector<T> scratch;
    bool first_tile = true;
    detail::for_each_tile(g, scratch, [&](std::size_t oy0, std::size_t oy1, T* col) {
      const std::size_t first = oy0 * g.out_w, count = (oy1 - oy0) * g.out_w;
      const T* src = col;
      std::size_t ld = count, offset = 0;
      if (detail::is_pointwise(g)) {
        src = xin;
        ld = plane;
        offset = first;
      } else {
        im2col(xin, g, col, oy0, oy1);
      }
      if (first_tile) {
        dW.noalias() = columns(dyn, K, plane, first, count) * columns(src, rows, ld, offset, count).transpose();
      } else {
        dW.noalias() += columns(dyn, K, plane, first, count) * columns(src, rows, ld, offset, count).transpose();
      }
      first_tile = false;
    });
  });

  if (has_bias) {
    grads.bias = Tensor<T>({K});
    ordered_reduce<T>(N, grads.bias.storage(),
                      [&](std::size_t n, T* out) { channel_sums(dy.data() + n * K * plane, K, plane, out); });
  }
  return grads;
}

// ------------------------------------------------------ conv_transpose2d

/// weight [C_in, K_out, kh, kw]; no padding. Output side (H-1)*stride + kh.
/// Computed as the adjoint of the forward convolution that maps the output
/// grid back onto the input grid.
template <class T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                   std::size_t stride) {
  detail::require_rank4(x, "conv_transpose2d input");
  detail::require_rank4(w, "conv_transpose2d weight");
  detail::require(x.dim(1) == w.dim(0), "conv_transpose2d: input has " + std::to_string(x.dim(1)) +
                                            " channels but weight expects " + std::to_string(w.dim(0)));
  detail::require(stride == 1 || stride == 2, "conv_transpose2d: stride must be 1 or 2");
  detail::require(b.empty() || (b.rank() == 1 && b.dim(0) == w.dim(1)), "conv_transpose2d: bias shape mismatch");
  const std::size_t N = x.dim(0), Cin = x.dim(1), K = w.dim(1);
  const std::size_t H = x.dim(2), Wd = x.dim(3);
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  const ConvGeometry g{K, (H - 1) * stride + kh, (Wd - 1) * stride + kw, kh, kw, stride, 0, H, Wd};
  const std::size_t rows = g.col_rows(), plane = H * Wd;
  const std::size_t out_plane = g.height * g.width;
  Tensor<T> y({N, K, g.height, g.width});
  ConstMatrixMap<T> Wm(w.data(), static_cast<Index>(Cin), static_cast<Index>(rows));
  parallel_for(N, [&](std::size_t n) {
    const T* xin = x.data() + n * Cin * plane;
    T* out = y.data() + n * K * out_plane;
    AlignedVector<T> scratch;
    detail::for_each_tile(g, scratch, [&](std::size_t iy0, std::size_t iy1, T* col) {
      const std::size_t first = iy0 * Wd, count = (iy1 - iy0) * Wd;
      MatrixMap<T>(col, static_cast<Index>(rows), static_cast<Index>(count)).noalias() =
          Wm.transpose() * columns(xin, Cin, plane, first, count);
      col2im(col, g, out, iy0, iy1);
    });
    if (!b.empty()) {
      for (std::size_t k = 0; k < K; ++k) ArrayMap<T>(out + k * out_plane, static_cast<Index>(out_plane)) += b[k];
    }
  });
  return y;
}

template <class T>
ConvGrads<T> conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                       std::size_t stride, bool need_input_grad, bool has_bias = true) {
  const std::size_t N = x.dim(0), Cin = x.dim(1), K = w.dim(1);
  const std::size_t H = x.dim(2), Wd = x.dim(3);
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  const ConvGeometry g{K, dy.dim(2), dy.dim(3), kh, kw, stride, 0, H, Wd};
  const std::size_t rows = g.col_rows(), plane = H * Wd;
  const std::size_t out_size = K * g.height * g.width;
  ConstMatrixMap<T> Wm(w.data(), static_cast<Index>(Cin), static_cast<Index>(rows));

  ConvGrads<T> grads;
  if (need_input_grad) {
    grads.input = Tensor<T>(x.shape());
    parallel_for(N, [&](std::size_t n) {
      AlignedVector<T> scratch;
      T* dx = grads.input.data() + n * Cin * plane;
      detail::for_each_tile(g, scratch, [&](std::size_t iy0, std::size_t iy1, T* col) {
        const std::size_t first = iy0 * Wd, count = (iy1 - iy0) * Wd;
        im2col(dy.data() + n * out_size, g, col, iy0, iy1);
        columns(dx, Cin, plane, first, count).noalias() =
            Wm * ConstMatrixMap<T>(col, static_cast<Index>(rows), static_cast<Index>(count));
      });
    });
  }
  grads.weight = Tensor<T>(w.shape());
  ordered_reduce<T>(N, grads.weight.storage(), [&](std::size_t n, T* out) {
    MatrixMap<T> dW(out, static_cast<Index>(Cin), static_cast<Index>(rows));
    const T* xin = x.data() + n * Cin * plane;
    AlignedVector<T> scratch;
    bool first_tile = true;
    detail::for_each_tile(g, scratch, [&](std::size_t iy0, std::size_t iy1, T* col) {
      const std::size_t first = iy0 * Wd, count = (iy1 - iy0) * Wd;
      im2col(dy.data() + n * out_size, g, col, iy0, iy1);
      auto C = ConstMatrixMap<T>(col, static_cast<Index>(rows), static_cast<Index>(count));
      if (first_tile) {
        dW.noalias() = columns(xin, Cin, plane, first, count) * C.transpose();
      } else {
        dW.noalias() += columns(xin, Cin, plane, first, count) * C.transpose();
      }
      first_tile = false;
    });
  });
  if (has_bias) {
    grads.bias = Tensor<T>({K});
    const std::size_t out_plane = g.height * g.width;
    ordered_reduce<T>(N, grads.bias.storage(),
                      [&](std::size_t n, T* out) { channel_sums(dy.data() + n * out_size, K, out_plane, out); });
  }
  return grads;
}

// ------------------------------------------------------------- maxpool2d

template <class T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint8_t> argmax;  // window offset 0..3 per output element
};

/// 2x2 window, stride 2. Ties go to the first position in row-major order.
template <class T>
PoolResult<T> maxpool2d_forward(const Tensor<T>& x) {
  detail::require_rank4(x, "maxpool2d input");
  const std::size_t H = x.dim(2), W = x.dim(3);
  detail::require(H % 2 == 0 && W % 2 == 0, "maxpool2d: spatial dims must be even, got " + shape_string(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2, maps = x.dim(0) * x.dim(1);
  PoolResult<T> r{Tensor<T>({x.dim(0), x.dim(1), Ho, Wo}), std::vector<std::uint8_t>(maps * Ho * Wo)};
  for (std::size_t m = 0; m < maps; ++m) {
    const T* in = x.data() + m * H * W;
    T* out = r.output.data() + m * Ho * Wo;
    std::uint8_t* arg = r.argmax.data() + m * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const T* r0 = in + 2 * oy * W;
      const T* r1 = r0 + W;
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T v[4] = {r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]};
        std::uint8_t best = 0;
        for (std::uint8_t k = 1; k < 4; ++k) {
          if (v[k] > v[best]) best = k;
        }
        out[oy * Wo + ox] = v[best];
        arg[oy * Wo + ox] = best;
      }
    }
  }
  return r;
}

template <class T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::uint8_t>& argmax, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const std::size_t W = input_shape[3];
  const std::size_t Ho = dy.dim(2), Wo = dy.dim(3), maps = dy.dim(0) * dy.dim(1);
  for (std::size_t m = 0; m < maps; ++m) {
    T* out = dx.data() + m * input_shape[2] * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const std::size_t o = (m * Ho + oy) * Wo + ox;
        const std::uint8_t k = argmax[o];
        out[(2 * oy + k / 2) * W + 2 * ox + k % 2] += dy[o];
      }
    }
  }
  return dx;
}

// ------------------------------------------------------ upsample_nearest

template <class T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& x, std::size_t factor) {
  detail::require_rank4(x, "upsample_nearest input");
  detail::require(factor >= 2, "upsample_nearest: factor must be >= 2");
  const std::size_t H = x.dim(2), W = x.dim(3), Ho = H * factor, Wo = W * factor;
  const std::size_t maps = x.dim(0) * x.dim(1);
  Tensor<T> y({x.dim(0), x.dim(1), Ho, Wo});
  for (std::size_t m = 0; m < maps; ++m) {
    const T* in = x.data() + m * H * W;
    T* out = y.data() + m * Ho * Wo;
    for (std::size_t iy = 0; iy < H; ++iy) {
      T* row = out + iy * factor * Wo;
      for (std::size_t ix = 0; ix < W; ++ix) std::fill_n(row + ix * factor, factor, in[iy * W + ix]);
      for (std::size_t r = 1; r < factor; ++r) std::copy_n(row, Wo, row + r * Wo);
    }
  }
  return y;
}

template <class T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, std::size_t factor) {
  const std::size_t Ho = dy.dim(2), Wo = dy.dim(3), H = Ho / factor, W = Wo / factor;
  const std::size_t maps = dy.dim(0) * dy.dim(1);
  Tensor<T> dx({dy.dim(0), dy.dim(1), H, W});
  for (std::size_t m = 0; m < maps; ++m) {
    const T* in = dy.data() + m * Ho * Wo;
    T* out = dx.data() + m * H * W;
    for (std::size_t y = 0; y < Ho; ++y) {
      T* orow = out + (y / factor) * W;
      const T* irow = in + y * Wo;
      for (std::size_t x = 0; x < Wo; ++x) orow[x / factor] += irow[x];
    }
  }
  return dx;
}

// --------------------------------------------------------- normalization

enum class NormKind { batch, instance };

/// Statistics saved by the forward pass for the backward pass.
struct NormCache {
  std::vector<double> mean;     // per group
  std::vector<double> inv_std;  // per group
  bool used_running = false;
};

template <class T>
struct NormResult {
  Tensor<T> output;
  NormCache cache;
};

/// Running statistics of a batch-norm layer. Variance is the unbiased
/// estimate, as in the common frameworks.
template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Visits every (sample, channel) plane belonging to group g.
/// batch: group = channel, planes over all samples.
/// instance: group = sample*C + channel, a single plane.
template <class F>
void for_group_planes(NormKind kind, std::size_t N, std::size_t C, std::size_t g, F&& f) {
  if (kind == NormKind::batch) {
    for (std::size_t n = 0; n < N; ++n) f(n * C + g);
  } else {
    f(g);
  }
}

template <class T>
NormResult<T> normalize_forward(const Tensor<T>& x, NormKind kind, const Tensor<T>& gamma, const Tensor<T>& beta,
                                double eps, RunningStats<T>* running, bool train, double momentum = kBatchNormMomentum) {
  detail::require_rank4(x, "normalize input");
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(gamma.numel() == C && beta.numel() == C, "normalize: gamma/beta must have one entry per channel");
  detail::require(eps > 0, "normalize: eps must be positive");
  if (kind == NormKind::batch && train && N < 2) {
    throw DegenerateBatchError("batch normalization in train mode needs at least 2 samples, got " + std::to_string(N));
  }
  const bool use_running = kind == NormKind::batch && !train;
  if (kind == NormKind::batch) detail::require(running != nullptr, "batch normalization requires running statistics");
  const std::size_t groups = kind == NormKind::batch ? C : N * C;
  const std::size_t members = kind == NormKind::batch ? N * plane : plane;

  NormResult<T> r{Tensor<T>(x.shape()), NormCache{std::vector<double>(groups), std::vector<double>(groups), use_running}};
  for (std::size_t g = 0; g < groups; ++g) {
    double mean = 0, var = 0;
    if (use_running) {
      mean = static_cast<double>(running->mean[g]);
      var = static_cast<double>(running->var[g]);
    } else {
      double s = 0;
      for_group_planes(kind, N, C, g, [&](std::size_t p) {
        const T* v = x.data() + p * plane;
        s += detail::strided_sum<T>(plane, [v](std::size_t i) { return static_cast<double>(v[i]); });
      });
      mean = s / static_cast<double>(members);
      double ss = 0;
      for_group_planes(kind, N, C, g, [&](std::size_t p) {
        const T* v = x.data() + p * plane;
        ss += detail::strided_sum<T>(plane, [v, mean](std::size_t i) {
          const double d = static_cast<double>(v[i]) - mean;
          return d * d;
        });
      });
      var = ss / static_cast<double>(members);
      if (kind == NormKind::batch && train) {
        const double unbiased = members > 1 ? ss / static_cast<double>(members - 1) : var;
        running->mean[g] = static_cast<T>((1 - momentum) * running->mean[g] + momentum * mean);
        running->var[g] = static_cast<T>((1 - momentum) * running->var[g] + momentum * unbiased);
      }
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    r.cache.mean[g] = mean;
    r.cache.inv_std[g] = inv;
    const std::size_t ch = g % C;
    const T scale = static_cast<T>(gamma[ch] * inv);
    const T shift = static_cast<T>(beta[ch] - gamma[ch] * mean * inv);
    for_group_planes(kind, N, C, g, [&](std::size_t p) {
      ArrayMap<T>(r.output.data() + p * plane, static_cast<Index>(plane)) =
          ConstArrayMap<T>(x.data() + p * plane, static_cast<Index>(plane)) * scale + shift;
    });
  }
  return r;
}

template <class T>
struct NormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <class T>
NormGrads<T> normalize_backward(const Tensor<T>& x, NormKind kind, const Tensor<T>& gamma, const NormCache& cache,
                                const Tensor<T>& dy) {
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t groups = cache.mean.size();
  const double members = static_cast<double>(kind == NormKind::batch ? N * plane : plane);
  NormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
  std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const double mean = cache.mean[grp], inv = cache.inv_std[grp];
    const std::size_t ch = grp % C;
    double sum_dy = 0, sum_dy_xhat = 0;
    for_group_planes(kind, N, C, grp, [&](std::size_t p) {
      const T* d = dy.data() + p * plane;
      const T* v = x.data() + p * plane;
      sum_dy += detail::strided_sum<T>(plane, [d](std::size_t i) { return static_cast<double>(d[i]); });
      sum_dy_xhat += detail::strided_sum<T>(plane, [d, v, mean, inv](std::size_t i) {
        return static_cast<double>(d[i]) * (static_cast<double>(v[i]) - mean) * inv;
      });
    });
    dgamma[ch] += sum_dy_xhat;
    dbeta[ch] += sum_dy;
    const double gm = static_cast<double>(gamma[ch]);
    for_group_planes(kind, N, C, grp, [&](std::size_t p) {
      const T* d = dy.data() + p * plane;
      const T* v = x.data() + p * plane;
      T* out = g.input.data() + p * plane;
      if (cache.used_running) {
        const T k = static_cast<T>(gm * inv);
        for (std::size_t i = 0; i < plane; ++i) out[i] = d[i] * k;
      } else {
        const double a = gm * inv / members;
        const T ka = static_cast<T>(a * members);
        const T kb = static_cast<T>(a * sum_dy);
        const T kc = static_cast<T>(a * sum_dy_xhat * inv);
        const T mu = static_cast<T>(mean);
        for (std::size_t i = 0; i < plane; ++i) out[i] = ka * d[i] - kb - kc * (v[i] - mu);
      }
    });
  }
  for (std::size_t c = 0; c < C; ++c) {
    g.gamma[c] = static_cast<T>(dgamma[c]);
    g.beta[c] = static_cast<T>(dbeta[c]);
  }
  return g;
}

// ------------------------------------------------------------ activation

enum class ActivationKind { relu, leaky_relu, mish, gelu };

inline constexpr std::size_t kChunk = 4096;

template <class T>
Tensor<T> activation_forward(ActivationKind kind, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.numel();
  const T* in = x.data();
  T* out = y.data();
  switch (kind) {
    case ActivationKind::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
      break;
    case ActivationKind::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T{0} ? in[i] : static_cast<T>(kLeakySlope) * in[i];
      break;
    case ActivationKind::mish:
      // tanh(softplus(x)) = q / (q + 2) with q = e^x (e^x + 2).
      for (std::size_t off = 0; off < n; off += kChunk) {
        const auto len = static_cast<Index>(std::min(kChunk, n - off));
        ConstArrayMap<T> X(in + off, len);
        const Eigen::Array<T, Eigen::Dynamic, 1> e = X.min(T(20)).exp();
        const Eigen::Array<T, Eigen::Dynamic, 1> q = e * (e + T(2));
        ArrayMap<T>(out + off, len) = X * q / (q + T(2));
      }
      break;
    case ActivationKind::gelu:
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<T>(0.5) * in[i] * (T(1) + std::erf(in[i] * static_cast<T>(std::numbers::sqrt2 / 2)));
      }
      break;
  }
  return y;
}

template <class T>
Tensor<T> activation_backward(ActivationKind kind, const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  const std::size_t n = x.numel();
  const T* in = x.data();
  const T* d = dy.data();
  T* out = dx.data();
  switch (kind) {
    case ActivationKind::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T{0} ? d[i] : T{0};
      break;
    case ActivationKind::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T{0} ? d[i] : static_cast<T>(kLeakySlope) * d[i];
      break;
    case ActivationKind::mish:
      // d/dx = t + x * sech^2(sp) * sigmoid(x), t = q/(q+2), sech^2 = 4(q+1)/(q+2)^2.
      for (std::size_t off = 0; off < n; off += kChunk) {
        const auto len = static_cast<Index>(std::min(kChunk, n - off));
        ConstArrayMap<T> X(in + off, len);
        const Eigen::Array<T, Eigen::Dynamic, 1> e = X.min(T(20)).exp();
        const Eigen::Array<T, Eigen::Dynamic, 1> q = e * (e + T(2));
        const Eigen::Array<T, Eigen::Dynamic, 1> q2 = q + T(2);
        const Eigen::Array<T, Eigen::Dynamic, 1> grad =
            q / q2 + X * (T(4) * (q + T(1)) / (q2 * q2)) * (e / (e + T(1)));
        ArrayMap<T>(out + off, len) = grad * ConstArrayMap<T>(d + off, len);
      }
      break;
    case ActivationKind::gelu: {
      const T inv_sqrt2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
      for (std::size_t i = 0; i < n; ++i) {
        const T v = in[i];
        const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
        const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * v * v);
        out[i] = d[i] * (cdf + v * pdf);
      }
      break;
    }
  }
  return dx;
}

// --------------------------------------------------------------- softmax

/// Softmax over the channel axis of [N,C,H,W].
template <class T>
Tensor<T> softmax_forward(const Tensor<T>& x) {
  detail::require_rank4(x, "softmax input");
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t off = 0; off < plane; off += kChunk) {
      const auto len = static_cast<Index>(std::min(kChunk, plane - off));
      auto row = [&](const Tensor<T>& t, std::size_t c) {
        return ConstArrayMap<T>(t.data() + (n * C + c) * plane + off, len);
      };
      Eigen::Array<T, Eigen::Dynamic, 1> m = row(x, 0);
      for (std::size_t c = 1; c < C; ++c) m = m.max(row(x, c));
      Eigen::Array<T, Eigen::Dynamic, 1> s = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(len);
      for (std::size_t c = 0; c < C; ++c) {
        ArrayMap<T> out(y.data() + (n * C + c) * plane + off, len);
        out = (row(x, c) - m).exp();
        s += out;
      }
      const Eigen::Array<T, Eigen::Dynamic, 1> inv = s.inverse();
      for (std::size_t c = 0; c < C; ++c) ArrayMap<T>(y.data() + (n * C + c) * plane + off, len) *= inv;
    }
  }
  return y;
}

template <class T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const std::size_t N = y.dim(0), C = y.dim(1), plane = y.dim(2) * y.dim(3);
  Tensor<T> dx(y.shape());
  for (std::size_t n = 0; n < N; ++n) {
    Eigen::Array<T, Eigen::Dynamic, 1> dot = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(static_cast<Index>(plane));
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t o = (n * C + c) * plane;
      dot += ConstArrayMap<T>(y.data() + o, static_cast<Index>(plane)) *
             ConstArrayMap<T>(dy.data() + o, static_cast<Index>(plane));
    }
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t o = (n * C + c) * plane;
      ArrayMap<T>(dx.data() + o, static_cast<Index>(plane)) =
          ConstArrayMap<T>(y.data() + o, static_cast<Index>(plane)) *
          (ConstArrayMap<T>(dy.data() + o, static_cast<Index>(plane)) - dot);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- concat

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank4(a, "concat input");
  detail::require_rank4(b, "concat input");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t N = a.dim(0), plane = a.dim(2) * a.dim(3);
  const std::size_t sa = a.dim(1) * plane, sb = b.dim(1) * plane;
  Tensor<T> y({N, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * sa, sa, y.data() + n * (sa + sb));
    std::copy_n(b.data() + n * sb, sb, y.data() + n * (sa + sb) + sa);
  }
  return y;
}

}  // namespace echoseg::kernels
