#pragma once

// Forward (and the matching backward) numerics of every primitive op. These
// functions are tape-agnostic; autograd.hpp records them on a Tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "onconet/kernels.hpp"
#include "onconet/tensor.hpp"

namespace onconet {

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kLogClamp = 1e-12;

/// Kernel, bias and geometry of one convolution layer.
///
/// Regular convolution: kernel is [out, in/groups, kh, kw].
/// Transposed convolution: kernel is [in, out, kh, kw] (groups must be 1).
template <class T = float>
struct ConvParams {
  Tensor<T> kernel;
  Tensor<T> bias;
  ConvGeometry geom;

  std::size_t param_count() const { return kernel.numel() + bias.numel(); }
};

namespace ops {

namespace detail {

inline void fail_dim(const std::string& op, const std::string& dim, const std::string& msg) {
  throw ShapeError(dim, op + ": " + msg);
}

template <class T>
kernels::ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (g.stride == 0) fail_dim("conv2d", "stride", "stride must be positive");
  if (g.groups == 0) fail_dim("conv2d", "groups", "groups must be positive");
  kernels::ConvDims d{};
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.geom = g;
  if (d.cin % g.groups != 0)
    fail_dim("conv2d", "in_channels", "groups " + std::to_string(g.groups) +
                                          " does not divide input channels " + std::to_string(d.cin));
  if (d.cout % g.groups != 0)
    fail_dim("conv2d", "out_channels", "groups " + std::to_string(g.groups) +
                                           " does not divide output channels " + std::to_string(d.cout));
  if (kernel.dim(1) * g.groups != d.cin)
    fail_dim("conv2d", "in_channels",
             "input has " + std::to_string(d.cin) + " channels, kernel expects " +
                 std::to_string(kernel.dim(1) * g.groups));
  if (d.h + 2 * g.padding < d.kh) fail_dim("conv2d", "height", "kernel taller than padded input");
  if (d.w + 2 * g.padding < d.kw) fail_dim("conv2d", "width", "kernel wider than padded input");
  d.oh = conv_out_extent(d.h, d.kh, g.stride, g.padding);
  d.ow = conv_out_extent(d.w, d.kw, g.stride, g.padding);
  return d;
}

template <class T>
void check_bias(const Tensor<T>& bias, std::size_t channels, const char* op) {
  if (!bias.empty() && bias.numel() != channels)
    fail_dim(op, "bias", "bias has " + std::to_string(bias.numel()) + " entries, expected " +
                             std::to_string(channels));
}

/// Dims of the forward convolution whose input gradient is the transposed conv.
template <class T>
kernels::ConvDims transpose_dims(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g) {
  require_rank(x, 4, "conv2d_transpose");
  require_rank(kernel, 4, "conv2d_transpose");
  if (g.groups != 1) fail_dim("conv2d_transpose", "groups", "only groups=1 is supported");
  if (g.stride == 0) fail_dim("conv2d_transpose", "stride", "stride must be positive");
  if (g.output_padding >= g.stride && g.output_padding > 0)
    fail_dim("conv2d_transpose", "output_padding", "output_padding must be smaller than stride");
  if (kernel.dim(0) != x.dim(1))
    fail_dim("conv2d_transpose", "in_channels",
             "input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                 std::to_string(kernel.dim(0)));
  kernels::ConvDims d{};
  d.n = x.dim(0);
  d.cout = x.dim(1);  // conv "output" side = transposed input
  d.oh = x.dim(2);
  d.ow = x.dim(3);
  d.cin = kernel.dim(1);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.geom = g;
  const std::size_t full_h = (d.oh - 1) * g.stride + d.kh + g.output_padding;
  const std::size_t full_w = (d.ow - 1) * g.stride + d.kw + g.output_padding;
  if (full_h < 2 * g.padding + 1) fail_dim("conv2d_transpose", "height", "padding exceeds output");
  if (full_w < 2 * g.padding + 1) fail_dim("conv2d_transpose", "width", "padding exceeds output");
  d.h = full_h - 2 * g.padding;
  d.w = full_w - 2 * g.padding;
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const ConvGeometry& g) {
  const auto d = detail::conv_dims(x, kernel, g);
  detail::check_bias(bias, d.cout, "conv2d");
  Tensor<T> y({d.n, d.cout, d.oh, d.ow});
  kernels::conv2d_forward<T>(d, x.data().data(), kernel.data().data(), bias.data(), y.data().data());
  check_finite(y, "conv2d");
  return y;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv2d(x, p.kernel, p.bias, p.geom);
}

/// Gradients of conv2d. `dx`, `dkernel`, `dbias` are accumulated into when non-null.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g,
                     const Tensor<T>& dy, std::span<T> dx, std::span<T> dkernel, std::span<T> dbias) {
  const auto d = detail::conv_dims(x, kernel, g);
  if (!dx.empty()) {
    std::vector<T> tmp(x.numel());
    kernels::conv2d_backward_input<T>(d, dy.data().data(), kernel.data().data(), tmp.data(), false);
    for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
  }
  if (!dkernel.empty() || !dbias.empty()) {
    std::vector<T> dk(kernel.numel(), T(0));
    kernels::conv2d_backward_weight<T>(d, dy.data().data(), x.data().data(), dk.data(), dbias);
    if (!dkernel.empty())
      for (std::size_t i = 0; i < dk.size(); ++i) dkernel[i] += dk[i];
  }
}

/// Transposed convolution (fractionally strided). Output extent is
/// (H-1)*stride - 2*pad + k + output_padding.
template <class T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                           const ConvGeometry& g) {
  const auto d = detail::transpose_dims(x, kernel, g);
  detail::check_bias(bias, d.cin, "conv2d_transpose");
  Tensor<T> y({d.n, d.cin, d.h, d.w});
  kernels::conv2d_backward_input<T>(d, x.data().data(), kernel.data().data(), y.data().data(), false);
  if (!bias.empty()) {
    const std::size_t plane = d.h * d.w;
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t c = 0; c < d.cin; ++c) {
        T* row = y.data().data() + (n * d.cin + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) row[p] += bias[c];
      }
  }
  check_finite(y, "conv2d_transpose");
  return y;
}

template <class T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv2d_transpose(x, p.kernel, p.bias, p.geom);
}

template <class T>
void conv2d_transpose_backward(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g,
                               const Tensor<T>& dy, std::span<T> dx, std::span<T> dkernel,
                               std::span<T> dbias) {
  const auto d = detail::transpose_dims(x, kernel, g);
  if (!dx.empty()) {
    // Input gradient of a transposed conv is the forward conv of dy.
    Tensor<T> gx({d.n, d.cout, d.oh, d.ow});
    kernels::conv2d_forward<T>(d, dy.data().data(), kernel.data().data(), {}, gx.data().data());
    for (std::size_t i = 0; i < gx.numel(); ++i) dx[i] += gx[i];
  }
  if (!dkernel.empty()) {
    std::vector<T> dk(kernel.numel(), T(0));
    // Roles swap: dy plays the conv input, x plays the conv output gradient.
    kernels::conv2d_backward_weight<T>(d, x.data().data(), dy.data().data(), dk.data(), {});
    for (std::size_t i = 0; i < dk.size(); ++i) dkernel[i] += dk[i];
  }
  if (!dbias.empty()) {
    const std::size_t plane = d.h * d.w;
    for (std::size_t c = 0; c < d.cin; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const T* row = dy.data().data() + (n * d.cin + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) s += row[p];
      }
      dbias[c] += static_cast<T>(s);
    }
  }
}

// ---------------------------------------------------------------------------
// Pooling

/// Max pooling without padding. `argmax` receives the flat input index of the
/// winning element for every output cell.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t window, std::size_t stride,
                    std::vector<std::size_t>* argmax = nullptr) {
  require_rank(x, 4, "maxpool2d");
  if (window == 0) detail::fail_dim("maxpool2d", "window", "window must be >= 1");
  if (stride == 0) detail::fail_dim("maxpool2d", "stride", "stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H) detail::fail_dim("maxpool2d", "height", "window larger than input height");
  if (window > W) detail::fail_dim("maxpool2d", "width", "window larger than input width");
  const std::size_t oh = (H - window) / stride + 1, ow = (W - window) / stride + 1;
  Tensor<T> y({N, C, oh, ow});
  if (argmax) argmax->assign(y.numel(), 0);
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (i * stride) * W + j * stride;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) {
            const std::size_t idx = base + (i * stride + a) * W + (j * stride + b);
            if (x[idx] > x[best]) best = idx;
          }
        y[o] = x[best];
        if (argmax) (*argmax)[o] = best;
      }
  }
  return y;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) s += x[nc * P + p];
    y[nc] = static_cast<T>(s / static_cast<double>(P));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
T selu(T v) {
  const T lambda = static_cast<T>(kSeluLambda), alpha = static_cast<T>(kSeluAlpha);
  return v > T(0) ? lambda * v : lambda * alpha * std::expm1(v);
}

template <class T>
T selu_grad(T v) {
  const T lambda = static_cast<T>(kSeluLambda), alpha = static_cast<T>(kSeluAlpha);
  return v > T(0) ? lambda : lambda * alpha * std::exp(v);
}

template <class T>
Tensor<T> selu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = selu(x[i]);
  check_finite(y, "selu");
  return y;
}

/// Per-channel parametric ReLU. Works for [N,C,...] inputs; `slope` has C entries.
template <class T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope) {
  if (x.rank() < 2) detail::fail_dim("prelu", "rank", "input needs a channel axis");
  const std::size_t C = x.dim(1);
  if (slope.numel() != C)
    detail::fail_dim("prelu", "channels", "slope has " + std::to_string(slope.numel()) +
                                              " entries for " + std::to_string(C) + " channels");
  const std::size_t inner = x.numel() / (x.dim(0) * C);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T a = slope[(i / inner) % C];
    y[i] = x[i] > T(0) ? x[i] : a * x[i];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dense, concat, softmax, loss

/// y[N,K] = x[N,F] * w[F,K] + b[K].
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "dense");
  require_rank(w, 2, "dense");
  if (x.dim(1) != w.dim(0))
    detail::fail_dim("dense", "features", "input has " + std::to_string(x.dim(1)) +
                                              " features, weight expects " + std::to_string(w.dim(0)));
  const std::size_t N = x.dim(0), F = x.dim(1), K = w.dim(1);
  detail::check_bias(b, K, "dense");
  Tensor<T> y({N, K});
  kernels::gemm<T>(N, K, F, x.data().data(), F, w.data().data(), K, y.data().data(), K, false);
  if (!b.empty())
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) y[n * K + k] += b[k];
  return y;
}

/// Concatenates along axis 1. All inputs must agree on every other axis.
template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs) {
  if (xs.empty()) detail::fail_dim("concat_channels", "inputs", "nothing to concatenate");
  const Shape& s0 = xs.front()->shape();
  if (s0.size() < 2) detail::fail_dim("concat_channels", "rank", "inputs need a channel axis");
  std::size_t channels = 0;
  for (const auto* t : xs) {
    if (t->rank() != s0.size()) detail::fail_dim("concat_channels", "rank", "rank mismatch");
    for (std::size_t a = 0; a < s0.size(); ++a)
      if (a != 1 && t->dim(a) != s0[a])
        detail::fail_dim("concat_channels", a == 0 ? "batch" : (a == 2 ? "height" : "width"),
                         "shape " + shape_str(t->shape()) + " does not match " + shape_str(s0));
    channels += t->dim(1);
  }
  Shape out = s0;
  out[1] = channels;
  Tensor<T> y(out);
  const std::size_t N = s0[0], inner = shape_numel(s0) / (s0[0] * s0[1]);
  std::size_t off = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (const auto* t : xs) {
      const std::size_t chunk = t->dim(1) * inner;
      std::copy_n(t->data().data() + n * chunk, chunk, y.data().data() + off);
      off += chunk;
    }
  return y;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  require_rank(x, 2, "softmax");
  const std::size_t N = x.dim(0), K = x.dim(1);
  if (K < 2) detail::fail_dim("softmax", "classes", "softmax needs at least 2 classes");
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x.data().data() + n * K;
    const T m = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - m));
    for (std::size_t k = 0; k < K; ++k)
      y[n * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - m)) / z);
  }
  return y;
}

inline void check_labels(std::span<const int> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n)
    throw ShapeError("batch", "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                  std::to_string(n) + " rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::invalid_argument("cross_entropy: invalid label " + std::to_string(labels[i]) +
                                  " at row " + std::to_string(i));
}

/// Mean of -log(probs[label]) with the log argument clamped at 1e-12.
template <class T>
T cross_entropy(const Tensor<T>& probs, std::span<const int> labels) {
  require_rank(probs, 2, "cross_entropy");
  const std::size_t N = probs.dim(0), K = probs.dim(1);
  check_labels(labels, N, K);
  double s = 0.0;
  for (std::size_t n = 0; n < N; ++n)
    s -= std::log(std::max(static_cast<double>(probs[n * K + labels[n]]), kLogClamp));
  return static_cast<T>(s / static_cast<double>(N));
}

}  // namespace ops
}  // namespace onconet
