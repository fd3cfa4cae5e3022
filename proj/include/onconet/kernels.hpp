#pragma once

// Raw CPU kernels: a register-blocked GEMM and im2col-based 2-d convolution
// (forward, input gradient, weight gradient). Everything here works on flat
// row-major buffers; shape validation lives in ops.hpp.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "onconet/runtime.hpp"
#include "onconet/tensor.hpp"

namespace onconet {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  std::size_t output_padding = 0;  // transposed convolution only
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t conv_transpose_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                             std::size_t pad, std::size_t out_pad) {
  return (in - 1) * stride + k + out_pad - 2 * pad;
}

namespace kernels {

namespace detail {

constexpr std::size_t kNR = 16;
constexpr std::size_t kKC = 256;
constexpr std::size_t kNC = 512;

// Eight-lane vector of T (GCC/Clang vector extension); lowered to whatever
// SIMD width the target provides.
template <class T>
using vec8 __attribute__((vector_size(8 * sizeof(T)))) = T;

template <class T, std::size_t MR>
inline void micro_kernel(std::size_t kc, const T* a, std::size_t lda, const T* bp, T* c,
                         std::size_t ldc, std::size_t ncols) {
  using V = vec8<T>;
  V acc[MR][2] = {};
  for (std::size_t p = 0; p < kc; ++p) {
    V b0, b1;
    __builtin_memcpy(&b0, bp + p * kNR, sizeof(V));
    __builtin_memcpy(&b1, bp + p * kNR + 8, sizeof(V));
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + p];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    T tmp[kNR];
    __builtin_memcpy(tmp, &acc[r][0], sizeof(V));
    __builtin_memcpy(tmp + 8, &acc[r][1], sizeof(V));
    for (std::size_t j = 0; j < ncols; ++j) c[r * ldc + j] += tmp[j];
  }
}

}  // namespace detail

/// C[M x N] (+)= A[M x K] * B[K x N]; row-major with leading dimensions.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
          std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
  using namespace detail;
  if (!accumulate)
    for (std::size_t i = 0; i < M; ++i) std::fill(C + i * ldc, C + i * ldc + N, T(0));
  if (M == 0 || N == 0 || K == 0) return;

  thread_local std::vector<T> packed;
  if (packed.size() < kKC * (kNC + kNR)) packed.resize(kKC * (kNC + kNR));
  for (std::size_t jc = 0; jc < N; jc += kNC) {
    const std::size_t nc = std::min(kNC, N - jc);
    const std::size_t panels = (nc + kNR - 1) / kNR;
    for (std::size_t pc = 0; pc < K; pc += kKC) {
      const std::size_t kc = std::min(kKC, K - pc);
      // Pack B[pc:pc+kc, jc:jc+nc] into column panels of width kNR, zero padded.
      for (std::size_t q = 0; q < panels; ++q) {
        T* dst = packed.data() + q * kc * kNR;
        const std::size_t j0 = jc + q * kNR;
        const std::size_t w = std::min(kNR, N - j0);
        for (std::size_t p = 0; p < kc; ++p) {
          const T* src = B + (pc + p) * ldb + j0;
          T* row = dst + p * kNR;
          std::size_t j = 0;
          for (; j < w; ++j) row[j] = src[j];
          for (; j < kNR; ++j) row[j] = T(0);
        }
      }
      for (std::size_t q = 0; q < panels; ++q) {
        const std::size_t j0 = jc + q * kNR;
        const std::size_t w = std::min(kNR, N - j0);
        const T* bp = packed.data() + q * kc * kNR;
        std::size_t i = 0;
        for (; i + 4 <= M; i += 4)
          micro_kernel<T, 4>(kc, A + i * lda + pc, lda, bp, C + i * ldc + j0, ldc, w);
        switch (M - i) {
          case 3: micro_kernel<T, 3>(kc, A + i * lda + pc, lda, bp, C + i * ldc + j0, ldc, w); break;
          case 2: micro_kernel<T, 2>(kc, A + i * lda + pc, lda, bp, C + i * ldc + j0, ldc, w); break;
          case 1: micro_kernel<T, 1>(kc, A + i * lda + pc, lda, bp, C + i * ldc + j0, ldc, w); break;
          default: break;
        }
      }
    }
  }
}

/// dst[cols x rows] = transpose(src[rows x cols]).
template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B)
    for (std::size_t j0 = 0; j0 < cols; j0 += B)
      for (std::size_t i = i0; i < std::min(rows, i0 + B); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + B); ++j) dst[j * rows + i] = src[i * cols + j];
}

/// Unfolds `channels` planes of H x W into [channels*kh*kw x oh*ow].
template <class T>
void im2col(const T* x, std::size_t channels, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            T* cols) {
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * H * W;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          T* out = row + y * ow;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            out[xo] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into the planes of x.
template <class T>
void col2im(const T* cols, std::size_t channels, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            T* x) {
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = x + c * H * W;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= h) continue;
          const T* in = row + y * ow;
          T* dst = plane + iy * w;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < w) dst[ix] += in[xo];
          }
        }
      }
    }
  }
}

/// Extents of a grouped 2-d convolution, input side and output side.
struct ConvDims {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t oh, ow;
  ConvGeometry geom;

  std::size_t cin_g() const { return cin / geom.groups; }
  std::size_t cout_g() const { return cout / geom.groups; }
  std::size_t patch() const { return cin_g() * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

/// y[n, cout, oh, ow] = conv(x, w) + bias. `bias` may be empty.
template <class T>
void conv2d_forward(const ConvDims& d, const T* x, const T* wt, std::span<const T> bias, T* y) {
  parallel_for(d.n, [&](std::size_t n) {
    std::vector<T> cols(d.patch() * d.pixels());
    for (std::size_t g = 0; g < d.geom.groups; ++g) {
      const T* xg = x + (n * d.cin + g * d.cin_g()) * d.h * d.w;
      im2col(xg, d.cin_g(), d.h, d.w, d.kh, d.kw, d.geom.stride, d.geom.padding, d.oh, d.ow, cols.data());
      T* yg = y + (n * d.cout + g * d.cout_g()) * d.pixels();
      gemm(d.cout_g(), d.pixels(), d.patch(), wt + g * d.cout_g() * d.patch(), d.patch(), cols.data(),
           d.pixels(), yg, d.pixels(), false);
      if (!bias.empty())
        for (std::size_t co = 0; co < d.cout_g(); ++co) {
          const T b = bias[g * d.cout_g() + co];
          T* row = yg + co * d.pixels();
          for (std::size_t p = 0; p < d.pixels(); ++p) row[p] += b;
        }
    }
  });
}

/// dx (+)= conv2d input-gradient of dy. This is also the transposed convolution.
template <class T>
void conv2d_backward_input(const ConvDims& d, const T* dy, const T* wt, T* dx, bool accumulate) {
  // Per-group transposed weights: [patch x cout_g].
  std::vector<T> wT(d.geom.groups * d.patch() * d.cout_g());
  for (std::size_t g = 0; g < d.geom.groups; ++g)
    transpose(d.cout_g(), d.patch(), wt + g * d.cout_g() * d.patch(), wT.data() + g * d.patch() * d.cout_g());
  parallel_for(d.n, [&](std::size_t n) {
    std::vector<T> cols(d.patch() * d.pixels());
    if (!accumulate) std::fill(dx + n * d.cin * d.h * d.w, dx + (n + 1) * d.cin * d.h * d.w, T(0));
    for (std::size_t g = 0; g < d.geom.groups; ++g) {
      const T* dyg = dy + (n * d.cout + g * d.cout_g()) * d.pixels();
      gemm(d.patch(), d.pixels(), d.cout_g(), wT.data() + g * d.patch() * d.cout_g(), d.cout_g(), dyg,
           d.pixels(), cols.data(), d.pixels(), false);
      T* dxg = dx + (n * d.cin + g * d.cin_g()) * d.h * d.w;
      col2im(cols.data(), d.cin_g(), d.h, d.w, d.kh, d.kw, d.geom.stride, d.geom.padding, d.oh, d.ow, dxg);
    }
  });
}

/// dw += sum_n dy[n] * im2col(x[n])^T and db += spatial sums of dy. Serial over
/// the batch so the reduction order is fixed. `db` may be empty.
template <class T>
void conv2d_backward_weight(const ConvDims& d, const T* dy, const T* x, T* dw, std::span<T> db) {
  std::vector<T> cols(d.patch() * d.pixels());
  std::vector<T> colsT(cols.size());
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t g = 0; g < d.geom.groups; ++g) {
      const T* xg = x + (n * d.cin + g * d.cin_g()) * d.h * d.w;
      im2col(xg, d.cin_g(), d.h, d.w, d.kh, d.kw, d.geom.stride, d.geom.padding, d.oh, d.ow, cols.data());
      transpose(d.patch(), d.pixels(), cols.data(), colsT.data());
      const T* dyg = dy + (n * d.cout + g * d.cout_g()) * d.pixels();
      gemm(d.cout_g(), d.patch(), d.pixels(), dyg, d.pixels(), colsT.data(), d.patch(),
           dw + g * d.cout_g() * d.patch(), d.patch(), true);
    }
    if (!db.empty())
      for (std::size_t co = 0; co < d.cout; ++co) {
        const T* row = dy + (n * d.cout + co) * d.pixels();
        double s = 0.0;
        for (std::size_t p = 0; p < d.pixels(); ++p) s += row[p];
        db[co] += static_cast<T>(s);
      }
  }
}

}  // namespace kernels
}  // namespace onconet
