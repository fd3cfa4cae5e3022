#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library's kernels.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "onconet/models.hpp"
#include "onconet/tensor.hpp"

namespace oracle {

using onconet::Shape;
using onconet::Tensor;

template <class T>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

/// Direct nested-loop grouped cross-correlation with zero padding.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                             std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), Cg = k.dim(1), KH = k.dim(2), KW = k.dim(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  const std::size_t Og = O / groups;
  Tensor<double> y({N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double s = b.empty() ? 0.0 : b[o];
          const std::size_t g = o / Og;
          for (std::size_t c = 0; c < Cg; ++c)
            for (std::size_t a = 0; a < KH; ++a)
              for (std::size_t e = 0; e < KW; ++e) {
                const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + e) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                s += x.at(n, g * Cg + c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) *
                     k.at(o, c, a, e);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

/// Transposed convolution as scatter-accumulate: every input pixel stamps the
/// kernel into the (uncropped) output, which is then cropped by `pad`.
inline Tensor<double> conv2d_transpose(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                                       std::size_t stride, std::size_t pad, std::size_t out_pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(1), KH = k.dim(2), KW = k.dim(3);
  const std::size_t FH = (H - 1) * stride + KH + out_pad, FW = (W - 1) * stride + KW + out_pad;
  Tensor<double> full({N, O, FH, FW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t a = 0; a < KH; ++a)
              for (std::size_t e = 0; e < KW; ++e)
                full.at(n, o, i * stride + a, j * stride + e) += x.at(n, c, i, j) * k.at(c, o, a, e);
  Tensor<double> y({N, O, FH - 2 * pad, FW - 2 * pad});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j)
          y.at(n, o, i, j) = full.at(n, o, i + pad, j + pad) + (b.empty() ? 0.0 : b[o]);
  return y;
}

/// Fraction of (positive, negative) pairs ordered correctly; ties count one half.
inline double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return good / pairs;
}

// Parameter counting formula: weights + biases per layer, from the config alone.

inline std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k, std::size_t groups = 1) {
  return out * (in / groups) * k * k + out;
}

inline std::size_t dense_count(std::size_t in, std::size_t out) { return in * out + out; }

inline std::size_t fcn_count(const std::vector<std::size_t>& d) {
  std::size_t n = conv_count(1, d[0], 3) + conv_count(d[0], d[1], 3) + conv_count(d[1], d[2], 3) +
                  conv_count(d[2], d[3], 3);
  // Decoder: d3 -> d2, (d2+d2) -> d1, (d1+d1) -> d0, (d0+d0) -> d0, then 1x1 to one channel.
  n += conv_count(d[3], d[2], 3) + conv_count(2 * d[2], d[1], 3) + conv_count(2 * d[1], d[0], 3) +
       conv_count(2 * d[0], d[0], 3);
  return n + conv_count(d[0], 1, 1);
}

inline std::size_t aggres_count(const onconet::ModelConfig& c) {
  std::size_t n = conv_count(c.input_channels, c.stem_channels, 3);
  std::size_t in = c.stem_channels;
  for (std::size_t ch : c.stage_channels) {
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      const std::size_t g1 = std::min({c.cardinality, in, ch}), g2 = std::min(c.cardinality, ch);
      n += conv_count(in, ch, 3, g1) + conv_count(ch, ch, 3, g2);
      if (b == 0) n += conv_count(in, ch, 1);
      in = ch;
    }
  }
  return n + dense_count(in, 2);
}

inline std::size_t baseline_count(const onconet::ModelConfig& c) {
  const auto& f = c.baseline_filters;
  const std::size_t k = c.baseline_kernel;
  std::size_t side = c.input_size;
  for (int i = 0; i < 3; ++i) side /= c.baseline_pool;
  return conv_count(c.input_channels, f[0], k) + f[0] + conv_count(f[0], f[1], k) + f[1] +
         conv_count(f[1], f[2], k) + f[2] + dense_count(f[2] * side * side, c.baseline_hidden) +
         c.baseline_hidden + dense_count(c.baseline_hidden, 2);
}

}  // namespace oracle

namespace testing_support {

/// Fresh, empty directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("onconet-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Small AggResCNN config for fast tests.
inline onconet::ModelConfig small_model(std::size_t size = 16, std::size_t channels = 2) {
  onconet::ModelConfig c;
  c.input_size = size;
  c.input_channels = channels;
  c.stem_channels = 4;
  c.stage_channels = {8, 16};
  c.blocks_per_stage = 1;
  c.cardinality = 4;
  c.fcn_down_channels = {4, 8, 8, 8};
  return c;
}

}  // namespace testing_support
