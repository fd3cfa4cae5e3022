#pragma once

// Single-image preprocessing: slice selection, normalisation, bilinear
// resizing, masking and geometric augmentation. Images are [C, H, W] tensors,
// volumes are [D, H, W].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "onconet/tensor.hpp"

namespace onconet::image {

/// Index of the axial slice with the most mask pixels; lowest index wins ties.
inline std::size_t largest_mask_slice(const Tensor<float>& mask_volume) {
  require_rank(mask_volume, 3, "select_slice");
  const std::size_t D = mask_volume.dim(0), plane = mask_volume.dim(1) * mask_volume.dim(2);
  std::size_t best = 0, best_area = 0;
  for (std::size_t z = 0; z < D; ++z) {
    std::size_t area = 0;
    for (std::size_t p = 0; p < plane; ++p) area += mask_volume[z * plane + p] > 0.5f ? 1 : 0;
    if (area > best_area) {
      best_area = area;
      best = z;
    }
  }
  if (best_area == 0) throw std::invalid_argument("select_slice: mask is empty (no GTV)");
  return best;
}

/// Slice z of a [D, H, W] volume as a [1, H, W] image.
inline Tensor<float> extract_slice(const Tensor<float>& volume, std::size_t z) {
  require_rank(volume, 3, "extract_slice");
  if (z >= volume.dim(0)) throw std::out_of_range("extract_slice: slice index out of range");
  const std::size_t plane = volume.dim(1) * volume.dim(2);
  std::vector<float> d(volume.data().begin() + static_cast<std::ptrdiff_t>(z * plane),
                       volume.data().begin() + static_cast<std::ptrdiff_t>((z + 1) * plane));
  return Tensor<float>({1, volume.dim(1), volume.dim(2)}, std::move(d));
}

/// (x - mean) / max(std, 1e-6) with population statistics over the whole image.
inline Tensor<float> normalize(const Tensor<float>& img) {
  double mean = 0.0;
  for (float v : img.data()) mean += v;
  mean /= static_cast<double>(img.numel());
  double var = 0.0;
  for (float v : img.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(img.numel());
  const double sd = std::max(std::sqrt(var), 1e-6);
  Tensor<float> out(img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) out[i] = static_cast<float>((img[i] - mean) / sd);
  return out;
}

/// Bilinear upscaling with half-pixel centre alignment and edge clamping.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t H, std::size_t W) {
  require_rank(img, 3, "resize_bilinear");
  const std::size_t C = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (H < h || W < w)
    throw std::invalid_argument("resize_bilinear: downscaling " + shape_str(img.shape()) + " to " +
                                std::to_string(H) + "x" + std::to_string(W) + " is not supported");
  if (H == h && W == w) return img;
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t out, std::size_t in) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(H, h), tx = taps(W, w);
  Tensor<float> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    const float* src = img.data().data() + c * h * w;
    for (std::size_t y = 0; y < H; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < W; ++x) {
        const auto& b = tx[x];
        const double top = src[a.i0 * w + b.i0] * (1 - b.f) + src[a.i0 * w + b.i1] * b.f;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.f) + src[a.i1 * w + b.i1] * b.f;
        out[(c * H + y) * W + x] = static_cast<float>(top * (1 - a.f) + bot * a.f);
      }
    }
  }
  return out;
}

inline Tensor<float> apply_mask(const Tensor<float>& img, const Tensor<float>& mask) {
  if (img.shape() != mask.shape())
    throw ShapeError("shape", "apply_mask: image " + shape_str(img.shape()) + " vs mask " +
                                  shape_str(mask.shape()));
  Tensor<float> out(img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) out[i] = img[i] * mask[i];
  return out;
}

/// Channel-wise concatenation of [C, H, W] images.
inline Tensor<float> stack_channels(const Tensor<float>& a, const Tensor<float>& b) {
  require_rank(a, 3, "stack_channels");
  require_rank(b, 3, "stack_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeError("height", "stack_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> d(a.data().begin(), a.data().end());
  d.insert(d.end(), b.data().begin(), b.data().end());
  return Tensor<float>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(d));
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  bool flip = false;       // horizontal
  double shift_x = 0.0;    // pixels
  double shift_y = 0.0;    // pixels
  double angle_deg = 0.0;  // counter-clockwise about the image centre
};

struct AugmentRanges {
  double flip_probability = 0.5;
  double max_shift_fraction = 0.4;
  double max_rotation_deg = 20.0;
};

inline AugmentParams draw_augment(std::mt19937_64& rng, std::size_t side, const AugmentRanges& r = {}) {
  AugmentParams p;
  std::bernoulli_distribution flip(r.flip_probability);
  std::uniform_real_distribution<double> shift(-r.max_shift_fraction, r.max_shift_fraction);
  std::uniform_real_distribution<double> angle(-r.max_rotation_deg, r.max_rotation_deg);
  p.flip = flip(rng);
  p.shift_x = shift(rng) * static_cast<double>(side);
  p.shift_y = shift(rng) * static_cast<double>(side);
  p.angle_deg = angle(rng);
  return p;
}

/// Applies flip, then rotation about the centre, then shift; the same
/// transform for every channel. Bilinear resampling, zero fill.
inline Tensor<float> apply_augment(const Tensor<float>& img, const AugmentParams& p) {
  require_rank(img, 3, "augment");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H != W) throw ShapeError("width", "augment: image must be square, got " + shape_str(img.shape()));
  const double cx = (static_cast<double>(W) - 1.0) / 2.0, cy = (static_cast<double>(H) - 1.0) / 2.0;
  const double rad = p.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const auto h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
  Tensor<float> out(img.shape(), 0.0f);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      // Inverse map: undo shift, undo rotation, undo flip.
      const double ux = static_cast<double>(x) - p.shift_x - cx;
      const double uy = static_cast<double>(y) - p.shift_y - cy;
      double sx = cs * ux + sn * uy + cx;
      const double sy = -sn * ux + cs * uy + cy;
      if (p.flip) sx = static_cast<double>(W) - 1.0 - sx;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      const double ax = sx - fx, ay = sy - fy;
      if (x0 < -1 || y0 < -1 || x0 >= w || y0 >= h) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const float* src = img.data().data() + c * H * W;
        auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
          return (yy < 0 || xx < 0 || yy >= h || xx >= w) ? 0.0 : src[yy * w + xx];
        };
        double v = 0.0;
        if (ay < 1.0) {
          if (ax < 1.0) v += (1 - ax) * (1 - ay) * at(y0, x0);
          if (ax > 0.0) v += ax * (1 - ay) * at(y0, x0 + 1);
        }
        if (ay > 0.0) {
          if (ax < 1.0) v += (1 - ax) * ay * at(y0 + 1, x0);
          if (ax > 0.0) v += ax * ay * at(y0 + 1, x0 + 1);
        }
        out[(c * H + y) * W + x] = static_cast<float>(v);
      }
    }
  return out;
}

/// Draws a transform from `seed` and applies it.
inline Tensor<float> augment(const Tensor<float>& img, std::uint64_t seed, const AugmentRanges& r = {}) {
  require_rank(img, 3, "augment");
  std::mt19937_64 rng(seed);
  return apply_augment(img, draw_augment(rng, img.dim(2), r));
}

}  // namespace onconet::image
