#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "voxstreams/tensor.hpp"

// Images are rank-3 tensors shaped (H, W, 3), RGB interleaved, values
// nominally in [0,1]. Kept as plain tensors so the distillation path can
// differentiate straight through image-space operations.
namespace voxstreams::img {

inline void require_image(const Tensor& t, const char* where) {
  if (t.rank() != 3 || t.shape[2] != 3 || t.shape[0] < 1 || t.shape[1] < 1) {
    throw ValidationError(std::string(where) + ": expected (H,W,3) image, got " + t.shape_str());
  }
}

inline Tensor make(std::int64_t h, std::int64_t w, double fill = 0.0) {
  return Tensor::full({h, w, 3}, fill);
}

struct BilinearTap {
  std::int64_t lo;
  std::int64_t hi;
  double w_hi;  // weight of hi sample, lo gets 1 - w_hi
};

// Sample positions for align_corners=false: src = (dst + 0.5) * scale - 0.5,
// clamped to the valid range.
inline BilinearTap bilinear_tap(std::int64_t dst, std::int64_t src_size, double scale) {
  double pos = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  pos = std::clamp(pos, 0.0, static_cast<double>(src_size - 1));
  const auto lo = static_cast<std::int64_t>(std::floor(pos));
  const std::int64_t hi = std::min(lo + 1, src_size - 1);
  return {lo, hi, pos - static_cast<double>(lo)};
}

inline Tensor resize_bilinear(const Tensor& src, std::int64_t out_h, std::int64_t out_w) {
  require_image(src, "resize_bilinear");
  check(out_h >= 1 && out_w >= 1, "resize_bilinear: output dims must be >= 1");
  const std::int64_t in_h = src.shape[0], in_w = src.shape[1];
  if (in_h == out_h && in_w == out_w) return src;
  Tensor dst({out_h, out_w, 3});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  std::vector<BilinearTap> xt(static_cast<std::size_t>(out_w));
  for (std::int64_t x = 0; x < out_w; ++x) xt[static_cast<std::size_t>(x)] = bilinear_tap(x, in_w, sx);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const BilinearTap ty = bilinear_tap(y, in_h, sy);
    for (std::int64_t x = 0; x < out_w; ++x) {
      const BilinearTap& tx = xt[static_cast<std::size_t>(x)];
      for (std::int64_t c = 0; c < 3; ++c) {
        const double top = (1.0 - tx.w_hi) * src.at3(ty.lo, tx.lo, c) + tx.w_hi * src.at3(ty.lo, tx.hi, c);
        const double bot = (1.0 - tx.w_hi) * src.at3(ty.hi, tx.lo, c) + tx.w_hi * src.at3(ty.hi, tx.hi, c);
        dst.at3(y, x, c) = (1.0 - ty.w_hi) * top + ty.w_hi * bot;
      }
    }
  }
  return dst;
}

// Adjoint of resize_bilinear as a linear map: scatters output-space
// gradients back onto the input grid with the same taps and weights.
inline Tensor resize_bilinear_adjoint(const Tensor& grad_out, std::int64_t in_h, std::int64_t in_w) {
  require_image(grad_out, "resize_bilinear_adjoint");
  const std::int64_t out_h = grad_out.shape[0], out_w = grad_out.shape[1];
  if (in_h == out_h && in_w == out_w) return grad_out;
  Tensor grad_in({in_h, in_w, 3});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const BilinearTap ty = bilinear_tap(y, in_h, sy);
    for (std::int64_t x = 0; x < out_w; ++x) {
      const BilinearTap tx = bilinear_tap(x, in_w, sx);
      for (std::int64_t c = 0; c < 3; ++c) {
        const double g = grad_out.at3(y, x, c);
        grad_in.at3(ty.lo, tx.lo, c) += (1.0 - ty.w_hi) * (1.0 - tx.w_hi) * g;
        grad_in.at3(ty.lo, tx.hi, c) += (1.0 - ty.w_hi) * tx.w_hi * g;
        grad_in.at3(ty.hi, tx.lo, c) += ty.w_hi * (1.0 - tx.w_hi) * g;
        grad_in.at3(ty.hi, tx.hi, c) += ty.w_hi * tx.w_hi * g;
      }
    }
  }
  return grad_in;
}

// Rec.601 luma. Returns (H,W) matrix.
inline Tensor to_gray(const Tensor& image) {
  require_image(image, "to_gray");
  Tensor g({image.shape[0], image.shape[1]});
  for (std::int64_t y = 0; y < image.shape[0]; ++y) {
    for (std::int64_t x = 0; x < image.shape[1]; ++x) {
      g.at2(y, x) = 0.299 * image.at3(y, x, 0) + 0.587 * image.at3(y, x, 1) +
                    0.114 * image.at3(y, x, 2);
    }
  }
  return g;
}

inline Tensor clamp01(Tensor image) {
  for (auto& v : image.data) v = std::clamp(v, 0.0, 1.0);
  return image;
}

inline double mean_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_abs_diff");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
  return acc / static_cast<double>(a.data.size());
}

}  // namespace voxstreams::img
