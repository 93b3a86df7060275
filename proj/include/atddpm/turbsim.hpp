#pragma once

// Turbulence-style degradation of [H,W] images in [0,1]:
//   strong(I) = clip(warp(blur(I, sigma), field) + noise_std * n)
// plus a weak, resolution-loss degradation used by the teacher stage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "atddpm/error.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm {

struct DegradationConfig {
  double elastic_sigma = 4.0;  // smoothing width of the displacement field (px)
  double elastic_alpha = 2.0;  // displacement amplitude (px)
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.5;
  double noise_std = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(elastic_sigma >= 0.0)) throw ContractError("degradation: elastic_sigma must be >= 0");
    if (!(elastic_alpha >= 0.0)) throw ContractError("degradation: elastic_alpha must be >= 0");
    if (!(blur_sigma_min >= 0.0 && blur_sigma_min <= blur_sigma_max)) {
      throw ContractError("degradation: need 0 <= blur_sigma_min <= blur_sigma_max");
    }
    if (!(noise_std >= 0.0)) throw ContractError("degradation: noise_std must be >= 0");
  }
};

struct DisplacementField {
  Tensor dx;  // [H,W], pixels along x (columns)
  Tensor dy;  // [H,W], pixels along y (rows)
};

namespace detail {

inline void require_image(const char* op, const Tensor& img) {
  if (img.rank() != 2) throw ShapeError(std::string(op) + ": expected an [H,W] image, got " + to_string(img.shape()));
}

}  // namespace detail

/// Normalized 1-D Gaussian taps over [-ceil(3 sigma), ceil(3 sigma)].
/// sigma = 0 gives the unit impulse.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[i + radius] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur with edge-clamped borders.
inline Tensor blur(const Tensor& img, double sigma) {
  detail::require_image("blur", img);
  if (sigma < 0.0) throw ContractError("blur: sigma must be >= 0");
  if (sigma == 0.0) return img.detach();
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(img.dim(0)), w = static_cast<std::ptrdiff_t>(img.dim(1));
  const auto clamp = [](std::ptrdiff_t v, std::ptrdiff_t hi) { return std::clamp<std::ptrdiff_t>(v, 0, hi - 1); };
  std::vector<double> tmp(img.size()), out(img.size());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) acc += kernel[i + radius] * img[y * w + clamp(x + i, w)];
      tmp[y * w + x] = acc;
    }
  }
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[clamp(y + i, h) * w + x];
      out[y * w + x] = acc;
    }
  }
  return Tensor(img.shape(), std::move(out));
}

/// Random elastic field: per-pixel U(-1,1) smoothed by a normalized Gaussian
/// of width elastic_sigma, scaled by elastic_alpha. |field| <= alpha.
inline DisplacementField make_field(std::size_t height, std::size_t width, const DegradationConfig& cfg, Rng& rng) {
  cfg.validate();
  const Shape shape{height, width};
  if (cfg.elastic_alpha == 0.0) return {Tensor::zeros(shape), Tensor::zeros(shape)};
  const Tensor ux = uniform(rng, shape, -1.0, 1.0);
  const Tensor uy = uniform(rng, shape, -1.0, 1.0);
  return {scale(blur(ux, cfg.elastic_sigma), cfg.elastic_alpha), scale(blur(uy, cfg.elastic_sigma), cfg.elastic_alpha)};
}

/// Bilinear resampling of img at (x + dx, y + dy) with coordinates clamped
/// to the image.
inline Tensor warp(const Tensor& img, const DisplacementField& field) {
  detail::require_image("warp", img);
  if (field.dx.shape() != img.shape() || field.dy.shape() != img.shape()) {
    throw ShapeError("warp: field " + to_string(field.dx.shape()) + " does not match image " + to_string(img.shape()));
  }
  const auto h = img.dim(0), w = img.dim(1);
  std::vector<double> out(img.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto i = y * w + x;
      const double sx = std::clamp(static_cast<double>(x) + field.dx[i], 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(static_cast<double>(y) + field.dy[i], 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const auto y0 = static_cast<std::size_t>(std::floor(sy));
      const auto x1 = std::min(x0 + 1, w - 1);
      const auto y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0);
      const double fy = sy - static_cast<double>(y0);
      const double top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
      const double bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
      out[i] = top * (1.0 - fy) + bottom * fy;
    }
  }
  return Tensor(img.shape(), std::move(out));
}

/// Blur with a random width, warp by a random elastic field, add white noise,
/// clip to [0,1]. Draw order from rng: blur width, field, noise.
inline Tensor degrade_strong(const Tensor& img, const DegradationConfig& cfg, Rng& rng) {
  detail::require_image("degrade_strong", img);
  cfg.validate();
  const double sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
  const Tensor blurred = blur(img, sigma);
  const DisplacementField field = make_field(img.dim(0), img.dim(1), cfg, rng);
  const Tensor warped = warp(blurred, field);
  std::vector<double> out(warped.data().begin(), warped.data().end());
  if (cfg.noise_std > 0.0) {
    for (double& v : out) v += cfg.noise_std * rng.normal();
  }
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return Tensor(img.shape(), std::move(out));
}

namespace detail {

// Keys cubic convolution kernel, a = -0.5.
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

}  // namespace detail

/// Box-downsample by `factor`, then bicubic upsample back to the input size
/// (pixel-centre aligned, clamped borders), clipped to [0,1].
inline Tensor degrade_weak(const Tensor& img, std::size_t factor) {
  detail::require_image("degrade_weak", img);
  const auto h = img.dim(0), w = img.dim(1);
  if (factor < 1 || h % factor || w % factor) {
    throw ContractError("degrade_weak: factor " + std::to_string(factor) + " does not divide image " +
                        to_string(img.shape()));
  }
  if (factor == 1) return img.detach();
  const auto sh = h / factor, sw = w / factor;
  std::vector<double> small(sh * sw, 0.0);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < sh; ++y) {
    for (std::size_t x = 0; x < sw; ++x) {
      double acc = 0.0;
      for (std::size_t j = 0; j < factor; ++j) {
        for (std::size_t i = 0; i < factor; ++i) acc += img[(y * factor + j) * w + x * factor + i];
      }
      small[y * sw + x] = acc * inv;
    }
  }
  const auto taps = [factor](std::size_t o, std::size_t n, std::array<std::ptrdiff_t, 4>& idx, std::array<double, 4>& wt) {
    const double u = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    const auto base = static_cast<std::ptrdiff_t>(std::floor(u));
    const double f = u - static_cast<double>(base);
    for (int k = 0; k < 4; ++k) {
      idx[k] = std::clamp<std::ptrdiff_t>(base - 1 + k, 0, static_cast<std::ptrdiff_t>(n) - 1);
      wt[k] = detail::cubic_weight(f - static_cast<double>(k - 1));
    }
  };
  std::vector<double> out(h * w);
  std::array<std::ptrdiff_t, 4> ix{}, iy{};
  std::array<double, 4> wx{}, wy{};
  for (std::size_t y = 0; y < h; ++y) {
    taps(y, sh, iy, wy);
    for (std::size_t x = 0; x < w; ++x) {
      taps(x, sw, ix, wx);
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) {
        double row = 0.0;
        for (int i = 0; i < 4; ++i) row += wx[i] * small[iy[j] * sw + ix[i]];
        acc += wy[j] * row;
      }
      out[y * w + x] = std::clamp(acc, 0.0, 1.0);
    }
  }
  return Tensor(img.shape(), std::move(out));
}

}  // namespace atddpm
