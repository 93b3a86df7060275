#pragma once

// Procedural face-like test images: a bright ellipse on a darker background
// with two round eyes and a curved mouth.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "atddpm/rng.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm {

/// Geometry in pixels of a `size` x `size` canvas; intensities in [0,1].
struct FaceSpec {
  std::size_t size = 32;
  double cx = 16, cy = 16;        // face centre
  double ax = 10, ay = 12;        // face half-axes
  double eye_dx = 4, eye_dy = 3;  // eye offsets from the centre (eyes sit above it)
  double eye_r = 2;
  double mouth_dy = 5;  // mouth offset below the centre
  double mouth_w = 4;   // mouth half-width
  double mouth_curve = 1;  // positive bends the middle down (smile)
  double mouth_thickness = 1.2;
  double background = 0.2, face = 0.7, feature = 0.1;
  std::uint64_t seed = 0;

  bool fits_canvas() const {
    const auto s = static_cast<double>(size);
    const double rx = std::max(ax, 1.0), ry = std::max(ay, 1.0);
    const bool face_in = cx - rx >= 0 && cx + rx <= s && cy - ry >= 0 && cy + ry <= s;
    const bool eyes_in = cx - eye_dx - eye_r >= 0 && cx + eye_dx + eye_r <= s && cy - eye_dy - eye_r >= 0;
    const double lowest = cy + mouth_dy + std::max(mouth_curve, 0.0) + mouth_thickness / 2;
    const double highest = cy + mouth_dy + std::min(mouth_curve, 0.0) - mouth_thickness / 2;
    const bool mouth_in = cx - mouth_w >= 0 && cx + mouth_w <= s && lowest <= s && highest >= 0;
    const auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    return face_in && eyes_in && mouth_in && unit(background) && unit(face) && unit(feature);
  }
};

/// Draws every field from its documented range (fractions of the canvas or
/// of the face axes), in declaration order.
inline FaceSpec sample_spec(Rng& rng, std::size_t size = 32) {
  const auto s = static_cast<double>(size);
  FaceSpec f;
  f.size = size;
  f.seed = rng.seed();
  f.cx = s * rng.uniform(0.45, 0.55);
  f.cy = s * rng.uniform(0.45, 0.55);
  f.ax = s * rng.uniform(0.28, 0.38);
  f.ay = s * rng.uniform(0.34, 0.44);
  f.eye_dx = f.ax * rng.uniform(0.25, 0.45);
  f.eye_dy = f.ay * rng.uniform(0.15, 0.35);
  f.eye_r = s * rng.uniform(0.04, 0.08);
  f.mouth_dy = f.ay * rng.uniform(0.30, 0.50);
  f.mouth_w = f.ax * rng.uniform(0.25, 0.50);
  f.mouth_curve = s * rng.uniform(-0.08, 0.08);
  f.mouth_thickness = s * rng.uniform(0.03, 0.05);
  f.background = rng.uniform(0.05, 0.35);
  f.face = rng.uniform(0.55, 0.90);
  f.feature = rng.uniform(0.0, 0.30);
  return f;
}

/// Rasterizes the spec with 2x2 supersampling and box filtering.
inline Tensor render(const FaceSpec& f) {
  const auto n = f.size;
  const double rx = std::max(f.ax, 1.0), ry = std::max(f.ay, 1.0);
  const double ex[2] = {f.cx - f.eye_dx, f.cx + f.eye_dx};
  const double ey = f.cy - f.eye_dy;
  const auto shade = [&](double u, double v) {
    const double nx = (u - f.cx) / rx, ny = (v - f.cy) / ry;
    if (nx * nx + ny * ny > 1.0) return f.background;
    for (double e : ex) {
      if ((u - e) * (u - e) + (v - ey) * (v - ey) <= f.eye_r * f.eye_r) return f.feature;
    }
    if (f.mouth_w > 0.0 && std::abs(u - f.cx) <= f.mouth_w) {
      const double t = (u - f.cx) / f.mouth_w;
      const double centre = f.cy + f.mouth_dy + f.mouth_curve * (1.0 - t * t);
      if (std::abs(v - centre) <= f.mouth_thickness / 2) return f.feature;
    }
    return f.face;
  };
  std::vector<double> img(n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int j = 0; j < 2; ++j) {
        for (int i = 0; i < 2; ++i) {
          acc += shade(static_cast<double>(x) + 0.25 + 0.5 * i, static_cast<double>(y) + 0.25 + 0.5 * j);
        }
      }
      img[y * n + x] = 0.25 * acc;
    }
  }
  return Tensor({n, n}, std::move(img));
}

}  // namespace atddpm
