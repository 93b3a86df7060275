#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "atddpm/error.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm {

/// Reported PSNR for identical images.
inline constexpr double kPsnrCap = 99.0;

inline double mean_squared_error(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mse", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Peak signal-to-noise ratio in dB for images in [0,1].
inline double psnr(const Tensor& a, const Tensor& b) {
  const double m = mean_squared_error(a, b);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

/// Structural similarity of two [H,W] images in [0,1]: 11x11 Gaussian window
/// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, averaged over the positions where
/// the window fits entirely inside the image.
inline double ssim(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("ssim", a, b);
  if (a.rank() != 2) throw ShapeError("ssim: expected single-channel [H,W] images, got " + to_string(a.shape()));
  constexpr std::size_t kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto h = a.dim(0), w = a.dim(1);
  if (h < kWin || w < kWin) {
    throw ContractError("ssim: image " + to_string(a.shape()) + " is smaller than the 11x11 window");
  }

  std::vector<double> g(kWin);
  double gs = 0.0;
  for (std::size_t i = 0; i < kWin; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    gs += g[i];
  }
  for (double& v : g) v /= gs;

  double total = 0.0;
  for (std::size_t y = 0; y + kWin <= h; ++y) {
    for (std::size_t x = 0; x + kWin <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t j = 0; j < kWin; ++j) {
        for (std::size_t i = 0; i < kWin; ++i) {
          const double wt = g[j] * g[i];
          const double va = a[(y + j) * w + x + i];
          const double vb = b[(y + j) * w + x + i];
          ma += wt * va;
          mb += wt * vb;
          saa += wt * va * va;
          sbb += wt * vb * vb;
          sab += wt * va * vb;
        }
      }
      const double var_a = saa - ma * ma;
      const double var_b = sbb - mb * mb;
      const double cov = sab - ma * mb;
      total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
  }
  return total / static_cast<double>((h - kWin + 1) * (w - kWin + 1));
}

struct MetricRow {
  std::string item_id;
  double psnr = 0;
  double ssim = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  std::size_t count() const { return rows.size(); }

  double mean_psnr() const { return mean_of(&MetricRow::psnr); }
  double mean_ssim() const { return mean_of(&MetricRow::ssim); }
  double median_psnr() const { return median_of(&MetricRow::psnr); }
  double median_ssim() const { return median_of(&MetricRow::ssim); }

 private:
  double mean_of(double MetricRow::*field) const {
    if (rows.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : rows) s += r.*field;
    return s / static_cast<double>(rows.size());
  }

  double median_of(double MetricRow::*field) const {
    if (rows.empty()) return 0.0;
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.*field);
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

}  // namespace atddpm
