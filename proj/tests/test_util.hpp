#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "atddpm/denoiser.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm::testing {

/// Relative error with a floor on the denominator, so that entries whose
/// true gradient is ~0 are judged on absolute error instead.
inline double rel_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Central differences of `f` w.r.t. every element of `leaves`, compared with
/// the analytic gradient from one backward pass.
inline GradCheck check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor*>& leaves,
                                 double h = 1e-6) {
  for (Tensor* t : leaves) t->zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (Tensor* t : leaves) {
    analytic.emplace_back(t->size(), 0.0);
    if (t->has_grad()) std::copy(t->grad().begin(), t->grad().end(), analytic.back().begin());
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto w = leaves[l]->mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = f().item();
      w[i] = orig - h;
      const double down = f().item();
      w[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      out.max_rel = std::max(out.max_rel, rel_error(analytic[l][i], fd));
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(Rng& rng, const Shape& shape, bool requires_grad = false, double scale_by = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& e : v) e = scale_by * rng.normal();
  return Tensor(shape, std::move(v), requires_grad);
}

inline DenoiserDescriptor tiny_descriptor(std::size_t image_size = 4) {
  DenoiserDescriptor d;
  d.image_size = image_size;
  d.widths = {4, 4, 8, 4};
  d.groups = 2;
  d.time_dim = 8;
  return d;
}

/// The output convolution starts at zero, which would hide every upstream
/// gradient; give it random values for gradient tests.
inline void randomize_output(DenoiserParams& p, Rng& rng, double scale_by = 0.3) {
  for (auto& nt : p.tensors()) {
    if (nt.name.rfind("out.conv.", 0) == 0) {
      for (double& v : nt.value.mutable_data()) v = scale_by * rng.normal();
    }
  }
}

/// Fresh, empty scratch directory unique to one test.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("atddpm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace atddpm::testing
