#pragma once

// Forward noising, the conditional ancestral sampler, and truncated-start
// restoration. Images inside these routines live in [-1, 1].

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atddpm/error.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/schedule.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm {

template <class S>
concept BetaSchedule = AlphaBarSchedule<S> && requires(const S& s, std::size_t t) {
  { s.beta(t) } -> std::convertible_to<double>;
};

/// Conditional noise predictor: (y_t [N,C,H,W], x [N,C,H,W], per-item
/// training timesteps) -> predicted noise with the shape of y_t.
template <class M>
concept EpsModel = requires(M& m, const Tensor& y, const Tensor& x, std::span<const std::size_t> t) {
  { m(y, x, t) } -> std::convertible_to<Tensor>;
};

/// Closed-form marginal sample sqrt(abar_t) y0 + sqrt(1 - abar_t) eps.
template <AlphaBarSchedule S>
Tensor q_sample(const Tensor& y0, std::size_t t, const Tensor& eps, const S& s) {
  detail::require_same_shape("q_sample", y0, eps);
  const double ab = s.alpha_bar(t);
  return add(scale(y0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

/// Per-item variant: the leading axis of y0 indexes items, each noised to its
/// own step.
template <AlphaBarSchedule S>
Tensor q_sample(const Tensor& y0, std::span<const std::size_t> steps, const Tensor& eps, const S& s) {
  detail::require_same_shape("q_sample", y0, eps);
  if (y0.rank() == 0 || y0.dim(0) != steps.size()) {
    throw ShapeError("q_sample: " + std::to_string(steps.size()) + " steps for batch of shape " +
                     to_string(y0.shape()));
  }
  const auto per = y0.size() / steps.size();
  std::vector<double> out(y0.size());
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const double ab = s.alpha_bar(steps[i]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) out[j] = a * y0[j] + b * eps[j];
  }
  return Tensor(y0.shape(), std::move(out));
}

/// One Markov step of the forward chain: sqrt(1 - beta_t) y_prev + sqrt(beta_t) eps.
template <BetaSchedule S>
Tensor q_step(const Tensor& y_prev, std::size_t t, const Tensor& eps, const S& s) {
  detail::require_same_shape("q_step", y_prev, eps);
  const double b = s.beta(t);
  return add(scale(y_prev, std::sqrt(1.0 - b)), scale(eps, std::sqrt(b)));
}

/// Mean of the reverse transition at step k given the predicted noise.
template <BetaSchedule S>
Tensor posterior_mean(const Tensor& y_t, const Tensor& eps_hat, std::size_t k, const S& s) {
  detail::require_same_shape("posterior_mean", y_t, eps_hat);
  const double b = s.beta(k);
  const double coef = b / std::sqrt(1.0 - s.alpha_bar(k));
  const double inv = 1.0 / std::sqrt(1.0 - b);
  std::vector<double> out(y_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (y_t[i] - coef * eps_hat[i]);
  return Tensor(y_t.shape(), std::move(out));
}

/// Variance of the reverse transition. Beta is sigma_k^2 = beta'_k, the
/// default. Posterior is the forward-posterior variance
/// beta'_k (1 - abar_{k-1}) / (1 - abar_k), kept for comparison.
enum class ReverseVariance { Beta, Posterior };

/// y_{k-1} from y_k: posterior mean plus sigma_k z, with z = 0 at k = 1.
template <EpsModel M>
Tensor reverse_step(const Tensor& y_t, const Tensor& x, std::size_t k, M& model, Rng& rng,
                    const RespacedSchedule& s, ReverseVariance variance = ReverseVariance::Beta) {
  if (k < 1 || k > s.steps()) {
    throw ContractError("reverse_step: step " + std::to_string(k) + " outside [1, " + std::to_string(s.steps()) + "]");
  }
  NoGradGuard no_grad;
  const std::vector<std::size_t> t(y_t.rank() ? y_t.dim(0) : 1, s.timestep(k));
  const Tensor eps_hat = model(y_t, x, std::span<const std::size_t>(t));
  Tensor mu = posterior_mean(y_t, eps_hat, k, s);
  if (k == 1) return mu;
  double var = s.beta(k);
  if (variance == ReverseVariance::Posterior) var *= (1.0 - s.alpha_bar(k - 1)) / (1.0 - s.alpha_bar(k));
  const double sigma = std::sqrt(var);
  std::vector<double> out(mu.data().begin(), mu.data().end());
  for (double& v : out) v += sigma * rng.normal();
  return Tensor(mu.shape(), std::move(out));
}

struct SampleTrace {
  std::size_t nfe = 0;
  std::size_t start_step = 0;
  /// (k, y_k) pairs; k = 0 is the final output.
  std::vector<std::pair<std::size_t, Tensor>> snapshots;
};

struct RestoreOptions {
  /// Start from pure Gaussian noise instead of the noised input; needs t1 == K.
  bool noise_start = false;
  /// Keep every m-th intermediate state (0 disables).
  std::size_t snapshot_every = 0;
  ReverseVariance variance = ReverseVariance::Beta;
};

struct RestoreResult {
  Tensor image;
  SampleTrace trace;
};

/// Truncated-start restoration: y_{t1} = q_sample(x, t1, eps) on the respaced
/// grid, then reverse steps t1..1. Each reverse step draws its noise from
/// `rng.split(k)` and the starting noise from `rng.split(0)`, so runs with
/// different t1 share the per-step noise of the steps they have in common.
template <EpsModel M>
RestoreResult restore(const Tensor& x, M& model, const RespacedSchedule& s, std::size_t t1, const Rng& rng,
                      const RestoreOptions& options = {}) {
  if (t1 < 1 || t1 > s.steps()) {
    throw ContractError("restore: t1 = " + std::to_string(t1) + " outside [1, " + std::to_string(s.steps()) + "]");
  }
  if (options.noise_start && t1 != s.steps()) {
    throw ContractError("restore: noise start requires t1 == K (" + std::to_string(s.steps()) + ")");
  }
  NoGradGuard no_grad;
  Rng init_rng = rng.split(0);
  const Tensor eps = gauss(init_rng, x.shape());
  Tensor y = options.noise_start ? eps : q_sample(x, t1, eps, s);

  RestoreResult result;
  result.trace.start_step = t1;
  const auto keep = [&](std::size_t k) {
    if (options.snapshot_every && (k % options.snapshot_every == 0 || k == t1)) {
      result.trace.snapshots.emplace_back(k, y);
    }
  };
  keep(t1);
  std::size_t calls = 0;
  auto counted = [&](const Tensor& yt, const Tensor& cond, std::span<const std::size_t> t) {
    ++calls;
    return model(yt, cond, t);
  };
  for (std::size_t k = t1; k >= 1; --k) {
    Rng step_rng = rng.split(k);
    y = reverse_step(y, x, k, counted, step_rng, s, options.variance);
    keep(k - 1);
  }
  result.trace.nfe = calls;
  result.image = std::move(y);
  return result;
}

}  // namespace atddpm
