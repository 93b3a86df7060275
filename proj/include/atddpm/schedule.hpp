#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>
#include <vector>

#include "atddpm/error.hpp"

namespace atddpm {

/// Variance schedule over training steps t = 1..T. All accessors take the
/// 1-based step index.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// Builds from explicit betas (t = 1..T in order).
  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw ContractError("schedule: at least one step is required");
    alpha_.resize(beta_.size());
    alpha_bar_.resize(beta_.size());
    double running = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] >= 0.0 && beta_[i] < 1.0)) {
        throw ContractError("schedule: beta_" + std::to_string(i + 1) + " = " + std::to_string(beta_[i]) +
                            " outside [0, 1)");
      }
      alpha_[i] = 1.0 - beta_[i];
      running *= alpha_[i];
      alpha_bar_[i] = running;
    }
  }

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_[index(t)]; }
  double alpha(std::size_t t) const { return alpha_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bar_[index(t)]; }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::size_t index(std::size_t t) const {
    if (t < 1 || t > beta_.size()) {
      throw ContractError("schedule: step " + std::to_string(t) + " outside [1, " +
                          std::to_string(beta_.size()) + "]");
    }
    return t - 1;
  }

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

/// Linear betas from beta_start to beta_end, both endpoints included.
inline NoiseSchedule linear_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ContractError("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ContractError("linear_schedule: need 0 < beta_start <= beta_end < 1, got " +
                        std::to_string(beta_start) + ", " + std::to_string(beta_end));
  }
  std::vector<double> betas(steps);
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    for (std::size_t i = 0; i < steps; ++i) {
      betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
    }
  }
  return NoiseSchedule(std::move(betas));
}

/// A K-step subsequence t_1 < ... < t_K of a training schedule with the
/// effective per-step variances implied by the alpha-bar ratios. Accessors
/// take the 1-based respaced index k.
class RespacedSchedule {
 public:
  RespacedSchedule() = default;

  RespacedSchedule(const NoiseSchedule& base, std::vector<std::size_t> steps) : steps_(std::move(steps)) {
    if (steps_.empty()) throw ContractError("respace: empty step list");
    double previous = 1.0;
    std::size_t last = 0;
    for (auto t : steps_) {
      if (t <= last) throw ContractError("respace: steps must be strictly increasing");
      last = t;
      const double ab = base.alpha_bar(t);
      alpha_bar_.push_back(ab);
      beta_.push_back(1.0 - ab / previous);
      previous = ab;
    }
  }

  std::size_t steps() const { return steps_.size(); }
  /// Training-schedule step t_k that respaced step k stands for.
  std::size_t timestep(std::size_t k) const { return steps_[index(k)]; }
  double beta(std::size_t k) const { return beta_[index(k)]; }
  double alpha(std::size_t k) const { return 1.0 - beta_[index(k)]; }
  double alpha_bar(std::size_t k) const { return alpha_bar_[index(k)]; }

  const std::vector<std::size_t>& timesteps() const { return steps_; }

 private:
  std::size_t index(std::size_t k) const {
    if (k < 1 || k > steps_.size()) {
      throw ContractError("respaced schedule: step " + std::to_string(k) + " outside [1, " +
                          std::to_string(steps_.size()) + "]");
    }
    return k - 1;
  }

  std::vector<std::size_t> steps_;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// K evenly spaced steps t_k = round(k T / K); the last one is always T.
inline RespacedSchedule respace(const NoiseSchedule& base, std::size_t count) {
  const auto total = base.steps();
  if (count < 1 || count > total) {
    throw ContractError("respace: K = " + std::to_string(count) + " outside [1, " + std::to_string(total) + "]");
  }
  std::vector<std::size_t> steps(count);
  for (std::size_t k = 1; k <= count; ++k) {
    steps[k - 1] = static_cast<std::size_t>(std::llround(static_cast<double>(k * total) / static_cast<double>(count)));
  }
  return RespacedSchedule(base, std::move(steps));
}

/// Anything with 1-based alpha_bar lookups over `steps()` entries.
template <class S>
concept AlphaBarSchedule = requires(const S& s, std::size_t t) {
  { s.steps() } -> std::convertible_to<std::size_t>;
  { s.alpha_bar(t) } -> std::convertible_to<double>;
};

}  // namespace atddpm
