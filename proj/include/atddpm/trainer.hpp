#pragma once

// Losses, optimizer, teacher EMA, and the staged training loop.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atddpm/denoiser.hpp"
#include "atddpm/diffusion.hpp"
#include "atddpm/error.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/schedule.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm {

enum class Stage {
  Unconditional,  // clean images only, zero condition
  WeakCond,       // conditioned on the weak (resampled) degradation
  StrongDistill,  // strong degradation, distilled from an EMA teacher
  StrongDirect,   // strong degradation, plain objective (ablation baseline)
};

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Unconditional: return "uncond";
    case Stage::WeakCond: return "weak";
    case Stage::StrongDistill: return "strong";
    case Stage::StrongDirect: return "direct";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "uncond") return Stage::Unconditional;
  if (s == "weak") return Stage::WeakCond;
  if (s == "strong") return Stage::StrongDistill;
  if (s == "direct") return Stage::StrongDirect;
  throw UsageError("unknown stage '" + s + "' (expected uncond, weak, strong or direct)");
}

struct TrainConfig {
  Stage stage = Stage::WeakCond;
  double gamma = 0.01;    // distillation weight
  double gamma1 = 0.9909;  // teacher EMA rate
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t checkpoint_every = 0;

  void validate() const {
    if (!(gamma >= 0.0)) throw ContractError("train config: gamma must be >= 0");
    if (!(gamma1 >= 0.0 && gamma1 <= 1.0)) throw ContractError("train config: gamma1 must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw ContractError("train config: learning_rate must be > 0");
    if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  }

  NoiseSchedule schedule() const { return linear_schedule(diffusion_steps, beta_start, beta_end); }
};

// ---------------------------------------------------------------------------
// Losses

/// Noise-regression objective: mean squared error between eps and the
/// prediction at q_sample(y0, t, eps). Pass zeros as x for the unconditional
/// model.
template <EpsModel M, AlphaBarSchedule S>
Tensor loss_simple(M& model, const Tensor& y0, const Tensor& x, std::span<const std::size_t> steps,
                   const Tensor& eps, const S& s) {
  const Tensor y_t = q_sample(y0, steps, eps, s);
  return mse(eps, model(y_t, x, steps));
}

template <AlphaBarSchedule S>
Tensor loss_simple(const DenoiserParams& params, const Tensor& y0, const Tensor& x,
                   std::span<const std::size_t> steps, const Tensor& eps, const S& s) {
  Denoiser model{&params};
  return loss_simple(model, y0, x, steps, eps, s);
}

struct DistillLoss {
  Tensor total;    // L_T + gamma * L_S, differentiable w.r.t. the student
  double l_t = 0;  // student noise regression on the strong input
  double l_s = 0;  // teacher/student agreement
};

/// Distillation objective. Both branches see the same y_t; the teacher sees
/// the weak input, the student the strong one. The teacher branch is
/// evaluated without graph recording, so its parameters never get gradients.
template <EpsModel Student, EpsModel Teacher, AlphaBarSchedule S>
DistillLoss loss_final(Student& student, Teacher& teacher, const Tensor& y0, const Tensor& x_strong,
                       const Tensor& x_weak, std::span<const std::size_t> steps, const Tensor& eps, const S& s,
                       double gamma) {
  const Tensor y_t = q_sample(y0, steps, eps, s);
  const Tensor pred = student(y_t, x_strong, steps);
  Tensor target;
  {
    NoGradGuard no_grad;
    target = teacher(y_t, x_weak, steps).detach();
  }
  const Tensor l_t = mse(eps, pred);
  const Tensor l_s = mse(target, pred);
  DistillLoss out;
  out.total = add(l_t, scale(l_s, gamma));
  out.l_t = l_t.item();
  out.l_s = l_s.item();
  return out;
}

template <AlphaBarSchedule S>
DistillLoss loss_final(const DenoiserParams& student, const DenoiserParams& teacher, const Tensor& y0,
                       const Tensor& x_strong, const Tensor& x_weak, std::span<const std::size_t> steps,
                       const Tensor& eps, const S& s, double gamma) {
  Denoiser st{&student};
  Denoiser te{&teacher};
  return loss_final(st, te, y0, x_strong, x_weak, steps, eps, s, gamma);
}

// ---------------------------------------------------------------------------
// EMA teacher

/// teacher' = gamma1 * teacher + (1 - gamma1) * student, elementwise.
inline void ema_update_inplace(DenoiserParams& teacher, const DenoiserParams& student, double gamma1) {
  if (!teacher.combinable_with(student)) throw ContractError("ema_update: teacher and student descriptors differ");
  for (std::size_t i = 0; i < teacher.tensors().size(); ++i) {
    auto dst = teacher.at(i).mutable_data();
    const auto src = student.at(i).data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = gamma1 * dst[j] + (1.0 - gamma1) * src[j];
  }
}

inline DenoiserParams ema_update(const DenoiserParams& teacher, const DenoiserParams& student, double gamma1) {
  DenoiserParams out = teacher.clone();
  ema_update_inplace(out, student, gamma1);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  bool matches(std::span<Tensor* const> params) const {
    if (m.size() != params.size() || v.size() != params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m[i].size() != params[i]->size() || v[i].size() != params[i]->size()) return false;
    }
    return true;
  }
};

/// One bias-corrected Adam update of every tensor in `params` from its grad
/// (a missing grad counts as zero). Non-finite gradients abort the step before
/// anything is modified.
inline void adam_step(std::span<Tensor* const> params, AdamState& state, const AdamConfig& cfg) {
  for (const Tensor* p : params) {
    if (p->has_grad() && !all_finite(p->grad())) {
      throw NumericError("optimizer: non-finite gradient, step aborted");
    }
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (!state.matches(params)) throw ContractError("optimizer: moment buffers do not match the parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] -= cfg.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training state and loop

struct LossRecord {
  std::size_t step = 0;
  double l_t = 0;
  double l_s = 0;
  double l_final = 0;
};

struct TrainState {
  Stage stage = Stage::WeakCond;
  DenoiserParams student;
  std::optional<DenoiserParams> teacher;
  AdamState optimizer;
  std::size_t step = 0;  // optimizer steps taken in this stage
  std::vector<LossRecord> history;
};

inline std::vector<Tensor*> parameter_pointers(DenoiserParams& p) {
  std::vector<Tensor*> out;
  for (auto& t : p.tensors()) out.push_back(&t.value);
  return out;
}

/// Applies one optimizer update to the student from its accumulated grads.
inline void optimizer_step(TrainState& state, const TrainConfig& cfg) {
  const auto params = parameter_pointers(state.student);
  adam_step(params, state.optimizer, {cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
  ++state.step;
}

/// Clean / weak / strong images in [0, 1], row-major image_size^2 each. The
/// weak and strong lists may be empty when the stage does not need them.
struct TripletDataset {
  std::size_t image_size = 0;
  std::vector<std::vector<double>> clean;
  std::vector<std::vector<double>> weak;
  std::vector<std::vector<double>> strong;

  std::size_t size() const { return clean.size(); }
};

/// Stacks the selected images into [N,1,S,S], mapped from [0,1] to [-1,1].
inline Tensor stack_images(const std::vector<std::vector<double>>& images, std::span<const std::size_t> indices,
                           std::size_t image_size) {
  const auto px = image_size * image_size;
  std::vector<double> v(indices.size() * px);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = images.at(indices[i]);
    if (img.size() != px) throw ShapeError("stack_images: image has " + std::to_string(img.size()) + " pixels");
    for (std::size_t j = 0; j < px; ++j) v[i * px + j] = 2.0 * img[j] - 1.0;
  }
  return Tensor({indices.size(), 1, image_size, image_size}, std::move(v));
}

struct StageInit {
  DenoiserDescriptor descriptor;            // used when `params` is empty
  std::optional<DenoiserParams> params;     // warm start for the student
  std::optional<AdamState> optimizer;       // carried moments, if any
  std::optional<DenoiserParams> teacher;    // required for StrongDistill
};

using CheckpointHook = std::function<void(const TrainState&)>;

/// Runs `cfg.steps` optimizer steps of the configured stage. In StrongDistill
/// the teacher is updated by EMA after every step.
inline TrainState train_stage(const TrainConfig& cfg, const TripletDataset& data, StageInit init,
                              const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  const bool needs_weak = cfg.stage == Stage::WeakCond || cfg.stage == Stage::StrongDistill;
  const bool needs_strong = cfg.stage == Stage::StrongDistill || cfg.stage == Stage::StrongDirect;
  if (cfg.steps > 0 && data.size() == 0) throw ContractError("train_stage: empty dataset");
  if ((needs_weak && data.weak.size() != data.size()) || (needs_strong && data.strong.size() != data.size())) {
    throw ContractError("train_stage: dataset lacks the images stage '" + to_string(cfg.stage) + "' trains on");
  }

  TrainState state;
  state.stage = cfg.stage;
  state.student = init.params ? std::move(*init.params) : init_params(init.descriptor, Rng(cfg.seed, 1));
  state.student.set_requires_grad(true);
  if (init.optimizer) state.optimizer = std::move(*init.optimizer);
  if (cfg.stage == Stage::StrongDistill) {
    if (!init.teacher) throw ContractError("train_stage: the strong stage needs a teacher model");
    if (!init.teacher->combinable_with(state.student)) {
      throw ContractError("train_stage: teacher and student descriptors differ");
    }
    state.teacher = std::move(*init.teacher);
    state.teacher->set_requires_grad(false);
  }
  const auto& desc = state.student.descriptor();
  if (cfg.steps > 0 && desc.image_size != data.image_size) {
    throw ContractError("train_stage: model image size " + std::to_string(desc.image_size) +
                        " differs from data image size " + std::to_string(data.image_size));
  }

  const NoiseSchedule schedule = cfg.schedule();
  const Rng base(cfg.seed, 2);
  const auto batch = cfg.batch_size;
  const Shape shape{batch, 1, data.image_size, data.image_size};
  std::vector<std::size_t> idx(batch), ts(batch);

  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Rng rng = base.split(s);
    for (std::size_t i = 0; i < batch; ++i) idx[i] = rng.below(data.size());
    for (std::size_t i = 0; i < batch; ++i) ts[i] = 1 + rng.below(schedule.steps());
    const Tensor eps = gauss(rng, shape);
    const Tensor y0 = stack_images(data.clean, idx, data.image_size);

    Denoiser student{&state.student};
    LossRecord rec;
    rec.step = state.step + 1;
    Tensor total;
    if (cfg.stage == Stage::StrongDistill) {
      Denoiser teacher{&*state.teacher};
      const Tensor xs = stack_images(data.strong, idx, data.image_size);
      const Tensor xw = stack_images(data.weak, idx, data.image_size);
      auto loss = loss_final(student, teacher, y0, xs, xw, ts, eps, schedule, cfg.gamma);
      total = loss.total;
      rec.l_t = loss.l_t;
      rec.l_s = loss.l_s;
    } else {
      const Tensor x = cfg.stage == Stage::Unconditional ? Tensor::zeros(shape)
                       : cfg.stage == Stage::WeakCond    ? stack_images(data.weak, idx, data.image_size)
                                                         : stack_images(data.strong, idx, data.image_size);
      total = loss_simple(student, y0, x, ts, eps, schedule);
      rec.l_t = total.item();
    }
    rec.l_final = total.item();
    if (!std::isfinite(rec.l_final)) throw NumericError("train_stage: non-finite loss at step " + std::to_string(rec.step));

    state.student.zero_grad();
    backward(total);
    total = Tensor();
    optimizer_step(state, cfg);
    if (state.teacher) ema_update_inplace(*state.teacher, state.student, cfg.gamma1);
    state.history.push_back(rec);

    if (on_checkpoint && cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0) on_checkpoint(state);
  }
  state.student.zero_grad();
  return state;
}

}  // namespace atddpm
