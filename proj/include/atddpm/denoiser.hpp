#pragma once

// Conditional noise-prediction network.
//
//   [y_t ; x] -> conv -> Res(w0) -> pool -> Res(w1) -> Res(w2) -> upsample
//             -> concat(skip from Res(w0)) -> Res(w3) -> norm/silu/conv -> eps
//
// Each residual block is norm/silu/conv, plus a per-channel projection of the
// timestep embedding, then norm/silu/conv, with a 1x1 skip projection when the
// width changes.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atddpm/error.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/tensor.hpp"

namespace atddpm {

struct DenoiserDescriptor {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::array<std::size_t, 4> widths{32, 64, 64, 32};
  std::size_t groups = 8;
  std::size_t time_dim = 64;
  std::size_t kernel = 3;

  bool operator==(const DenoiserDescriptor&) const = default;

  void validate() const {
    const auto fail = [](const std::string& why) { throw ContractError("denoiser descriptor: " + why); };
    if (image_size < 2 || image_size % 2) fail("image_size must be even and >= 2");
    if (channels < 1) fail("channels must be >= 1");
    if (kernel % 2 == 0) fail("kernel must be odd");
    if (time_dim < 2 || time_dim % 2) fail("time_dim must be even and >= 2");
    if (groups < 1) fail("groups must be >= 1");
    for (auto w : widths) {
      if (w == 0 || w % groups) fail("every width must be a positive multiple of groups");
    }
    if ((widths[2] + widths[0]) % groups) fail("skip concatenation width must be a multiple of groups");
  }

  struct Block {
    std::size_t in, out;
  };
  std::array<Block, 4> blocks() const {
    return {{{widths[0], widths[0]}, {widths[0], widths[1]}, {widths[1], widths[2]}, {widths[2] + widths[0], widths[3]}}};
  }
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Parameter set of one network. Tensor order is fixed by the descriptor.
class DenoiserParams {
 public:
  DenoiserParams() = default;
  DenoiserParams(DenoiserDescriptor descriptor, std::vector<NamedTensor> tensors)
      : descriptor_(descriptor), tensors_(std::move(tensors)) {}

  const DenoiserDescriptor& descriptor() const { return descriptor_; }
  std::vector<NamedTensor>& tensors() { return tensors_; }
  const std::vector<NamedTensor>& tensors() const { return tensors_; }

  const Tensor& at(std::size_t i) const { return tensors_.at(i).value; }
  Tensor& at(std::size_t i) { return tensors_.at(i).value; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.value.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& t : tensors_) t.value.set_requires_grad(on);
  }

  /// Independent copy of every value (no shared storage, no grads).
  DenoiserParams clone() const {
    std::vector<NamedTensor> copy;
    copy.reserve(tensors_.size());
    for (const auto& t : tensors_) copy.push_back({t.name, t.value.clone()});
    return DenoiserParams(descriptor_, std::move(copy));
  }

  bool combinable_with(const DenoiserParams& other) const {
    if (!(descriptor_ == other.descriptor_) || tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name != other.tensors_[i].name || tensors_[i].value.shape() != other.tensors_[i].value.shape()) {
        return false;
      }
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      if (!atddpm::all_finite(t.value.data())) return false;
    }
    return true;
  }

 private:
  DenoiserDescriptor descriptor_;
  std::vector<NamedTensor> tensors_;
};

enum class InitKind { FanIn, One, Zero };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
  std::size_t fan_in;
};

/// Names, shapes and initializers of every tensor the descriptor implies.
inline std::vector<ParamSpec> parameter_layout(const DenoiserDescriptor& d) {
  d.validate();
  const auto k = d.kernel, td = d.time_dim;
  std::vector<ParamSpec> specs;
  specs.push_back({"time.fc.w", {td, td}, InitKind::FanIn, td});
  specs.push_back({"time.fc.b", {td}, InitKind::Zero, 0});
  specs.push_back({"in.w", {d.widths[0], 2 * d.channels, k, k}, InitKind::FanIn, 2 * d.channels * k * k});
  specs.push_back({"in.b", {d.widths[0]}, InitKind::Zero, 0});
  const auto blocks = d.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto [cin, cout] = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    specs.push_back({p + "norm1.g", {cin}, InitKind::One, 0});
    specs.push_back({p + "norm1.b", {cin}, InitKind::Zero, 0});
    specs.push_back({p + "conv1.w", {cout, cin, k, k}, InitKind::FanIn, cin * k * k});
    specs.push_back({p + "conv1.b", {cout}, InitKind::Zero, 0});
    specs.push_back({p + "time.w", {cout, td}, InitKind::FanIn, td});
    specs.push_back({p + "time.b", {cout}, InitKind::Zero, 0});
    specs.push_back({p + "norm2.g", {cout}, InitKind::One, 0});
    specs.push_back({p + "norm2.b", {cout}, InitKind::Zero, 0});
    specs.push_back({p + "conv2.w", {cout, cout, k, k}, InitKind::FanIn, cout * k * k});
    specs.push_back({p + "conv2.b", {cout}, InitKind::Zero, 0});
    if (cin != cout) {
      specs.push_back({p + "skip.w", {cout, cin, 1, 1}, InitKind::FanIn, cin});
      specs.push_back({p + "skip.b", {cout}, InitKind::Zero, 0});
    }
  }
  specs.push_back({"out.norm.g", {d.widths[3]}, InitKind::One, 0});
  specs.push_back({"out.norm.b", {d.widths[3]}, InitKind::Zero, 0});
  // Zero output layer: the untrained network predicts eps = 0.
  specs.push_back({"out.conv.w", {d.channels, d.widths[3], k, k}, InitKind::Zero, 0});
  specs.push_back({"out.conv.b", {d.channels}, InitKind::Zero, 0});
  return specs;
}

/// Kernels uniform in +-1/sqrt(fan_in); norm scales one; everything else zero.
/// Each tensor draws from its own sub-stream of `rng`.
inline DenoiserParams init_params(const DenoiserDescriptor& d, const Rng& rng) {
  std::vector<NamedTensor> tensors;
  const auto specs = parameter_layout(d);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    std::vector<double> v(numel(s.shape), s.init == InitKind::One ? 1.0 : 0.0);
    if (s.init == InitKind::FanIn) {
      Rng local = rng.split(i);
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
      for (double& e : v) e = local.uniform(-bound, bound);
    }
    tensors.push_back({s.name, Tensor(s.shape, std::move(v), true)});
  }
  return DenoiserParams(d, std::move(tensors));
}

/// Sinusoidal features of integer timesteps: [sin(t f_i), cos(t f_i)] with
/// geometric frequencies f_i = 10000^(-i/half).
inline Tensor timestep_embedding(std::span<const std::size_t> steps, std::size_t dim) {
  const auto half = dim / 2;
  std::vector<double> v(steps.size() * dim);
  for (std::size_t n = 0; n < steps.size(); ++n) {
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = static_cast<double>(steps[n]) * f;
      v[n * dim + i] = std::sin(a);
      v[n * dim + half + i] = std::cos(a);
    }
  }
  return Tensor({steps.size(), dim}, std::move(v));
}

namespace detail {

class ParamCursor {
 public:
  explicit ParamCursor(const DenoiserParams& p) : p_(p) {}
  const Tensor& next() { return p_.at(i_++); }

 private:
  const DenoiserParams& p_;
  std::size_t i_ = 0;
};

inline Tensor residual_block(const Tensor& x, const Tensor& temb, std::size_t cin, std::size_t cout,
                             std::size_t groups, ParamCursor& p) {
  const Tensor& n1g = p.next();
  const Tensor& n1b = p.next();
  const Tensor& c1w = p.next();
  const Tensor& c1b = p.next();
  const Tensor& tw = p.next();
  const Tensor& tb = p.next();
  const Tensor& n2g = p.next();
  const Tensor& n2b = p.next();
  const Tensor& c2w = p.next();
  const Tensor& c2b = p.next();
  Tensor h = conv2d(silu(group_norm(x, groups, n1g, n1b)), c1w, c1b);
  h = add_channel(h, linear(temb, tw, tb));
  h = conv2d(silu(group_norm(h, groups, n2g, n2b)), c2w, c2b);
  if (cin == cout) return add(x, h);
  const Tensor& sw = p.next();
  const Tensor& sb = p.next();
  return add(conv2d(x, sw, sb), h);
}

}  // namespace detail

/// Predicted noise for y_t conditioned on x (concatenated along channels).
/// y_t, x: [N, channels, S, S]; one training timestep per item.
inline Tensor eps_predict(const DenoiserParams& params, const Tensor& y_t, const Tensor& x,
                          std::span<const std::size_t> steps) {
  const auto& d = params.descriptor();
  const Shape expected{y_t.rank() == 4 ? y_t.dim(0) : 0, d.channels, d.image_size, d.image_size};
  if (y_t.shape() != expected || x.shape() != expected) {
    throw ShapeError("eps_predict: noisy image " + to_string(y_t.shape()) + " and condition " +
                     to_string(x.shape()) + " must both be " + to_string(expected));
  }
  if (steps.size() != y_t.dim(0)) {
    throw ShapeError("eps_predict: " + std::to_string(steps.size()) + " timesteps for batch of " +
                     std::to_string(y_t.dim(0)));
  }
  detail::ParamCursor p(params);
  const Tensor& fcw = p.next();
  const Tensor& fcb = p.next();
  const Tensor temb = silu(linear(timestep_embedding(steps, d.time_dim), fcw, fcb));

  const Tensor& inw = p.next();
  const Tensor& inb = p.next();
  Tensor h = conv2d(concat_channels(y_t, x), inw, inb);

  const auto blocks = d.blocks();
  const Tensor skip = detail::residual_block(h, temb, blocks[0].in, blocks[0].out, d.groups, p);
  h = avg_pool2(skip);
  h = detail::residual_block(h, temb, blocks[1].in, blocks[1].out, d.groups, p);
  h = detail::residual_block(h, temb, blocks[2].in, blocks[2].out, d.groups, p);
  h = concat_channels(upsample2(h), skip);
  h = detail::residual_block(h, temb, blocks[3].in, blocks[3].out, d.groups, p);

  const Tensor& ong = p.next();
  const Tensor& onb = p.next();
  const Tensor& ocw = p.next();
  const Tensor& ocb = p.next();
  return conv2d(silu(group_norm(h, d.groups, ong, onb)), ocw, ocb);
}

/// EpsModel adaptor over a parameter set.
struct Denoiser {
  const DenoiserParams* params;
  Tensor operator()(const Tensor& y_t, const Tensor& x, std::span<const std::size_t> steps) const {
    return eps_predict(*params, y_t, x, steps);
  }
};

}  // namespace atddpm
