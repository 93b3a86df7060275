#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding its value, an optional
// gradient buffer, and (for results of differentiable ops) the parents and the
// closure that pushes the node's gradient back into them. Values are never
// mutated after creation; only leaves may be updated in place, and only by the
// optimizer between steps.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "atddpm/error.hpp"
#include "atddpm/rng.hpp"

namespace atddpm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

/// 64-byte aligned storage. Eigen's vectorized kernels pick their peeling
/// from the buffer address, so without a fixed alignment the same product can
/// round differently from one allocation to the next.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : Tensor(std::move(shape), detail::Buffer(data.begin(), data.end()), requires_grad) {}

  Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false)
      : Tensor(std::move(shape), detail::Buffer(data), requires_grad) {}

  Tensor(Shape shape, detail::Buffer data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), detail::Buffer(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), detail::Buffer(n, value));
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  double operator[](std::size_t i) const { return node().data[i]; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not scalar");
    return node().data[0];
  }

  /// In-place access for leaves (parameters). Tracked results are immutable.
  std::span<double> mutable_data() {
    if (!node().is_leaf()) throw ContractError("mutable_data: tensor is not a leaf");
    return node_->data;
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) {
    if (!node().is_leaf()) throw ContractError("set_requires_grad: tensor is not a leaf");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no graph, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), node().data); }

  /// Deep copy of a leaf including its requires_grad flag, without grad.
  Tensor clone() const { return Tensor(shape(), node().data, requires_grad()); }

  Tensor reshape(Shape shape) const;

  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

 private:
  friend Tensor make_result(Shape, detail::Buffer, std::initializer_list<const Tensor*>,
                            std::function<void(detail::Node&)>);

  const detail::Node& node() const {
    if (!node_) throw ContractError("tensor: use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op result. The graph is recorded only when grad mode is on and
/// at least one input requires grad.
inline Tensor make_result(Shape shape, detail::Buffer data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!detail::grad_mode()) return out;
  bool track = false;
  for (const Tensor* t : inputs) track = track || t->requires_grad();
  if (!track) return out;
  out.node_->requires_grad = true;
  for (const Tensor* t : inputs) out.node_->parents.push_back(t->node_ptr());
  out.node_->backward = std::move(backward);
  return out;
}

namespace detail {

// Gradient buffer of a parent, or null when the parent does not take part.
inline double* grad_of(const std::shared_ptr<Node>& p) {
  if (!p->requires_grad) return nullptr;
  if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0);
  return p->grad.data();
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(a.shape()));
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

}  // namespace detail

inline Tensor Tensor::reshape(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape()) + " as " + to_string(new_shape));
  }
  return make_result(std::move(new_shape), node().data, {this}, [](detail::Node& self) {
    if (double* g = detail::grad_of(self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Accumulates d(loss)/d(leaf) into every leaf that requires grad. Interior
/// gradients are transient: they are allocated for this call and released.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  auto root = loss.node_ptr();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  if (root->grad.empty()) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  detail::Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (const auto& p : self.parents) {
      if (double* g = detail::grad_of(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  detail::Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    if (double* g = detail::grad_of(self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::grad_of(self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  detail::Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (double* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (double* g = detail::grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  detail::Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), {&a}, [s](detail::Node& self) {
    if (double* g = detail::grad_of(self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

/// x * sigmoid(x), the smooth rectifier used throughout the denoiser.
inline Tensor silu(const Tensor& a) {
  detail::Buffer out(a.size());
  detail::Buffer sig(detail::grad_mode() && a.requires_grad() ? a.size() : 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-a[i]));
    out[i] = a[i] * s;
    if (!sig.empty()) sig[i] = s;
  }
  return make_result(a.shape(), std::move(out), {&a}, [sig = std::move(sig)](detail::Node& self) {
    const auto& p = self.parents[0];
    if (double* g = detail::grad_of(p)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * sig[i] * (1.0 + p->data[i] * (1.0 - sig[i]));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result(Shape{}, {total}, {&a}, [](detail::Node& self) {
    if (double* g = detail::grad_of(self.parents[0])) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += up;
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Mean of squared differences.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mse", a, b);
  const double n = static_cast<double>(a.size());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    total += d * d;
  }
  return make_result(Shape{}, {total / n}, {&a, &b}, [n](detail::Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    const double up = self.grad[0] * 2.0 / n;
    double* ga = detail::grad_of(pa);
    double* gb = detail::grad_of(pb);
    for (std::size_t i = 0; i < pa->data.size(); ++i) {
      const double d = up * (pa->data[i] - pb->data[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  detail::Buffer out(m * n);
  detail::MatrixMap(out.data(), m, n).noalias() =
      detail::ConstMatrixMap(a.data().data(), m, k) * detail::ConstMatrixMap(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    detail::ConstMatrixMap gout(self.grad.data(), m, n);
    if (double* g = detail::grad_of(pa)) {
      detail::MatrixMap(g, m, k).noalias() += gout * detail::ConstMatrixMap(pb->data.data(), k, n).transpose();
    }
    if (double* g = detail::grad_of(pb)) {
      detail::MatrixMap(g, k, n).noalias() += detail::ConstMatrixMap(pa->data.data(), m, k).transpose() * gout;
    }
  });
}

/// Fully connected layer: x [N,F], weight [O,F], bias [O] -> [N,O].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", weight, 2);
  const auto n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f || bias.shape() != Shape{o}) {
    throw ShapeError("linear: input " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  detail::Buffer out(n * o);
  detail::MatrixMap y(out.data(), n, o);
  y.noalias() = detail::ConstMatrixMap(x.data().data(), n, f) *
                detail::ConstMatrixMap(weight.data().data(), o, f).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < o; ++c) y(r, c) += bias[c];
  }
  return make_result({n, o}, std::move(out), {&x, &weight, &bias}, [n, f, o](detail::Node& self) {
    const auto& px = self.parents[0];
    const auto& pw = self.parents[1];
    const auto& pb = self.parents[2];
    detail::ConstMatrixMap gout(self.grad.data(), n, o);
    if (double* g = detail::grad_of(px)) {
      detail::MatrixMap(g, n, f).noalias() += gout * detail::ConstMatrixMap(pw->data.data(), o, f);
    }
    if (double* g = detail::grad_of(pw)) {
      detail::MatrixMap(g, o, f).noalias() += gout.transpose() * detail::ConstMatrixMap(px->data.data(), n, f);
    }
    if (double* g = detail::grad_of(pb)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < o; ++c) g[c] += gout(r, c);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Image ops, NCHW layout

namespace detail {

// Patch matrix [C*k*k, H*W] of one image for a stride-1, zero-padded,
// odd-size kernel.
inline void im2col(const double* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col + ((ch * k + ky) * k + kx) * h * w;
        const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const auto x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const auto sy = y + dy;
          double* dst = row + y * W;
          if (sy < 0 || sy >= H) {
            std::fill(dst, dst + W, 0.0);
            continue;
          }
          const double* src = img + (ch * h + sy) * w + dx;
          std::fill(dst, dst + x0, 0.0);
          std::copy(src + x0, src + x1, dst + x0);
          std::fill(dst + x1, dst + W, 0.0);
        }
      }
    }
  }
}

inline void col2im_add(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                       double* img) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col + ((ch * k + ky) * k + kx) * h * w;
        const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const auto x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const auto sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const double* src = row + y * W;
          double* dst = img + (ch * h + sy) * w + dx;
          for (auto x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

}  // namespace detail

/// Stride-1 convolution with zero padding that preserves the spatial size.
/// x [N,C,H,W], weight [O,C,k,k] with odd k, bias [O] -> [N,O,H,W].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", weight, 4);
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto o = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k || k % 2 == 0 || bias.shape() != Shape{o}) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  const auto hw = h * w, ckk = c * k * k;
  detail::Buffer out(n * o * hw);
  detail::Buffer col(ckk * hw);
  detail::ConstMatrixMap wmat(weight.data().data(), o, ckk);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.data().data() + i * c * hw, c, h, w, k, col.data());
    detail::MatrixMap y(out.data() + i * o * hw, o, hw);
    y.noalias() = wmat * detail::ConstMatrixMap(col.data(), ckk, hw);
    for (std::size_t oc = 0; oc < o; ++oc) y.row(oc).array() += bias[oc];
  }
  return make_result({n, o, h, w}, std::move(out), {&x, &weight, &bias},
                     [n, c, h, w, o, k, hw, ckk](detail::Node& self) {
    const auto& px = self.parents[0];
    const auto& pw = self.parents[1];
    const auto& pb = self.parents[2];
    double* gx = detail::grad_of(px);
    double* gw = detail::grad_of(pw);
    double* gb = detail::grad_of(pb);
    detail::ConstMatrixMap wmat(pw->data.data(), o, ckk);
    detail::Buffer col(ckk * hw);
    detail::Buffer gcol(gx ? ckk * hw : 0);
    for (std::size_t i = 0; i < n; ++i) {
      detail::ConstMatrixMap gout(self.grad.data() + i * o * hw, o, hw);
      if (gw) {
        detail::im2col(px->data.data() + i * c * hw, c, h, w, k, col.data());
        detail::MatrixMap(gw, o, ckk).noalias() += gout * detail::ConstMatrixMap(col.data(), ckk, hw).transpose();
      }
      if (gb) {
        for (std::size_t oc = 0; oc < o; ++oc) gb[oc] += gout.row(oc).sum();
      }
      if (gx) {
        detail::MatrixMap(gcol.data(), ckk, hw).noalias() = wmat.transpose() * gout;
        detail::col2im_add(gcol.data(), c, h, w, k, gx + i * c * hw);
      }
    }
  });
}

/// Group normalization over (C/groups, H, W) per sample, with per-channel
/// affine scale and shift. x [N,C,H,W], gamma/beta [C].
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  detail::require_rank("group_norm", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0 || gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("group_norm: input " + to_string(x.shape()) + " with " + std::to_string(groups) +
                     " groups, gamma " + to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const auto cpg = c / groups;
  const auto m = cpg * hw;
  detail::Buffer out(x.size());
  detail::Buffer rstd(n * groups);
  detail::Buffer mu(n * groups);
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* base = xd + (i * c + g * cpg) * hw;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += base[j];
      const double mean = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t j = 0; j < m; ++j) v += (base[j] - mean) * (base[j] - mean);
      const double r = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
      mu[i * groups + g] = mean;
      rstd[i * groups + g] = r;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const auto ch = g * cpg + cc;
        const double* src = base + cc * hw;
        double* dst = out.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) dst[j] = (src[j] - mean) * r * gamma[ch] + beta[ch];
      }
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [n, c, hw, groups, cpg, m, mu = std::move(mu), rstd = std::move(rstd)](detail::Node& self) {
    const auto& px = self.parents[0];
    const auto& pg = self.parents[1];
    const auto& pbeta = self.parents[2];
    double* gx = detail::grad_of(px);
    double* gg = detail::grad_of(pg);
    double* gbeta = detail::grad_of(pbeta);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t g = 0; g < groups; ++g) {
        const double mean = mu[i * groups + g];
        const double r = rstd[i * groups + g];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t cc = 0; cc < cpg; ++cc) {
          const auto ch = g * cpg + cc;
          const auto off = (i * c + ch) * hw;
          const double gam = pg->data[ch];
          double sg = 0.0, sb = 0.0;
          for (std::size_t j = 0; j < hw; ++j) {
            const double xhat = (px->data[off + j] - mean) * r;
            const double dy = self.grad[off + j];
            sg += dy * xhat;
            sb += dy;
            sum_dxhat += dy * gam;
            sum_dxhat_xhat += dy * gam * xhat;
          }
          if (gg) gg[ch] += sg;
          if (gbeta) gbeta[ch] += sb;
        }
        if (!gx) continue;
        for (std::size_t cc = 0; cc < cpg; ++cc) {
          const auto ch = g * cpg + cc;
          const auto off = (i * c + ch) * hw;
          const double gam = pg->data[ch];
          for (std::size_t j = 0; j < hw; ++j) {
            const double xhat = (px->data[off + j] - mean) * r;
            const double dxhat = self.grad[off + j] * gam;
            gx[off + j] += r * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
          }
        }
      }
    }
  });
}

/// Adds a per-(sample, channel) value to every pixel: x [N,C,H,W], v [N,C].
inline Tensor add_channel(const Tensor& x, const Tensor& v) {
  detail::require_rank("add_channel", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (v.shape() != Shape{n, c}) {
    throw ShapeError("add_channel: input " + to_string(x.shape()) + " vs per-channel " + to_string(v.shape()));
  }
  detail::Buffer out(x.size());
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    for (std::size_t j = 0; j < hw; ++j) out[nc * hw + j] = x[nc * hw + j] + v[nc];
  }
  return make_result(x.shape(), std::move(out), {&x, &v}, [n, c, hw](detail::Node& self) {
    if (double* g = detail::grad_of(self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::grad_of(self.parents[1])) {
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += self.grad[nc * hw + j];
        g[nc] += s;
      }
    }
  });
}

/// 2x2 average pooling; H and W must be even.
inline Tensor avg_pool2(const Tensor& x) {
  detail::require_rank("avg_pool2", x, 4);
  const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size in " + to_string(x.shape()));
  const auto oh = h / 2, ow = w / 2;
  detail::Buffer out(nc * oh * ow);
  for (std::size_t p = 0; p < nc; ++p) {
    const double* src = x.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* s = src + 2 * y * w + 2 * xx;
        out[(p * oh + y) * ow + xx] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x}, [nc, h, w, oh, ow](detail::Node& self) {
    double* g = detail::grad_of(self.parents[0]);
    if (!g) return;
    for (std::size_t p = 0; p < nc; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double d = 0.25 * self.grad[(p * oh + y) * ow + xx];
          double* s = g + p * h * w + 2 * y * w + 2 * xx;
          s[0] += d;
          s[1] += d;
          s[w] += d;
          s[w + 1] += d;
        }
      }
    }
  });
}

/// Nearest-neighbour 2x upsampling.
inline Tensor upsample2(const Tensor& x) {
  detail::require_rank("upsample2", x, 4);
  const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = 2 * h, ow = 2 * w;
  detail::Buffer out(nc * oh * ow);
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = x[(p * h + y / 2) * w + xx / 2];
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x}, [nc, h, w, oh, ow](detail::Node& self) {
    double* g = detail::grad_of(self.parents[0]);
    if (!g) return;
    for (std::size_t p = 0; p < nc; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * oh + y) * ow + xx];
        }
      }
    }
  });
}

/// Concatenates along the channel axis: [N,Ca,H,W] ++ [N,Cb,H,W].
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require_rank("concat_channels", a, 4);
  detail::require_rank("concat_channels", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  detail::Buffer out(n * (ca + cb) * hw);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {&a, &b}, [n, ca, cb, hw](detail::Node& self) {
    if (double* g = detail::grad_of(self.parents[0])) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = self.grad.data() + i * (ca + cb) * hw;
        for (std::size_t j = 0; j < ca * hw; ++j) g[i * ca * hw + j] += src[j];
      }
    }
    if (double* g = detail::grad_of(self.parents[1])) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = self.grad.data() + (i * (ca + cb) + ca) * hw;
        for (std::size_t j = 0; j < cb * hw; ++j) g[i * cb * hw + j] += src[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Random tensors

/// i.i.d. standard normal entries drawn from `rng` (Box-Muller).
inline Tensor gauss(Rng& rng, const Shape& shape) {
  if (shape.empty()) throw ShapeError("gauss: empty shape");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("gauss: zero dimension in " + to_string(shape));
  }
  detail::Buffer v(numel(shape));
  for (double& e : v) e = rng.normal();
  return Tensor(shape, std::move(v));
}

inline Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  detail::Buffer v(numel(shape));
  for (double& e : v) e = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace atddpm
