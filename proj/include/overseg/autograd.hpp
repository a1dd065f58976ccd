#pragma once

// Reverse-mode differentiation over a linear tape. Nodes are appended in
// creation order, so a reverse sweep over the node list is a valid reverse
// topological order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "overseg/error.hpp"
#include "overseg/kernels.hpp"
#include "overseg/tensor.hpp"

namespace overseg::ag {

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  // Receives the tape and the id of the node whose gradient is being pushed
  // to its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(BasicTensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, false, {}});
    return {this, nodes_.size() - 1};
  }

  // Trainable leaf whose gradient is reported by param_grads().
  Var<T> param(std::string name, BasicTensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true, true, std::move(name)});
    return {this, nodes_.size() - 1};
  }

  // Appends an op result. The backward rule is kept only when some input
  // needs a gradient.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var<T> record(BasicTensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs, false, {}});
    return {this, nodes_.size() - 1};
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id()); }

  // Zero-initialized on first access.
  BasicTensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(const Var<T>& loss) {
    check_owner(loss);
    if (backward_done_) throw StateError("backward already ran on this tape; call reset() first");
    if (loss.value().numel() != 1)
      throw ShapeError("backward needs a scalar loss, got " + loss.shape().str());
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id()).fill(T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
      // Intermediate gradients are not needed once pushed to the inputs.
      nodes_[i].grad = BasicTensor<T>();
    }
  }

  bool has_grad(const Var<T>& v) const { return !nodes_.at(v.id()).grad.empty(); }

  // Gradient of a leaf after backward(); zeros if the loss does not reach it.
  BasicTensor<T> grad(const Var<T>& v) const {
    check_owner(v);
    const auto& n = nodes_[v.id()];
    if (!n.grad.empty()) return n.grad;
    return BasicTensor<T>(n.value.shape());
  }

  // Parameter gradients in registration order.
  std::vector<std::pair<std::string, BasicTensor<T>>> param_grads() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out;
    for (const auto& n : nodes_)
      if (n.is_param) out.emplace_back(n.name, n.grad.empty() ? BasicTensor<T>(n.value.shape()) : n.grad);
    return out;
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_param = false;
    std::string name;
  };

  void check_owner(const Var<T>& v) const {
    if (v.tape() != this) throw StateError("variable belongs to a different tape");
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

inline kernels::Window spatial_factor(std::size_t rank) {
  if (rank == 3) return {1, 2, 2};
  if (rank == 4) return {2, 2, 2};
  throw ShapeError("resampling expects [C,H,W] or [C,D,H,W], got rank " + std::to_string(rank));
}

template <class T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Same-size convolution, stride 1, zero padding k/2, kernel 1 or 3 per axis.
/// 2D: x [Cin,H,W], w [Cout,Cin,k,k]. 3D: x [Cin,D,H,W], w [Cout,Cin,k,k,k].
template <class T>
Var<T> conv(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.rank() != xs.rank() + 1)
    throw ShapeError("conv weight " + ws.str() + " does not match input " + xs.str());
  if (ws[1] != xs[0])
    throw ShapeError("conv channel mismatch: input " + xs.str() + " vs weight " + ws.str());
  if (b.shape().rank() != 1 || b.shape()[0] != ws[0])
    throw ShapeError("conv bias " + b.shape().str() + " does not match weight " + ws.str());
  kernels::Window k = xs.rank() == 3 ? kernels::Window{1, static_cast<int>(ws[2]), static_cast<int>(ws[3])}
                                     : kernels::Window{static_cast<int>(ws[2]), static_cast<int>(ws[3]),
                                                       static_cast<int>(ws[4])};
  for (int e : {k.d, k.h, k.w})
    if (e != 1 && e != 3) throw ShapeError("conv kernel extents must be 1 or 3, got " + ws.str());
  const auto gx = kernels::geom_of(xs);
  const std::int64_t cout = ws[0];
  BasicTensor<T> y(xs.with_channels(cout));
  kernels::conv_forward(x.value().ptr(), gx, w.value().ptr(), b.value().ptr(), cout, k, y.ptr());
  const auto xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape()->record(std::move(y), {x, w, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_buffer(self);
    T* dx = t.requires_grad(xi) ? t.grad_buffer(xi).ptr() : nullptr;
    T* dw = t.requires_grad(wi) ? t.grad_buffer(wi).ptr() : nullptr;
    T* db = t.requires_grad(bi) ? t.grad_buffer(bi).ptr() : nullptr;
    kernels::conv_backward(t.value(xi).ptr(), gx, t.value(wi).ptr(), cout, k, dy.ptr(), dx, dw, db);
  });
}

/// 2x (2D) or 2x2x2 (3D) non-overlapping max pooling.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  const auto& xs = x.shape();
  const auto f = detail::spatial_factor(xs.rank());
  const auto g = kernels::geom_of(xs);
  if ((f.d == 2 && g.d % 2) || g.h % 2 || g.w % 2)
    throw ShapeError("max-pooling needs even spatial dims, got " + xs.str() +
                     "; pad the input to a multiple of 2^levels");
  auto dims = xs.dims();
  for (std::size_t a = 1; a < dims.size(); ++a) dims[a] /= 2;
  BasicTensor<T> y{Shape(dims)};
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(static_cast<std::size_t>(y.numel()));
  kernels::maxpool_forward(x.value().ptr(), g, f, y.ptr(), argmax->data());
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_buffer(self);
    kernels::maxpool_backward(dy.ptr(), argmax->data(), dy.numel(), t.grad_buffer(xi).ptr());
  });
}

/// 2x bilinear (2D) or trilinear (3D) upsampling, half-pixel alignment.
template <class T>
Var<T> upsample2(const Var<T>& x) {
  const auto& xs = x.shape();
  const auto f = detail::spatial_factor(xs.rank());
  const auto g = kernels::geom_of(xs);
  auto dims = xs.dims();
  for (std::size_t a = 1; a < dims.size(); ++a) dims[a] *= 2;
  BasicTensor<T> y{Shape(dims)};
  kernels::upsample_forward(x.value().ptr(), g, f, y.ptr());
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape<T>& t, std::size_t self) {
    kernels::upsample_backward(t.grad_buffer(self).ptr(), g, f, t.grad_buffer(xi).ptr());
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  const auto& xv = x.value();
  BasicTensor<T> y(xv.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_buffer(self);
    const auto& in = t.value(xi);
    auto& dx = t.grad_buffer(xi);
    for (std::int64_t i = 0; i < dx.numel(); ++i)
      if (in[i] > T(0)) dx[i] += dy[i];
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  const auto& xv = x.value();
  BasicTensor<T> y(xv.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const T v = xv[i];
    y[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_buffer(self);
    const auto& s = t.value(self);
    auto& dx = t.grad_buffer(xi);
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i] * s[i] * (T(1) - s[i]);
  });
}

/// Softmax across the leading (channel) axis at every spatial location.
template <class T>
Var<T> softmax_channels(const Var<T>& x) {
  const auto& xv = x.value();
  const std::int64_t C = xv.dim(0);
  const std::int64_t S = xv.numel() / C;
  BasicTensor<T> y(xv.shape());
  for (std::int64_t p = 0; p < S; ++p) {
    T m = xv[p];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, xv[c * S + p]);
    T z = 0;
    for (std::int64_t c = 0; c < C; ++c) z += (y[c * S + p] = std::exp(xv[c * S + p] - m));
    for (std::int64_t c = 0; c < C; ++c) y[c * S + p] /= z;
  }
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_buffer(self);
    const auto& s = t.value(self);
    auto& dx = t.grad_buffer(xi);
    for (std::int64_t p = 0; p < S; ++p) {
      T dot = 0;
      for (std::int64_t c = 0; c < C; ++c) dot += dy[c * S + p] * s[c * S + p];
      for (std::int64_t c = 0; c < C; ++c) dx[c * S + p] += s[c * S + p] * (dy[c * S + p] - dot);
    }
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("add needs equal shapes, got " + a.shape().str() + " and " + b.shape().str());
  BasicTensor<T> y(a.value());
  detail::accumulate(y, b.value());
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_buffer(self);
    if (t.requires_grad(ai)) detail::accumulate(t.grad_buffer(ai), dy);
    if (t.requires_grad(bi)) detail::accumulate(t.grad_buffer(bi), dy);
  });
}

/// Channel-axis concatenation of tensors with equal spatial dims.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat needs at least one input");
  const auto& first = parts.front().shape();
  std::int64_t channels = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.rank() == first.rank();
    for (std::size_t a = 1; ok && a < s.rank(); ++a) ok = s[a] == first[a];
    if (!ok) throw ShapeError("concat needs equal spatial dims, got " + first.str() + " and " + s.str());
    channels += s[0];
  }
  BasicTensor<T> y(first.with_channels(channels));
  std::vector<std::size_t> ids;
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    std::copy(v.data().begin(), v.data().end(), y.data().begin() + off);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.numel();
  }
  return parts.front().tape()->record(
      std::move(y), std::span<const Var<T>>(parts), [=](Tape<T>& t, std::size_t self) {
        const auto& dy = t.grad_buffer(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          auto& dx = t.grad_buffer(ids[k]);
          for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy[offsets[k] + i];
        }
      });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  return concat_channels<T>(std::vector<Var<T>>{a, b});
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (auto v : x.value().data()) s += v;
  const auto xi = x.id();
  return x.tape()->record(BasicTensor<T>(Shape{1}, std::vector<T>{s}), {x}, [=](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    auto& dx = t.grad_buffer(xi);
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
  });
}

/// sum(x * weights) with constant weights.
template <class T>
Var<T> weighted_sum(const Var<T>& x, BasicTensor<T> weights) {
  if (!(weights.shape() == x.shape()))
    throw ShapeError("weighted_sum weights " + weights.shape().str() + " vs input " + x.shape().str());
  T s = 0;
  const auto& xv = x.value();
  for (std::int64_t i = 0; i < xv.numel(); ++i) s += xv[i] * weights[i];
  const auto xi = x.id();
  auto wts = std::make_shared<BasicTensor<T>>(std::move(weights));
  return x.tape()->record(BasicTensor<T>(Shape{1}, std::vector<T>{s}), {x}, [=](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    auto& dx = t.grad_buffer(xi);
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += g * (*wts)[i];
  });
}

inline constexpr double kProbEps = 1e-7;

namespace detail {

template <class T>
void check_binary_target(const char* op, const Shape& pred, const BasicTensor<T>& target) {
  if (!(pred == target.shape()))
    throw ShapeError(std::string(op) + " prediction " + pred.str() + " vs target " + target.shape().str());
  for (std::int64_t i = 0; i < target.numel(); ++i)
    if (target[i] != T(0) && target[i] != T(1))
      throw ValidationError(std::string(op) + " target must be 0 or 1, found " +
                            std::to_string(static_cast<double>(target[i])) + " at flat index " + std::to_string(i));
}

}  // namespace detail

/// Mean binary cross-entropy of probabilities against a {0,1} target, with
/// probabilities clamped to [eps, 1-eps].
template <class T>
Var<T> bce_loss(const Var<T>& pred, const BasicTensor<T>& target) {
  detail::check_binary_target("bce_loss", pred.shape(), target);
  const T eps = static_cast<T>(kProbEps);
  const auto& p = pred.value();
  const auto n = static_cast<double>(p.numel());
  double acc = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    const T q = std::clamp(p[i], eps, T(1) - eps);
    acc += target[i] == T(1) ? std::log(static_cast<double>(q)) : std::log(1.0 - static_cast<double>(q));
  }
  const T loss = static_cast<T>(-acc / n);
  const auto pi = pred.id();
  auto tgt = std::make_shared<BasicTensor<T>>(target);
  return pred.tape()->record(BasicTensor<T>(Shape{1}, std::vector<T>{loss}), {pred},
                             [=](Tape<T>& t, std::size_t self) {
                               const T g = t.grad_buffer(self)[0];
                               const auto& pv = t.value(pi);
                               auto& dp = t.grad_buffer(pi);
                               const T scale = g / static_cast<T>(pv.numel());
                               for (std::int64_t i = 0; i < pv.numel(); ++i) {
                                 const T q = pv[i];
                                 if (q < eps || q > T(1) - eps) continue;
                                 dp[i] += (*tgt)[i] == T(1) ? -scale / q : scale / (T(1) - q);
                               }
                             });
}

/// bce_loss(sigmoid(z), target) evaluated from the logits. Same value away
/// from the clamp, but the gradient sigmoid(z) - y survives saturation.
template <class T>
Var<T> bce_logits_loss(const Var<T>& logits, const BasicTensor<T>& target) {
  detail::check_binary_target("bce_logits_loss", logits.shape(), target);
  const auto& z = logits.value();
  double acc = 0;
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    const double zi = z[i];
    acc += std::max(zi, 0.0) - zi * static_cast<double>(target[i]) + std::log1p(std::exp(-std::abs(zi)));
  }
  const T loss = static_cast<T>(acc / static_cast<double>(z.numel()));
  const auto li = logits.id();
  auto tgt = std::make_shared<BasicTensor<T>>(target);
  return logits.tape()->record(BasicTensor<T>(Shape{1}, std::vector<T>{loss}), {logits},
                               [=](Tape<T>& t, std::size_t self) {
                                 const auto& zv = t.value(li);
                                 auto& dz = t.grad_buffer(li);
                                 const T scale = t.grad_buffer(self)[0] / static_cast<T>(zv.numel());
                                 for (std::int64_t i = 0; i < zv.numel(); ++i) {
                                   const T sig = T(1) / (T(1) + std::exp(-zv[i]));
                                   dz[i] += scale * (sig - (*tgt)[i]);
                                 }
                               });
}

/// Mean multi-class cross-entropy of channel-axis logits [C, ...spatial]
/// against integer class ids with the spatial shape (optionally with a
/// leading singleton axis). Softmax is computed in stabilized form.
template <class T>
Var<T> ce_loss(const Var<T>& logits, const BasicTensor<T>& target) {
  const auto& ls = logits.shape();
  const std::int64_t C = ls[0];
  const std::int64_t S = logits.value().numel() / C;
  bool ok = target.numel() == S;
  if (ok) {
    const auto& ts = target.shape();
    const std::size_t lead = ts.rank() == ls.rank() ? 1 : 0;
    ok = (ts.rank() == ls.rank() && ts[0] == 1) || ts.rank() + 1 == ls.rank();
    for (std::size_t a = 1; ok && a < ls.rank(); ++a) ok = ts[a - 1 + lead] == ls[a];
  }
  if (!ok) throw ShapeError("ce_loss logits " + ls.str() + " vs target " + target.shape().str());
  const auto spatial = std::vector<std::int64_t>(ls.dims().begin() + 1, ls.dims().end());
  auto coords = [&](std::int64_t p) {
    std::string s = "(";
    std::vector<std::int64_t> idx(spatial.size());
    for (std::size_t a = spatial.size(); a-- > 0;) {
      idx[a] = p % spatial[a];
      p /= spatial[a];
    }
    for (std::size_t a = 0; a < idx.size(); ++a) s += (a ? "," : "") + std::to_string(idx[a]);
    return s + ")";
  };
  std::vector<std::int64_t> cls(static_cast<std::size_t>(S));
  for (std::int64_t p = 0; p < S; ++p) {
    const T v = target[p];
    const auto id = static_cast<std::int64_t>(v);
    if (static_cast<T>(id) != v || id < 0 || id >= C)
      throw ValidationError("class id " + std::to_string(static_cast<double>(v)) + " outside [0," + std::to_string(C) +
                            ") at voxel " + coords(p));
    cls[static_cast<std::size_t>(p)] = id;
  }
  const auto& x = logits.value();
  auto probs = std::make_shared<BasicTensor<T>>(ls);
  double acc = 0;
  for (std::int64_t p = 0; p < S; ++p) {
    T m = x[p];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, x[c * S + p]);
    double z = 0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(x[c * S + p] - m));
    const double logz = std::log(z);
    for (std::int64_t c = 0; c < C; ++c)
      (*probs)[c * S + p] = static_cast<T>(std::exp(static_cast<double>(x[c * S + p] - m) - logz));
    acc += static_cast<double>(x[cls[static_cast<std::size_t>(p)] * S + p] - m) - logz;
  }
  const T loss = static_cast<T>(-acc / static_cast<double>(S));
  const auto li = logits.id();
  auto ids = std::make_shared<std::vector<std::int64_t>>(std::move(cls));
  return logits.tape()->record(BasicTensor<T>(Shape{1}, std::vector<T>{loss}), {logits},
                               [=](Tape<T>& t, std::size_t self) {
                                 const T g = t.grad_buffer(self)[0] / static_cast<T>(S);
                                 auto& dx = t.grad_buffer(li);
                                 for (std::int64_t c = 0; c < C; ++c)
                                   for (std::int64_t p = 0; p < S; ++p) {
                                     const T onehot = (*ids)[static_cast<std::size_t>(p)] == c ? T(1) : T(0);
                                     dx[c * S + p] += g * ((*probs)[c * S + p] - onehot);
                                   }
                               });
}

}  // namespace overseg::ag
