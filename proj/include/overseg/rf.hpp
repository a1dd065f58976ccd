#pragma once

// Receptive-field bookkeeping. Three views of the same quantity:
//   closed form   k * 4^(i-1) (under) or k / 4^(i-1) (over), pooling only
//   recurrence    exact layer-by-layer rf/jump over rationals
//   probe         bounding box of nonzero input gradient for one output site

#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "overseg/autograd.hpp"
#include "overseg/error.hpp"
#include "overseg/nn.hpp"

namespace overseg {

class Rational {
 public:
  Rational(std::int64_t n = 0, std::int64_t d = 1) : n_(n), d_(d) {
    if (d_ == 0) throw ValidationError("rational with zero denominator");
    normalize();
  }
  std::int64_t num() const { return n_; }
  std::int64_t den() const { return d_; }

  friend Rational operator+(Rational a, Rational b) { return {a.n_ * b.d_ + b.n_ * a.d_, a.d_ * b.d_}; }
  friend Rational operator-(Rational a, Rational b) { return {a.n_ * b.d_ - b.n_ * a.d_, a.d_ * b.d_}; }
  friend Rational operator*(Rational a, Rational b) { return {a.n_ * b.n_, a.d_ * b.d_}; }
  friend Rational operator/(Rational a, Rational b) { return {a.n_ * b.d_, a.d_ * b.n_}; }
  friend bool operator==(Rational a, Rational b) { return a.n_ == b.n_ && a.d_ == b.d_; }
  friend auto operator<=>(Rational a, Rational b) { return a.n_ * b.d_ <=> b.n_ * a.d_; }

  std::int64_t floor() const { return n_ >= 0 ? n_ / d_ : -((-n_ + d_ - 1) / d_); }
  std::int64_t ceil() const { return -Rational(-n_, d_).floor(); }
  double to_double() const { return static_cast<double>(n_) / static_cast<double>(d_); }

  std::string str() const { return d_ == 1 ? std::to_string(n_) : std::to_string(n_) + "/" + std::to_string(d_); }
  friend std::ostream& operator<<(std::ostream& os, Rational r) { return os << r.str(); }

 private:
  void normalize() {
    if (d_ < 0) {
      n_ = -n_;
      d_ = -d_;
    }
    const auto g = std::gcd(n_ < 0 ? -n_ : n_, d_);
    if (g > 1) {
      n_ /= g;
      d_ /= g;
    }
  }
  std::int64_t n_;
  std::int64_t d_;
};

enum class RFMode { Under, Over };

inline Rational pow4(int e) {
  Rational r(1);
  for (int i = 0; i < e; ++i) r = r * Rational(4);
  for (int i = 0; i < -e; ++i) r = r / Rational(4);
  return r;
}

/// Pooling-only growth law: k * 2^(2(i-1)) under, k * (1/2)^(2(i-1)) over.
/// The value is the side product of the "a*k x a*k" window divided by k.
inline Rational rf_paper_approx(int level, std::int64_t k, RFMode mode) {
  if (level < 1 || k < 1) throw ValidationError("rf_paper_approx needs level >= 1 and k >= 1");
  return Rational(k) * pow4(mode == RFMode::Under ? level - 1 : -(level - 1));
}

/// Per-axis side of the same window: k * 2^(i-1) under, k / 2^(i-1) over.
inline Rational rf_paper_side(int level, std::int64_t k, RFMode mode) {
  Rational s(k);
  for (int i = 1; i < level; ++i) s = mode == RFMode::Under ? s * Rational(2) : s / Rational(2);
  return s;
}

struct RFLayer {
  enum class Kind { Conv, MaxPool2, Upsample2, Relu } kind;
  std::int64_t k = 1;  // conv kernel extent
  int level = 1;       // encoder block the layer belongs to
  std::string id;
};

struct RFRow {
  std::string id;
  int level;
  Rational jump;
  Rational rf;
  Rational paper_approx;
};

using RFRecord = std::vector<RFRow>;

// Encoder of one branch as a flat layer list: conv, resample, relu per level.
inline std::vector<RFLayer> encoder_stack(int levels, RFMode mode, std::int64_t k = 3) {
  std::vector<RFLayer> out;
  for (int i = 1; i <= levels; ++i) {
    const auto tag = "enc" + std::to_string(i);
    out.push_back({RFLayer::Kind::Conv, k, i, tag + ".conv"});
    if (mode == RFMode::Under) out.push_back({RFLayer::Kind::MaxPool2, 1, i, tag + ".maxpool"});
    else out.push_back({RFLayer::Kind::Upsample2, 1, i, tag + ".upsample"});
    out.push_back({RFLayer::Kind::Relu, 1, i, tag + ".relu"});
  }
  return out;
}

// Same stack without the conv growth: what the closed form assumes.
inline std::vector<RFLayer> pooling_only_stack(int levels, RFMode mode) {
  std::vector<RFLayer> out;
  for (const auto& l : encoder_stack(levels, mode))
    if (l.kind != RFLayer::Kind::Conv) out.push_back(l);
  return out;
}

/// rf starts at 1 with jump 1. conv k: rf += (k-1) jump. maxpool: rf += jump,
/// jump *= 2. upsample: jump /= 2, then rf += jump for the 2-tap support.
inline RFRecord rf_exact(const std::vector<RFLayer>& layers, RFMode mode, std::int64_t k = 3) {
  RFRecord rec;
  Rational rf(1), jump(1);
  for (const auto& l : layers) {
    switch (l.kind) {
      case RFLayer::Kind::Conv:
        rf = rf + Rational(l.k - 1) * jump;
        break;
      case RFLayer::Kind::MaxPool2:
        rf = rf + jump;
        jump = jump * Rational(2);
        break;
      case RFLayer::Kind::Upsample2:
        jump = jump / Rational(2);
        rf = rf + jump;
        break;
      case RFLayer::Kind::Relu:
        break;
    }
    rec.push_back({l.id, l.level, jump, rf, rf_paper_approx(l.level, k, mode)});
  }
  return rec;
}

/// Jump at the input of encoder block i for a pooling-only stack.
inline Rational jump_at_level(int level, RFMode mode) {
  Rational j(1);
  for (int i = 1; i < level; ++i) j = mode == RFMode::Under ? j * Rational(2) : j / Rational(2);
  return j;
}

struct EmpiricalBox {
  std::vector<std::int64_t> lo;
  std::vector<std::int64_t> hi;

  std::vector<std::int64_t> extent() const {
    std::vector<std::int64_t> e;
    for (std::size_t a = 0; a < lo.size(); ++a) e.push_back(hi[a] - lo[a] + 1);
    return e;
  }
  std::int64_t max_extent() const {
    std::int64_t m = 0;
    for (auto e : extent()) m = std::max(m, e);
    return m;
  }
};

struct ProbeOptions {
  int draws = 8;
  double threshold = 1e-12;
};

/// Input-gradient support of one output site through a single-channel copy of
/// the stack. Conv weights are drawn positive so no path cancels and relus
/// stay open. Each draw adds a ramp toward one corner on top of distinct
/// random values, which steers every maxpool to that corner of its window;
/// the union over draws therefore reaches all extremes.
inline EmpiricalBox rf_empirical(const std::vector<RFLayer>& layers, const Shape& input_spatial,
                                 const std::vector<std::int64_t>& probe, std::uint64_t seed,
                                 const ProbeOptions& opt = {}) {
  const std::size_t nd = input_spatial.rank();
  if (probe.size() != nd) throw ValidationError("probe rank does not match input");

  // Check the probe against the predicted extent before doing any work.
  Rational rf(1), jump(1);
  Rational offset(0);  // input coordinate of output index 0, centre of its window
  for (const auto& l : layers) {
    if (l.kind == RFLayer::Kind::Conv) rf = rf + Rational(l.k - 1) * jump;
    if (l.kind == RFLayer::Kind::MaxPool2) {
      rf = rf + jump;
      offset = offset + jump / Rational(2);
      jump = jump * Rational(2);
    }
    if (l.kind == RFLayer::Kind::Upsample2) {
      jump = jump / Rational(2);
      offset = offset - jump / Rational(2);
      rf = rf + jump;
    }
  }
  for (std::size_t a = 0; a < nd; ++a) {
    const auto centre = offset + Rational(probe[a]) * jump;
    if (centre - rf < Rational(0) || centre + rf > Rational(input_spatial[a] - 1))
      throw ValidationError("probe at axis " + std::to_string(a) + " index " + std::to_string(probe[a]) +
                            " is within rf " + rf.str() + " of the border of extent " +
                            std::to_string(input_spatial[a]));
  }

  std::vector<std::int64_t> in_dims{1};
  for (std::size_t a = 0; a < nd; ++a) in_dims.push_back(input_spatial[a]);
  const Shape in_shape(in_dims);

  EmpiricalBox box;
  box.lo.assign(nd, std::numeric_limits<std::int64_t>::max());
  box.hi.assign(nd, std::numeric_limits<std::int64_t>::min());
  const std::size_t corners = std::size_t{1} << nd;

  for (int d = 0; d < opt.draws; ++d) {
    Rng rng = Rng(seed).derive(static_cast<std::uint64_t>(d));
    const std::size_t corner = static_cast<std::size_t>(d) % corners;
    BasicTensor<double> x(in_shape);
    std::vector<std::int64_t> idx(nd, 0);
    for (std::int64_t flat = 0; flat < x.numel(); ++flat) {
      std::int64_t r = flat;
      for (std::size_t a = nd; a-- > 0;) {
        idx[a] = r % input_spatial[a];
        r /= input_spatial[a];
      }
      double ramp = 0;
      for (std::size_t a = 0; a < nd; ++a) {
        const double t = static_cast<double>(idx[a]) / static_cast<double>(input_spatial[a]);
        ramp += (corner >> a & 1U) ? t : 1.0 - t;
      }
      x[flat] = 1.0 + ramp + 1e-3 * rng.uniform();
    }

    ag::Tape<double> tape;
    const auto xin = tape.leaf(x, true);
    auto v = xin;
    for (const auto& l : layers) {
      switch (l.kind) {
        case RFLayer::Kind::Conv: {
          std::vector<std::int64_t> wd{1, 1};
          for (std::size_t a = 0; a < nd; ++a) wd.push_back(l.k);
          auto w = tape.leaf(random_uniform<double>(Shape(wd), rng, 0.1, 1.0));
          v = ag::conv(v, w, tape.leaf(BasicTensor<double>(Shape{1})));
          break;
        }
        case RFLayer::Kind::MaxPool2: v = ag::maxpool2(v); break;
        case RFLayer::Kind::Upsample2: v = ag::upsample2(v); break;
        case RFLayer::Kind::Relu: v = ag::relu(v); break;
      }
    }
    const Shape out_shape = v.shape();
    BasicTensor<double> onehot(out_shape);
    std::int64_t off = 0;
    for (std::size_t a = 0; a < nd; ++a) {
      if (probe[a] < 0 || probe[a] >= out_shape[a + 1])
        throw ValidationError("probe index outside output " + out_shape.str());
      off = off * out_shape[a + 1] + probe[a];
    }
    onehot[off] = 1.0;
    tape.backward(ag::weighted_sum(v, onehot));
    const auto g = tape.grad(xin);
    for (std::int64_t flat = 0; flat < g.numel(); ++flat) {
      if (std::abs(g[flat]) <= opt.threshold) continue;
      std::int64_t r = flat;
      for (std::size_t a = nd; a-- > 0;) {
        const auto i = r % input_spatial[a];
        r /= input_spatial[a];
        box.lo[a] = std::min(box.lo[a], i);
        box.hi[a] = std::max(box.hi[a], i);
      }
    }
  }
  if (box.lo[0] > box.hi[0]) throw NumericError("probe gradient vanished everywhere");
  return box;
}

}  // namespace overseg
