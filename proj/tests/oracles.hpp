#pragma once

// Direct-loop reference implementations used only by the tests. They are
// written without touching the library kernels so they stay independent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "overseg/tensor.hpp"

namespace oracle {

using overseg::Tensor;

// 6-nested-loop 2D cross-correlation, zero padding k/2, stride 1.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  Tensor y({cout, H, W});
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        double acc = b[o];
        for (std::int64_t c = 0; c < cin; ++c)
          for (std::int64_t u = 0; u < kh; ++u)
            for (std::int64_t v = 0; v < kw; ++v) {
              const auto si = i + u - kh / 2, sj = j + v - kw / 2;
              if (si < 0 || si >= H || sj < 0 || sj >= W) continue;
              acc += static_cast<double>(x.at(c, si, sj)) * w.at(o, c, u, v);
            }
        y.at(o, i, j) = static_cast<float>(acc);
      }
  return y;
}

// 8-nested-loop 3D cross-correlation.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto cout = w.dim(0), k = w.dim(2);
  Tensor y({cout, D, H, W});
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t z = 0; z < D; ++z)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
          double acc = b[o];
          for (std::int64_t c = 0; c < cin; ++c)
            for (std::int64_t a = 0; a < k; ++a)
              for (std::int64_t u = 0; u < k; ++u)
                for (std::int64_t v = 0; v < k; ++v) {
                  const auto sz = z + a - k / 2, si = i + u - k / 2, sj = j + v - k / 2;
                  if (sz < 0 || sz >= D || si < 0 || si >= H || sj < 0 || sj >= W) continue;
                  acc += static_cast<double>(x.at(c, sz, si, sj)) * w.at(o, c, a, u, v);
                }
          y.at(o, z, i, j) = static_cast<float>(acc);
        }
  return y;
}

inline Tensor maxpool2d(const Tensor& x) {
  const auto C = x.dim(0), H = x.dim(1) / 2, W = x.dim(2) / 2;
  Tensor y({C, H, W});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        y.at(c, i, j) = std::max({x.at(c, 2 * i, 2 * j), x.at(c, 2 * i, 2 * j + 1), x.at(c, 2 * i + 1, 2 * j),
                                  x.at(c, 2 * i + 1, 2 * j + 1)});
  return y;
}

// Bilinear 2x upsampling evaluated directly from the half-pixel formula.
inline Tensor upsample2d(const Tensor& x) {
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor y({C, 2 * H, 2 * W});
  auto src = [](std::int64_t j, std::int64_t n, std::int64_t& i0, std::int64_t& i1, double& lam) {
    double s = std::max(0.0, (j + 0.5) / 2.0 - 0.5);
    i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(s)), n - 1);
    i1 = std::min<std::int64_t>(i0 + 1, n - 1);
    lam = s - static_cast<double>(i0);
  };
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < 2 * H; ++i)
      for (std::int64_t j = 0; j < 2 * W; ++j) {
        std::int64_t a0, a1, b0, b1;
        double la, lb;
        src(i, H, a0, a1, la);
        src(j, W, b0, b1, lb);
        const double v = (1 - la) * (1 - lb) * x.at(c, a0, b0) + (1 - la) * lb * x.at(c, a0, b1) +
                         la * (1 - lb) * x.at(c, a1, b0) + la * lb * x.at(c, a1, b1);
        y.at(c, i, j) = static_cast<float>(v);
      }
  return y;
}

}  // namespace oracle
