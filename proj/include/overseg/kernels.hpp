#pragma once

// Raw compute kernels over contiguous [C,H,W] / [C,D,H,W] buffers. A 2D
// activation is handled as a 3D one with depth 1, and a 2D kernel as a 3D
// kernel with depth extent 1, so every kernel here has a single code path.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <vector>

#include "overseg/error.hpp"
#include "overseg/parallel.hpp"
#include "overseg/tensor.hpp"

namespace overseg::kernels {

struct Geom {
  std::int64_t c = 1, d = 1, h = 1, w = 1;
  std::int64_t spatial() const { return d * h * w; }
  std::int64_t numel() const { return c * spatial(); }
};

// Activation geometry from a rank-3 ([C,H,W]) or rank-4 ([C,D,H,W]) shape.
inline Geom geom_of(const Shape& s) {
  if (s.rank() == 3) return {s[0], 1, s[1], s[2]};
  if (s.rank() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError("expected a [C,H,W] or [C,D,H,W] activation, got " + s.str());
}

struct Window {
  int d = 1, h = 1, w = 1;
  int volume() const { return d * h * w; }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Output positions are processed in chunks of whole (d,h) rows. The chunk size
// depends only on the geometry, never on the thread count.
struct Chunking {
  std::int64_t rows_per_chunk;
  std::int64_t chunks;
  std::int64_t total_rows;

  static Chunking of(const Geom& g) {
    constexpr std::int64_t kTargetColumns = 4096;
    Chunking ch{};
    ch.total_rows = g.d * g.h;
    ch.rows_per_chunk = std::max<std::int64_t>(1, kTargetColumns / g.w);
    ch.chunks = (ch.total_rows + ch.rows_per_chunk - 1) / ch.rows_per_chunk;
    return ch;
  }
  std::int64_t first_row(std::int64_t i) const { return i * rows_per_chunk; }
  std::int64_t rows(std::int64_t i) const { return std::min(rows_per_chunk, total_rows - first_row(i)); }
};

// col[(c,a,b,e), r*W + x] = input[c, d+a-pd, h+b-ph, x+e-pw] (zero outside).
template <class T>
void im2col(const T* x, const Geom& g, const Window& k, std::int64_t row0, std::int64_t nrows, T* col) {
  const std::int64_t n = nrows * g.w;
  const int pd = k.d / 2, ph = k.h / 2, pw = k.w / 2;
  T* dst = col;
  for (std::int64_t c = 0; c < g.c; ++c)
    for (int a = 0; a < k.d; ++a)
      for (int b = 0; b < k.h; ++b)
        for (int e = 0; e < k.w; ++e, dst += n) {
          const std::int64_t shift = e - pw;
          const std::int64_t lo = std::max<std::int64_t>(0, -shift);
          const std::int64_t hi = std::min<std::int64_t>(g.w, g.w - shift);
          for (std::int64_t r = 0; r < nrows; ++r) {
            const std::int64_t row = row0 + r;
            const std::int64_t sd = row / g.h + a - pd;
            const std::int64_t sh = row % g.h + b - ph;
            T* out = dst + r * g.w;
            if (sd < 0 || sd >= g.d || sh < 0 || sh >= g.h || hi <= lo) {
              std::fill(out, out + g.w, T(0));
              continue;
            }
            const T* src = x + ((c * g.d + sd) * g.h + sh) * g.w;
            std::fill(out, out + lo, T(0));
            std::memcpy(out + lo, src + lo + shift, static_cast<std::size_t>(hi - lo) * sizeof(T));
            std::fill(out + hi, out + g.w, T(0));
          }
        }
}

// Transpose of im2col: scatter-adds col back into dx.
template <class T>
void col2im_add(const T* col, const Geom& g, const Window& k, std::int64_t row0, std::int64_t nrows, T* dx) {
  const std::int64_t n = nrows * g.w;
  const int pd = k.d / 2, ph = k.h / 2, pw = k.w / 2;
  const T* src = col;
  for (std::int64_t c = 0; c < g.c; ++c)
    for (int a = 0; a < k.d; ++a)
      for (int b = 0; b < k.h; ++b)
        for (int e = 0; e < k.w; ++e, src += n) {
          const std::int64_t shift = e - pw;
          const std::int64_t lo = std::max<std::int64_t>(0, -shift);
          const std::int64_t hi = std::min<std::int64_t>(g.w, g.w - shift);
          for (std::int64_t r = 0; r < nrows; ++r) {
            const std::int64_t row = row0 + r;
            const std::int64_t sd = row / g.h + a - pd;
            const std::int64_t sh = row % g.h + b - ph;
            if (sd < 0 || sd >= g.d || sh < 0 || sh >= g.h) continue;
            T* out = dx + ((c * g.d + sd) * g.h + sh) * g.w;
            const T* in = src + r * g.w;
            for (std::int64_t x = lo; x < hi; ++x) out[x + shift] += in[x];
          }
        }
}

template <class T>
std::vector<T>& scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

/// Stride-1 "same" cross-correlation with zero padding k/2.
/// x: [Cin, D, H, W]; w: [Cout, Cin, kd, kh, kw]; b: [Cout]; y: [Cout, D, H, W].
template <class T>
void conv_forward(const T* x, const Geom& gx, const T* w, const T* b, std::int64_t cout, const Window& k, T* y) {
  const std::int64_t K = gx.c * k.volume();
  const std::int64_t S = gx.spatial();
  const auto ch = Chunking::of(gx);
  Eigen::Map<const RowMat<T>> wm(w, cout, K);
  parallel_for(ch.chunks, [&](std::int64_t i) {
    const std::int64_t row0 = ch.first_row(i), nrows = ch.rows(i);
    const std::int64_t n = nrows * gx.w, p0 = row0 * gx.w;
    auto& buf = scratch<T>(static_cast<std::size_t>(K * n));
    im2col(x, gx, k, row0, nrows, buf.data());
    Eigen::Map<const RowMat<T>> col(buf.data(), K, n);
    StridedMap<T> yb(y + p0, cout, n, Eigen::OuterStride<>(S));
    yb.noalias() = wm * col;
    for (std::int64_t o = 0; o < cout; ++o) yb.row(o).array() += b[o];
  });
}

/// Gradients of conv_forward. dx/dw/db may be null when not needed; dw and db
/// are accumulated into, dx is accumulated into.
template <class T>
void conv_backward(const T* x, const Geom& gx, const T* w, std::int64_t cout, const Window& k, const T* dy, T* dx,
                   T* dw, T* db) {
  const std::int64_t K = gx.c * k.volume();
  const std::int64_t S = gx.spatial();
  if (db) {
    for (std::int64_t o = 0; o < cout; ++o) {
      T acc = 0;
      const T* row = dy + o * S;
      for (std::int64_t p = 0; p < S; ++p) acc += row[p];
      db[o] += acc;
    }
  }
  if (!dx && !dw) return;
  const auto ch = Chunking::of(gx);
  Eigen::Map<const RowMat<T>> wm(w, cout, K);
  std::optional<Eigen::Map<RowMat<T>>> dwm;
  if (dw) dwm.emplace(dw, cout, K);

  // Chunks run in waves; each wave's partial results are reduced in chunk
  // order so the sums are independent of the thread count.
  const std::int64_t wave = std::max(1, thread_count());
  std::vector<RowMat<T>> partial_dw(static_cast<std::size_t>(wave));
  std::vector<RowMat<T>> dcol(static_cast<std::size_t>(wave));
  for (std::int64_t start = 0; start < ch.chunks; start += wave) {
    const std::int64_t count = std::min(wave, ch.chunks - start);
    parallel_for(count, [&](std::int64_t slot) {
      const std::int64_t i = start + slot;
      const std::int64_t row0 = ch.first_row(i), nrows = ch.rows(i);
      const std::int64_t n = nrows * gx.w, p0 = row0 * gx.w;
      ConstStridedMap<T> dyb(dy + p0, cout, n, Eigen::OuterStride<>(S));
      if (dw) {
        auto& buf = scratch<T>(static_cast<std::size_t>(K * n));
        im2col(x, gx, k, row0, nrows, buf.data());
        Eigen::Map<const RowMat<T>> col(buf.data(), K, n);
        partial_dw[static_cast<std::size_t>(slot)].noalias() = dyb * col.transpose();
      }
      if (dx) dcol[static_cast<std::size_t>(slot)].noalias() = wm.transpose() * dyb;
    });
    for (std::int64_t slot = 0; slot < count; ++slot) {
      const std::int64_t i = start + slot;
      if (dw) *dwm += partial_dw[static_cast<std::size_t>(slot)];
      if (dx) col2im_add(dcol[static_cast<std::size_t>(slot)].data(), gx, k, ch.first_row(i), ch.rows(i), dx);
    }
  }
}

/// Non-overlapping max pooling with per-axis factor 1 or 2. argmax receives the
/// flat input index of each window's maximum; ties go to the first element in
/// row-major window order.
template <class T>
void maxpool_forward(const T* x, const Geom& g, const Window& f, T* y, std::uint32_t* argmax) {
  const Geom go{g.c, g.d / f.d, g.h / f.h, g.w / f.w};
  parallel_for(g.c, [&](std::int64_t c) {
    for (std::int64_t od = 0; od < go.d; ++od)
      for (std::int64_t oh = 0; oh < go.h; ++oh)
        for (std::int64_t ow = 0; ow < go.w; ++ow) {
          std::int64_t best_idx = -1;
          T best{};
          for (int a = 0; a < f.d; ++a)
            for (int b = 0; b < f.h; ++b)
              for (int e = 0; e < f.w; ++e) {
                const std::int64_t idx = ((c * g.d + od * f.d + a) * g.h + oh * f.h + b) * g.w + ow * f.w + e;
                if (best_idx < 0 || x[idx] > best) {
                  best = x[idx];
                  best_idx = idx;
                }
              }
          const std::int64_t o = ((c * go.d + od) * go.h + oh) * go.w + ow;
          y[o] = best;
          argmax[o] = static_cast<std::uint32_t>(best_idx);
        }
  });
}

template <class T>
void maxpool_backward(const T* dy, const std::uint32_t* argmax, std::int64_t out_numel, T* dx) {
  for (std::int64_t o = 0; o < out_numel; ++o) dx[argmax[o]] += dy[o];
}

// Source taps for output j of a 2x linear upsample along an axis of length n,
// half-pixel convention: src = (j + 0.5) / 2 - 0.5, clamped to [0, n-1].
struct Taps {
  std::int64_t i0, i1;
  double w0, w1;
};

inline Taps upsample_taps(std::int64_t j, std::int64_t n) {
  double src = (static_cast<double>(j) + 0.5) / 2.0 - 0.5;
  if (src < 0) src = 0;
  auto i0 = static_cast<std::int64_t>(src);
  if (i0 > n - 1) i0 = n - 1;
  const std::int64_t i1 = std::min(i0 + 1, n - 1);
  const double lam = src - static_cast<double>(i0);
  if (i1 == i0 || lam == 0.0) return {i0, i0, 1.0, 0.0};
  return {i0, i1, 1.0 - lam, lam};
}

// y: [outer, 2n, inner] from x: [outer, n, inner].
template <class T>
void upsample_axis(const T* x, std::int64_t outer, std::int64_t n, std::int64_t inner, T* y) {
  std::vector<Taps> taps(static_cast<std::size_t>(2 * n));
  for (std::int64_t j = 0; j < 2 * n; ++j) taps[static_cast<std::size_t>(j)] = upsample_taps(j, n);
  parallel_for(outer, [&](std::int64_t o) {
    const T* src = x + o * n * inner;
    T* dst = y + o * 2 * n * inner;
    for (std::int64_t j = 0; j < 2 * n; ++j) {
      const auto& t = taps[static_cast<std::size_t>(j)];
      const T w0 = static_cast<T>(t.w0), w1 = static_cast<T>(t.w1);
      const T* a = src + t.i0 * inner;
      const T* b = src + t.i1 * inner;
      T* out = dst + j * inner;
      if (t.w1 == 0.0)
        std::copy(a, a + inner, out);
      else
        for (std::int64_t q = 0; q < inner; ++q) out[q] = w0 * a[q] + w1 * b[q];
    }
  });
}

// Transpose of upsample_axis: dx (overwritten) from dy.
template <class T>
void upsample_axis_transpose(const T* dy, std::int64_t outer, std::int64_t n, std::int64_t inner, T* dx) {
  std::vector<Taps> taps(static_cast<std::size_t>(2 * n));
  for (std::int64_t j = 0; j < 2 * n; ++j) taps[static_cast<std::size_t>(j)] = upsample_taps(j, n);
  parallel_for(outer, [&](std::int64_t o) {
    const T* src = dy + o * 2 * n * inner;
    T* dst = dx + o * n * inner;
    std::fill(dst, dst + n * inner, T(0));
    for (std::int64_t j = 0; j < 2 * n; ++j) {
      const auto& t = taps[static_cast<std::size_t>(j)];
      const T w0 = static_cast<T>(t.w0), w1 = static_cast<T>(t.w1);
      const T* g = src + j * inner;
      T* a = dst + t.i0 * inner;
      T* b = dst + t.i1 * inner;
      if (t.w1 == 0.0)
        for (std::int64_t q = 0; q < inner; ++q) a[q] += g[q];
      else
        for (std::int64_t q = 0; q < inner; ++q) {
          a[q] += w0 * g[q];
          b[q] += w1 * g[q];
        }
    }
  });
}

// Separable 2x linear upsampling over the axes with factor 2 in f.
template <class T>
void upsample_forward(const T* x, const Geom& g, const Window& f, T* y) {
  std::vector<T> a(x, x + g.numel()), b;
  Geom cur = g;
  if (f.w == 2) {
    b.resize(static_cast<std::size_t>(cur.numel() * 2));
    upsample_axis(a.data(), cur.c * cur.d * cur.h, cur.w, 1, b.data());
    cur.w *= 2;
    a.swap(b);
  }
  if (f.h == 2) {
    b.resize(static_cast<std::size_t>(cur.numel() * 2));
    upsample_axis(a.data(), cur.c * cur.d, cur.h, cur.w, b.data());
    cur.h *= 2;
    a.swap(b);
  }
  if (f.d == 2) {
    b.resize(static_cast<std::size_t>(cur.numel() * 2));
    upsample_axis(a.data(), cur.c, cur.d, cur.h * cur.w, b.data());
    cur.d *= 2;
    a.swap(b);
  }
  std::copy(a.begin(), a.begin() + cur.numel(), y);
}

// Transpose of upsample_forward; g is the (small) input geometry.
template <class T>
void upsample_backward(const T* dy, const Geom& g, const Window& f, T* dx) {
  Geom cur{g.c, g.d * f.d, g.h * f.h, g.w * f.w};
  std::vector<T> a(dy, dy + cur.numel()), b;
  if (f.d == 2) {
    cur.d /= 2;
    b.resize(static_cast<std::size_t>(cur.numel()));
    upsample_axis_transpose(a.data(), cur.c, cur.d, cur.h * cur.w, b.data());
    a.swap(b);
  }
  if (f.h == 2) {
    cur.h /= 2;
    b.resize(static_cast<std::size_t>(cur.numel()));
    upsample_axis_transpose(a.data(), cur.c * cur.d, cur.h, cur.w, b.data());
    a.swap(b);
  }
  if (f.w == 2) {
    cur.w /= 2;
    b.resize(static_cast<std::size_t>(cur.numel()));
    upsample_axis_transpose(a.data(), cur.c * cur.d * cur.h, cur.w, 1, b.data());
    a.swap(b);
  }
  for (std::int64_t i = 0; i < cur.numel(); ++i) dx[i] += a[static_cast<std::size_t>(i)];
}

}  // namespace overseg::kernels
