#pragma once

// Overlap and surface-distance metrics for binary masks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "overseg/error.hpp"
#include "overseg/tensor.hpp"

namespace overseg {

/// Dense binary mask over spatial axes only.
struct Mask {
  std::vector<std::int64_t> dims;
  std::vector<std::uint8_t> v;

  Mask() = default;
  explicit Mask(std::vector<std::int64_t> d) : dims(std::move(d)) {
    std::int64_t n = 1;
    for (auto x : dims) n *= x;
    v.assign(static_cast<std::size_t>(n), 0);
  }
  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto x : v) n += x;
    return n;
  }
  bool empty_set() const { return count() == 0; }
};

/// Voxels equal to `label` (or > 0.5 when label < 0). A leading singleton
/// channel axis is dropped when requested.
inline Mask mask_from_tensor(const Tensor& t, bool drop_channel, int label = -1) {
  std::vector<std::int64_t> dims(t.shape().dims().begin(), t.shape().dims().end());
  if (drop_channel) {
    if (dims.size() < 2 || dims[0] != 1) throw ShapeError("expected a leading channel of 1, got " + t.shape().str());
    dims.erase(dims.begin());
  }
  Mask m(dims);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    m.v[static_cast<std::size_t>(i)] = label < 0 ? (t[i] > 0.5f) : (t[i] == static_cast<float>(label));
  return m;
}

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline void check_same_dims(const Mask& a, const Mask& b) {
  if (a.dims != b.dims) {
    auto s = [](const Mask& m) {
      std::string r = "[";
      for (std::size_t i = 0; i < m.dims.size(); ++i) r += (i ? "," : "") + std::to_string(m.dims[i]);
      return r + "]";
    };
    throw ValidationError("mask shapes differ: " + s(a) + " vs " + s(b));
  }
}

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  check_same_dims(pred, gt);
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i], g = gt.v[i];
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

struct MetricsReport {
  double dice = 0, jaccard = 0, voe = 0, fnr = 0, fpr = 0;
  double hausdorff95 = 0, assd = 0, msd = 0;
  bool pred_empty = false, gt_empty = false;
  // Distances are the diagonal sentinel rather than measured values.
  bool sentinel() const { return pred_empty != gt_empty; }
};

inline double safe_ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

/// Dice, Jaccard, VOE, FNR, FPR. Both empty counts as perfect agreement, one
/// empty as none.
inline MetricsReport overlap_metrics(const Mask& pred, const Mask& gt) {
  const auto c = confusion(pred, gt);
  MetricsReport r;
  r.pred_empty = c.tp + c.fp == 0;
  r.gt_empty = c.tp + c.fn == 0;
  if (r.pred_empty && r.gt_empty) {
    r.dice = r.jaccard = 1.0;
  } else {
    r.dice = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    r.jaccard = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
  }
  r.voe = 1.0 - r.jaccard;
  r.fnr = safe_ratio(c.fn, c.tp + c.fn);
  r.fpr = safe_ratio(c.fp, c.fp + c.tn);
  return r;
}

namespace detail {

inline std::vector<std::int64_t> strides_of(const std::vector<std::int64_t>& dims) {
  std::vector<std::int64_t> s(dims.size(), 1);
  for (std::size_t a = dims.size(); a-- > 1;) s[a - 1] = s[a] * dims[a];
  return s;
}

}  // namespace detail

/// Foreground voxels with at least one face neighbour that is background or
/// outside the grid.
inline Mask surface(const Mask& m) {
  Mask out(m.dims);
  const auto st = detail::strides_of(m.dims);
  const std::size_t nd = m.dims.size();
  std::vector<std::int64_t> idx(nd, 0);
  for (std::int64_t flat = 0; flat < m.size(); ++flat) {
    std::int64_t r = flat;
    for (std::size_t a = nd; a-- > 0;) {
      idx[a] = r % m.dims[a];
      r /= m.dims[a];
    }
    if (!m.v[static_cast<std::size_t>(flat)]) continue;
    bool edge = false;
    for (std::size_t a = 0; a < nd && !edge; ++a) {
      if (idx[a] == 0 || idx[a] == m.dims[a] - 1) edge = true;
      else edge = !m.v[static_cast<std::size_t>(flat - st[a])] || !m.v[static_cast<std::size_t>(flat + st[a])];
    }
    out.v[static_cast<std::size_t>(flat)] = edge;
  }
  return out;
}

namespace detail {

// One pass of the lower envelope of parabolas (Felzenszwalb & Huttenlocher)
// along a line with sample spacing h. f holds squared distances, inf for none.
inline void edt_line(const std::vector<double>& f, double h, std::vector<double>& d, std::vector<std::int64_t>& v,
                     std::vector<double>& z) {
  const auto n = static_cast<std::int64_t>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  auto at = [](auto& vec, std::int64_t i) -> auto& { return vec[static_cast<std::size_t>(i)]; };
  // crossing point, in index units, of the parabolas rooted at p and q
  auto cross = [&](std::int64_t p, std::int64_t q) {
    const double fp = at(f, p) + (p * h) * (p * h);
    const double fq = at(f, q) + (q * h) * (q * h);
    return (fq - fp) / (2.0 * h * h * static_cast<double>(q - p));
  };
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (at(f, q) == inf) continue;
    double s = -inf;
    while (k >= 0) {
      s = cross(at(v, k), q);
      if (s <= at(z, k)) --k;
      else break;
    }
    ++k;
    at(v, k) = q;
    at(z, k) = k == 0 ? -inf : s;
    at(z, k + 1) = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (at(z, j + 1) < static_cast<double>(q)) ++j;
    const auto p = at(v, j);
    const double dq = static_cast<double>(q - p) * h;
    at(d, q) = dq * dq + at(f, p);
  }
}

}  // namespace detail

/// Squared Euclidean distance from every voxel to the nearest set voxel of
/// `sites`, with per-axis spacing. Exact: separable parabola envelopes.
inline std::vector<double> squared_distance_transform(const Mask& sites, const std::vector<double>& spacing) {
  const std::size_t nd = sites.dims.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(sites.v.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites.v[i] ? 0.0 : inf;
  const auto st = detail::strides_of(sites.dims);
  for (std::size_t a = 0; a < nd; ++a) {
    const auto n = sites.dims[a];
    std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n) + 1);
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    const std::int64_t lines = sites.size() / n;
    for (std::int64_t line = 0; line < lines; ++line) {
      // base offset of this line: enumerate all indices with axis a fixed at 0
      std::int64_t rem = line, base = 0;
      for (std::size_t b = nd; b-- > 0;) {
        if (b == a) continue;
        base += (rem % sites.dims[b]) * st[b];
        rem /= sites.dims[b];
      }
      for (std::int64_t i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(base + i * st[a])];
      detail::edt_line(f, spacing[a], d, v, z);
      for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(base + i * st[a])] = d[static_cast<std::size_t>(i)];
    }
  }
  return g;
}

/// Distances from each surface voxel of `from` to the surface of `to`.
inline std::vector<double> directed_surface_distances(const Mask& from, const Mask& to, const std::vector<double>& spacing) {
  const auto sf = surface(from);
  const auto d2 = squared_distance_transform(surface(to), spacing);
  std::vector<double> out;
  for (std::size_t i = 0; i < sf.v.size(); ++i)
    if (sf.v[i]) out.push_back(std::sqrt(d2[i]));
  return out;
}

/// Inclusive linear-interpolation percentile of an ascending sequence.
inline double percentile_sorted(const std::vector<double>& s, double q) {
  if (s.empty()) throw ValidationError("percentile of empty set");
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return s[lo] + frac * (s[hi] - s[lo]);
}

inline double volume_diagonal(const std::vector<std::int64_t>& dims, const std::vector<double>& spacing) {
  double s = 0;
  for (std::size_t a = 0; a < dims.size(); ++a) s += std::pow(static_cast<double>(dims[a]) * spacing[a], 2);
  return std::sqrt(s);
}

/// Fills hausdorff95 / assd / msd on an existing report.
inline void surface_distance_metrics(const Mask& pred, const Mask& gt, const std::vector<double>& spacing,
                                     MetricsReport& r) {
  check_same_dims(pred, gt);
  if (spacing.size() != pred.dims.size()) throw ValidationError("spacing needs one entry per spatial axis");
  for (auto s : spacing)
    if (!(s > 0)) throw ValidationError("spacing must be positive");
  r.pred_empty = pred.empty_set();
  r.gt_empty = gt.empty_set();
  if (r.pred_empty && r.gt_empty) {
    r.hausdorff95 = r.assd = r.msd = 0;
    return;
  }
  if (r.pred_empty || r.gt_empty) {
    r.hausdorff95 = r.assd = r.msd = volume_diagonal(pred.dims, spacing);
    return;
  }
  auto d = directed_surface_distances(pred, gt, spacing);
  const auto back = directed_surface_distances(gt, pred, spacing);
  d.insert(d.end(), back.begin(), back.end());
  std::sort(d.begin(), d.end());
  double sum = 0;
  for (auto x : d) sum += x;
  r.assd = sum / static_cast<double>(d.size());
  r.msd = d.back();
  r.hausdorff95 = percentile_sorted(d, 0.95);
}

inline MetricsReport compute_metrics(const Mask& pred, const Mask& gt, const std::vector<double>& spacing) {
  auto r = overlap_metrics(pred, gt);
  surface_distance_metrics(pred, gt, spacing, r);
  return r;
}

inline MetricsReport compute_metrics(const Mask& pred, const Mask& gt) {
  return compute_metrics(pred, gt, std::vector<double>(pred.dims.size(), 1.0));
}

inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

inline const char* kMetricsHeader = "id,dice,jaccard,voe,fnr,fpr,hausdorff95,assd,msd,pred_empty,gt_empty";

inline std::string metrics_row(const std::string& id, const MetricsReport& r) {
  return id + "," + fmt_real(r.dice) + "," + fmt_real(r.jaccard) + "," + fmt_real(r.voe) + "," + fmt_real(r.fnr) +
         "," + fmt_real(r.fpr) + "," + fmt_real(r.hausdorff95) + "," + fmt_real(r.assd) + "," + fmt_real(r.msd) +
         "," + (r.pred_empty ? "1" : "0") + "," + (r.gt_empty ? "1" : "0");
}

struct MetricsAggregate {
  MetricsReport mean;
  std::int64_t rows = 0;
  std::int64_t excluded = 0;  // sentinel rows left out of the distance means
};

/// Mean over rows. Overlap scores use every row; distances skip sentinel rows.
inline MetricsAggregate aggregate(const std::vector<MetricsReport>& rows) {
  MetricsAggregate a;
  a.rows = static_cast<std::int64_t>(rows.size());
  std::int64_t nd = 0;
  for (const auto& r : rows) {
    a.mean.dice += r.dice;
    a.mean.jaccard += r.jaccard;
    a.mean.voe += r.voe;
    a.mean.fnr += r.fnr;
    a.mean.fpr += r.fpr;
    if (r.sentinel()) {
      ++a.excluded;
      continue;
    }
    a.mean.hausdorff95 += r.hausdorff95;
    a.mean.assd += r.assd;
    a.mean.msd += r.msd;
    ++nd;
  }
  if (a.rows > 0) {
    const auto n = static_cast<double>(a.rows);
    a.mean.dice /= n;
    a.mean.jaccard /= n;
    a.mean.voe /= n;
    a.mean.fnr /= n;
    a.mean.fpr /= n;
  }
  if (nd > 0) {
    a.mean.hausdorff95 /= static_cast<double>(nd);
    a.mean.assd /= static_cast<double>(nd);
    a.mean.msd /= static_cast<double>(nd);
  }
  return a;
}

}  // namespace overseg
