#pragma once

// Synthetic small-structure segmentation data, manifests, loading with
// reflective padding, and connected-component bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "overseg/error.hpp"
#include "overseg/io.hpp"
#include "overseg/metrics.hpp"
#include "overseg/tensor.hpp"

namespace overseg {

struct GenParams {
  int dims = 2;
  std::int64_t size = 64;   // H = W
  std::int64_t depth = 16;  // D for 3D
  std::int64_t n_train = 8;
  std::int64_t n_test = 2;
  std::uint64_t seed = 0;
  double large_prob = 1.0;  // chance of one large ellipse
  int small_min = 0;
  int small_max = 4;
  double blur_sigma = 0.7;
  double speckle = 0.2;
  double background = 0.2;  // intensity outside structures
  double foreground = 0.8;
  bool multiclass = false;     // ids 0 background, 1 large, 2 small
  bool allow_empty = false;    // otherwise resample until some foreground exists

  int small_radius_max() const { return dims == 2 ? 3 : 2; }
  void validate() const {
    std::vector<std::string> bad;
    if (dims != 2 && dims != 3) bad.push_back("dims must be 2 or 3");
    if (size < 8 || size % 8 != 0) bad.push_back("size must be a positive multiple of 8, got " + std::to_string(size));
    if (dims == 3 && (depth < 8 || depth % 8 != 0))
      bad.push_back("depth must be a positive multiple of 8, got " + std::to_string(depth));
    if (n_train < 0 || n_test < 0 || n_train + n_test < 1) bad.push_back("need at least one sample");
    if (small_min < 0 || small_max > 4 || small_min > small_max) bad.push_back("small shapes must lie in 0..4");
    if (large_prob < 0 || large_prob > 1) bad.push_back("large_prob must lie in [0,1]");
    if (blur_sigma < 0 || speckle < 0) bad.push_back("blur and speckle must be non-negative");
    if (!bad.empty()) {
      std::string msg = "invalid generator parameters:";
      for (const auto& b : bad) msg += "\n  - " + b;
      throw ValidationError(msg);
    }
  }
};

inline std::int64_t small_threshold(int dims) { return dims == 2 ? 30 : 100; }

struct Component {
  std::int64_t label;  // class id the component belongs to
  std::int64_t area;
  std::vector<std::int64_t> lo, hi;  // inclusive bounding box
  std::vector<std::int64_t> voxels;  // flat indices
};

/// Face-connected components of every nonzero id, in scan order.
inline std::vector<Component> connected_components(const std::vector<std::int64_t>& dims,
                                                   const std::vector<std::int64_t>& ids) {
  const auto st = detail::strides_of(dims);
  const std::size_t nd = dims.size();
  std::vector<std::uint8_t> seen(ids.size(), 0);
  std::vector<Component> out;
  std::vector<std::int64_t> stack;
  auto coord = [&](std::int64_t flat, std::size_t a) { return (flat / st[a]) % dims[a]; };
  for (std::int64_t s = 0; s < static_cast<std::int64_t>(ids.size()); ++s) {
    const auto lab = ids[static_cast<std::size_t>(s)];
    if (lab == 0 || seen[static_cast<std::size_t>(s)]) continue;
    Component c{lab, 0, std::vector<std::int64_t>(nd), std::vector<std::int64_t>(nd), {}};
    for (std::size_t a = 0; a < nd; ++a) c.lo[a] = c.hi[a] = coord(s, a);
    seen[static_cast<std::size_t>(s)] = 1;
    stack.assign(1, s);
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      c.voxels.push_back(p);
      for (std::size_t a = 0; a < nd; ++a) {
        const auto x = coord(p, a);
        c.lo[a] = std::min(c.lo[a], x);
        c.hi[a] = std::max(c.hi[a], x);
        for (int d : {-1, 1}) {
          if ((d < 0 && x == 0) || (d > 0 && x == dims[a] - 1)) continue;
          const auto q = p + d * st[a];
          if (!seen[static_cast<std::size_t>(q)] && ids[static_cast<std::size_t>(q)] == lab) {
            seen[static_cast<std::size_t>(q)] = 1;
            stack.push_back(q);
          }
        }
      }
    }
    c.area = static_cast<std::int64_t>(c.voxels.size());
    std::sort(c.voxels.begin(), c.voxels.end());
    out.push_back(std::move(c));
  }
  return out;
}

struct SampleMeta {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> small_areas;  // components at or below the threshold
  std::int64_t large_count = 0;
  std::vector<std::int64_t> orig_dims;  // spatial dims before padding
  std::vector<std::int64_t> pad;        // trailing pad per spatial axis
};

struct SampleRecord {
  Tensor image;  // [1, spatial...]
  Tensor mask;   // [1, spatial...] of class ids
  std::string split;
  SampleMeta meta;
};

inline std::vector<std::int64_t> spatial_dims(const Tensor& t) {
  return {t.shape().dims().begin() + 1, t.shape().dims().end()};
}

inline std::vector<std::int64_t> mask_ids(const Tensor& mask) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(mask.numel()));
  for (std::int64_t i = 0; i < mask.numel(); ++i) ids[static_cast<std::size_t>(i)] = std::llround(mask[i]);
  return ids;
}

/// Component statistics of a [1, spatial...] mask.
inline void fill_component_meta(const Tensor& mask, int dims, SampleMeta& meta) {
  meta.small_areas.clear();
  meta.large_count = 0;
  for (const auto& c : connected_components(spatial_dims(mask), mask_ids(mask))) {
    if (c.area <= small_threshold(dims)) meta.small_areas.push_back(c.area);
    else ++meta.large_count;
  }
}

/// Region where small-structure metrics are measured: bounding boxes of the
/// small ground-truth components grown by `margin`, minus every large
/// component. Empty when the sample has no small structures.
inline Mask small_structure_region(const Tensor& gt_mask, int dims, std::int64_t margin = 3) {
  const auto sd = spatial_dims(gt_mask);
  const auto comps = connected_components(sd, mask_ids(gt_mask));
  Mask region(sd);
  const auto st = detail::strides_of(sd);
  const std::size_t nd = sd.size();
  for (const auto& c : comps) {
    if (c.area > small_threshold(dims)) continue;
    std::vector<std::int64_t> lo(nd), hi(nd), idx(nd);
    std::int64_t count = 1;
    for (std::size_t a = 0; a < nd; ++a) {
      lo[a] = std::max<std::int64_t>(0, c.lo[a] - margin);
      hi[a] = std::min<std::int64_t>(sd[a] - 1, c.hi[a] + margin);
      count *= hi[a] - lo[a] + 1;
    }
    for (std::int64_t k = 0; k < count; ++k) {
      std::int64_t r = k, flat = 0;
      for (std::size_t a = nd; a-- > 0;) {
        const auto ext = hi[a] - lo[a] + 1;
        flat += (lo[a] + r % ext) * st[a];
        r /= ext;
      }
      region.v[static_cast<std::size_t>(flat)] = 1;
    }
  }
  for (const auto& c : comps)
    if (c.area > small_threshold(dims))
      for (auto v : c.voxels) region.v[static_cast<std::size_t>(v)] = 0;
  return region;
}

inline Mask restrict_mask(const Mask& m, const Mask& region) {
  check_same_dims(m, region);
  Mask out(m.dims);
  for (std::size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] && region.v[i];
  return out;
}

namespace detail {

// Separable Gaussian with clamped borders, applied in place.
inline void gaussian_blur(std::vector<double>& v, const std::vector<std::int64_t>& dims, double sigma) {
  if (sigma <= 0) return;
  const auto r = static_cast<std::int64_t>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (std::int64_t i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= s;
  const auto st = strides_of(dims);
  std::vector<double> tmp(v.size());
  for (std::size_t a = 0; a < dims.size(); ++a) {
    for (std::int64_t flat = 0; flat < static_cast<std::int64_t>(v.size()); ++flat) {
      const auto x = (flat / st[a]) % dims[a];
      double acc = 0;
      for (std::int64_t i = -r; i <= r; ++i) {
        const auto y = std::clamp<std::int64_t>(x + i, 0, dims[a] - 1);
        acc += k[static_cast<std::size_t>(i + r)] * v[static_cast<std::size_t>(flat + (y - x) * st[a])];
      }
      tmp[static_cast<std::size_t>(flat)] = acc;
    }
    v.swap(tmp);
  }
}

inline std::string pad_id(std::int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04lld", static_cast<long long>(i));
  return buf;
}

}  // namespace detail

/// One sample: optional large ellipse (ellipsoid) with full axes 20-40% of the
/// size, then 0-4 small discs (balls) that keep a one-voxel gap from every
/// other structure. Image = blurred intensity map times speckle, clamped.
inline SampleRecord generate_sample(const GenParams& gp, std::int64_t index) {
  const Rng base(gp.seed);
  Rng rng = base.derive(static_cast<std::uint64_t>(index));
  std::vector<std::int64_t> sd;
  if (gp.dims == 3) sd.push_back(gp.depth);
  sd.push_back(gp.size);
  sd.push_back(gp.size);
  const std::size_t nd = sd.size();
  const auto st = detail::strides_of(sd);
  std::int64_t total = 1;
  for (auto d : sd) total *= d;

  std::vector<std::int64_t> ids;
  for (int attempt = 0;; ++attempt) {
    ids.assign(static_cast<std::size_t>(total), 0);
    auto coord = [&](std::int64_t flat, std::size_t a) { return (flat / st[a]) % sd[a]; };
    if (rng.bernoulli(gp.large_prob)) {
      std::vector<double> centre(nd), semi(nd);
      for (std::size_t a = 0; a < nd; ++a) {
        semi[a] = 0.5 * rng.uniform(0.2, 0.4) * static_cast<double>(sd[a]);
        centre[a] = rng.uniform(semi[a] + 1, static_cast<double>(sd[a]) - semi[a] - 2);
      }
      for (std::int64_t f = 0; f < total; ++f) {
        double q = 0;
        for (std::size_t a = 0; a < nd; ++a) q += std::pow((static_cast<double>(coord(f, a)) - centre[a]) / semi[a], 2);
        if (q <= 1.0) ids[static_cast<std::size_t>(f)] = 1;
      }
    }
    const auto n_small = rng.uniform_int(gp.small_min, gp.small_max);
    for (std::int64_t s = 0; s < n_small; ++s) {
      for (int tries = 0; tries < 200; ++tries) {
        const auto rad = rng.uniform_int(1, gp.small_radius_max());
        std::vector<std::int64_t> c(nd);
        for (std::size_t a = 0; a < nd; ++a) c[a] = rng.uniform_int(rad + 1, sd[a] - rad - 2);
        // ball of radius rad, plus a one-voxel clearance shell
        std::vector<std::int64_t> cells;
        bool clash = false;
        std::vector<std::int64_t> off(nd, -(rad + 1));
        while (true) {
          double r2 = 0;
          std::int64_t flat = 0;
          for (std::size_t a = 0; a < nd; ++a) {
            r2 += static_cast<double>(off[a] * off[a]);
            flat += (c[a] + off[a]) * st[a];
          }
          if (r2 <= static_cast<double>((rad + 1) * (rad + 1)) && ids[static_cast<std::size_t>(flat)] != 0) clash = true;
          if (r2 <= static_cast<double>(rad * rad)) cells.push_back(flat);
          std::size_t a = nd;
          while (a-- > 0) {
            if (++off[a] <= rad + 1) break;
            off[a] = -(rad + 1);
          }
          if (a == static_cast<std::size_t>(-1)) break;
        }
        if (clash) continue;
        for (auto f : cells) ids[static_cast<std::size_t>(f)] = 2;
        break;
      }
    }
    bool any = false;
    for (auto v : ids) any = any || v != 0;
    if (any || gp.allow_empty || attempt >= 100) break;
  }

  std::vector<double> intensity(static_cast<std::size_t>(total));
  for (std::size_t i = 0; i < intensity.size(); ++i) intensity[i] = ids[i] != 0 ? 1.0 : 0.0;
  detail::gaussian_blur(intensity, sd, gp.blur_sigma);

  std::vector<std::int64_t> full{1};
  full.insert(full.end(), sd.begin(), sd.end());
  SampleRecord rec{Tensor(Shape(full)), Tensor(Shape(full)), "", {}};
  for (std::int64_t i = 0; i < total; ++i) {
    const auto u = static_cast<std::size_t>(i);
    double v = gp.background + (gp.foreground - gp.background) * intensity[u];
    if (gp.speckle > 0) v *= 1.0 + gp.speckle * rng.normal();
    rec.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    const auto id = gp.multiclass ? ids[u] : (ids[u] != 0 ? 1 : 0);
    rec.mask[i] = static_cast<float>(id);
  }
  rec.split = index < gp.n_train ? "train" : "test";
  rec.meta.id = detail::pad_id(index);
  rec.meta.seed = gp.seed;
  rec.meta.orig_dims = sd;
  rec.meta.pad.assign(nd, 0);
  fill_component_meta(rec.mask, gp.dims, rec.meta);
  return rec;
}

inline std::string gen_params_echo(const GenParams& gp) {
  std::ostringstream os;
  os << "# dims=" << gp.dims << "\n# size=" << gp.size << "\n";
  if (gp.dims == 3) os << "# depth=" << gp.depth << "\n";
  os << "# n_train=" << gp.n_train << "\n# n_test=" << gp.n_test << "\n# seed=" << gp.seed
     << "\n# large_prob=" << fmt_real(gp.large_prob) << "\n# small_min=" << gp.small_min
     << "\n# small_max=" << gp.small_max << "\n# blur_sigma=" << fmt_real(gp.blur_sigma)
     << "\n# speckle=" << fmt_real(gp.speckle) << "\n# background=" << fmt_real(gp.background)
     << "\n# foreground=" << fmt_real(gp.foreground) << "\n# multiclass=" << (gp.multiclass ? 1 : 0)
     << "\n# allow_empty=" << (gp.allow_empty ? 1 : 0) << "\n";
  return os.str();
}

/// Writes images/, masks/ and manifest.tsv under `root`. Returns the manifest path.
inline std::filesystem::path generate_synthetic(const GenParams& gp, const std::filesystem::path& root) {
  gp.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << gen_params_echo(gp);
  for (std::int64_t i = 0; i < gp.n_train + gp.n_test; ++i) {
    const auto rec = generate_sample(gp, i);
    const auto img = "images/" + rec.meta.id + ".kiut";
    const auto msk = "masks/" + rec.meta.id + ".kiut";
    save_tensor(rec.image, root / img);
    save_tensor(rec.mask, root / msk);
    manifest << rec.meta.id << "\t" << img << "\t" << msk << "\t" << rec.split << "\n";
  }
  const auto path = root / "manifest.tsv";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << manifest.str();
  if (!os) throw IoError("write failed for " + path.string());
  return path;
}

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path mask;
  std::string split;
};

struct Manifest {
  std::filesystem::path root;
  std::map<std::string, std::string> params;  // from the '#' echo lines
  std::vector<ManifestEntry> entries;
};

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        auto key = line.substr(1, eq - 1);
        key.erase(0, key.find_first_not_of(' '));
        m.params[key] = line.substr(eq + 1);
      }
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, '\t')) f.push_back(item);
    if (f.size() != 4)
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields, got " +
                            std::to_string(f.size()));
    m.entries.push_back({f[0], m.root / f[1], m.root / f[2], f[3]});
  }
  return m;
}

/// Reflect (edge excluded) each spatial axis up to a multiple of `divisor`,
/// padding at the trailing end.
inline Tensor reflect_pad(const Tensor& t, const std::vector<std::int64_t>& pad) {
  const auto sd = spatial_dims(t);
  std::vector<std::int64_t> out_dims{t.shape()[0]};
  for (std::size_t a = 0; a < sd.size(); ++a) {
    if (pad[a] >= sd[a] && pad[a] > 0)
      throw ShapeError("cannot reflect-pad axis of " + std::to_string(sd[a]) + " by " + std::to_string(pad[a]));
    out_dims.push_back(sd[a] + pad[a]);
  }
  Tensor out{Shape(out_dims)};
  const auto in_st = detail::strides_of(std::vector<std::int64_t>(t.shape().dims().begin(), t.shape().dims().end()));
  const auto out_st = detail::strides_of(out_dims);
  for (std::int64_t f = 0; f < out.numel(); ++f) {
    std::int64_t src = (f / out_st[0]) * in_st[0];
    for (std::size_t a = 0; a < sd.size(); ++a) {
      auto x = (f / out_st[a + 1]) % out_dims[a + 1];
      if (x >= sd[a]) x = 2 * (sd[a] - 1) - x;
      src += x * in_st[a + 1];
    }
    out[f] = t[src];
  }
  return out;
}

/// Inverse of reflect_pad: keeps the leading `dims` along each spatial axis.
inline Tensor crop_to(const Tensor& t, const std::vector<std::int64_t>& dims) {
  std::vector<std::int64_t> out_dims{t.shape()[0]};
  out_dims.insert(out_dims.end(), dims.begin(), dims.end());
  Tensor out{Shape(out_dims)};
  const auto in_st = detail::strides_of(std::vector<std::int64_t>(t.shape().dims().begin(), t.shape().dims().end()));
  const auto out_st = detail::strides_of(out_dims);
  for (std::int64_t f = 0; f < out.numel(); ++f) {
    std::int64_t src = 0;
    for (std::size_t a = 0; a < out_dims.size(); ++a) src += ((f / out_st[a]) % out_dims[a]) * in_st[a];
    out[f] = t[src];
  }
  return out;
}

inline std::vector<std::int64_t> pad_for(const std::vector<std::int64_t>& dims, std::int64_t divisor) {
  std::vector<std::int64_t> p;
  for (auto d : dims) p.push_back((divisor - d % divisor) % divisor);
  return p;
}

/// Loads entries of the given split ("" for all) in manifest order. Images
/// and masks are padded to `divisor`; the padding is kept in meta.
inline std::vector<SampleRecord> load_dataset(const std::filesystem::path& manifest_path, const std::string& split,
                                              std::int64_t divisor) {
  const auto m = read_manifest(manifest_path);
  std::vector<SampleRecord> out;
  for (const auto& e : m.entries) {
    if (!split.empty() && e.split != split) continue;
    SampleRecord r;
    try {
      r.image = load_tensor(e.image);
      r.mask = load_tensor(e.mask);
    } catch (const Error& err) {
      if (err.kind() == ErrorKind::Format) throw FormatError("entry " + e.id + ": " + err.what());
      throw IoError("entry " + e.id + ": " + err.what());
    }
    if (!(r.image.shape() == r.mask.shape()))
      throw ValidationError("entry " + e.id + ": image " + r.image.shape().str() + " vs mask " +
                            r.mask.shape().str());
    const int dims = static_cast<int>(r.image.shape().rank()) - 1;
    if ((dims != 2 && dims != 3) || r.image.shape()[0] != 1)
      throw ValidationError("entry " + e.id + ": expected [1,H,W] or [1,D,H,W], got " + r.image.shape().str());
    r.split = e.split;
    r.meta.id = e.id;
    if (auto it = m.params.find("seed"); it != m.params.end()) r.meta.seed = std::stoull(it->second);
    r.meta.orig_dims = spatial_dims(r.image);
    r.meta.pad = pad_for(r.meta.orig_dims, divisor);
    fill_component_meta(r.mask, dims, r.meta);
    r.image = reflect_pad(r.image, r.meta.pad);
    r.mask = reflect_pad(r.mask, r.meta.pad);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace overseg
