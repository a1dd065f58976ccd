#pragma once

// Finite-difference verification of the autograd ops, run in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "overseg/autograd.hpp"
#include "overseg/tensor.hpp"

namespace overseg {

struct GradcheckReport {
  std::string name;
  double max_rel_err = 0;
  std::int64_t coords_checked = 0;
  bool pass = false;
};

struct GradcheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  // Inputs with more elements than this are checked on a seeded random subset
  // of this many coordinates.
  std::int64_t max_coords_per_input = 128;
};

using DTensor = BasicTensor<double>;
using GradcheckFn = std::function<ag::Var<double>(ag::Tape<double>&, const std::vector<ag::Var<double>>&)>;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares analytic gradients of `fn` against central differences for every
/// input. A non-scalar output is reduced with fixed random weights first.
inline GradcheckReport gradcheck(const std::string& name, const GradcheckFn& fn, const std::vector<DTensor>& inputs,
                                 std::uint64_t seed, const GradcheckOptions& opt = {}) {
  Rng rng(seed);
  DTensor reduce_weights;

  auto evaluate = [&](const std::vector<DTensor>& xs, bool with_grad, std::vector<DTensor>* grads) {
    ag::Tape<double> tape;
    std::vector<ag::Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x, with_grad));
    auto out = fn(tape, vars);
    if (out.value().numel() != 1) {
      if (reduce_weights.empty()) reduce_weights = random_uniform<double>(out.shape(), rng, -1.0, 1.0);
      out = ag::weighted_sum(out, reduce_weights);
    }
    const double v = out.value()[0];
    if (with_grad) {
      tape.backward(out);
      for (const auto& var : vars) grads->push_back(tape.grad(var));
    }
    return v;
  };

  std::vector<DTensor> analytic;
  evaluate(inputs, true, &analytic);

  GradcheckReport rep{name, 0.0, 0, true};
  auto xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::int64_t n = xs[k].numel();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > opt.max_coords_per_input) {
      for (std::int64_t i = 0; i < opt.max_coords_per_input; ++i)
        std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(rng.uniform_int(i, n - 1))]);
      coords.resize(static_cast<std::size_t>(opt.max_coords_per_input));
    }
    for (auto c : coords) {
      const double orig = xs[k][c];
      xs[k][c] = orig + opt.step;
      const double fp = evaluate(xs, false, nullptr);
      xs[k][c] = orig - opt.step;
      const double fm = evaluate(xs, false, nullptr);
      xs[k][c] = orig;
      const double numeric = (fp - fm) / (2 * opt.step);
      rep.max_rel_err = std::max(rep.max_rel_err, relative_error(analytic[k][c], numeric));
      ++rep.coords_checked;
    }
  }
  rep.pass = rep.max_rel_err <= opt.tolerance;
  return rep;
}

namespace detail {

// Values with |x| >= margin, so perturbations of size < margin never cross 0.
inline DTensor away_from_zero(Shape s, Rng& rng, double margin) {
  DTensor t(std::move(s));
  for (auto& v : t.data()) {
    const double mag = rng.uniform(margin, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

// Random values where each 2x pooling window has a unique maximum that beats
// the runner-up by at least `margin`.
inline DTensor pool_friendly(Shape s, Rng& rng, double margin) {
  DTensor t = random_uniform<double>(s, rng, -1.0, 1.0);
  const auto g = kernels::geom_of(s);
  const int fd = s.rank() == 4 ? 2 : 1;
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t d = 0; d < g.d; d += fd)
      for (std::int64_t h = 0; h < g.h; h += 2)
        for (std::int64_t w = 0; w < g.w; w += 2) {
          std::vector<std::int64_t> idx;
          for (int a = 0; a < fd; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) idx.push_back(((c * g.d + d + a) * g.h + h + b) * g.w + w + e);
          double top = -1e9;
          for (auto i : idx) top = std::max(top, t[i]);
          const auto win = idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(idx.size()) - 1))];
          t[win] = top + margin + rng.uniform(0.0, 0.5);
        }
  return t;
}

inline DTensor binary_mask(Shape s, Rng& rng) {
  DTensor t(std::move(s));
  for (auto& v : t.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return t;
}

}  // namespace detail

/// Every differentiable op of the engine, each on small seeded inputs.
inline std::vector<GradcheckReport> gradcheck_suite(std::uint64_t seed, const GradcheckOptions& opt = {}) {
  using V = ag::Var<double>;
  using Vs = std::vector<V>;
  Rng rng(seed);
  std::vector<GradcheckReport> out;
  auto run = [&](const std::string& name, const GradcheckFn& fn, std::vector<DTensor> inputs) {
    out.push_back(gradcheck(name, fn, inputs, rng.next_u64(), opt));
  };
  auto uni = [&](Shape s) { return random_uniform<double>(std::move(s), rng, -1.0, 1.0); };

  run("conv2d", [](ag::Tape<double>&, const Vs& v) { return ag::conv(v[0], v[1], v[2]); },
      {uni({2, 5, 5}), uni({3, 2, 3, 3}), uni({3})});
  run("conv2d_1x1", [](ag::Tape<double>&, const Vs& v) { return ag::conv(v[0], v[1], v[2]); },
      {uni({4, 4, 4}), uni({2, 4, 1, 1}), uni({2})});
  run("conv3d", [](ag::Tape<double>&, const Vs& v) { return ag::conv(v[0], v[1], v[2]); },
      {uni({2, 3, 4, 4}), uni({2, 2, 3, 3, 3}), uni({2})});
  run("maxpool2d", [](ag::Tape<double>&, const Vs& v) { return ag::maxpool2(v[0]); },
      {detail::pool_friendly({3, 8, 8}, rng, 0.1)});
  run("maxpool3d", [](ag::Tape<double>&, const Vs& v) { return ag::maxpool2(v[0]); },
      {detail::pool_friendly({2, 4, 4, 4}, rng, 0.1)});
  run("upsample_bilinear", [](ag::Tape<double>&, const Vs& v) { return ag::upsample2(v[0]); }, {uni({2, 4, 5})});
  run("upsample_trilinear", [](ag::Tape<double>&, const Vs& v) { return ag::upsample2(v[0]); },
      {uni({2, 3, 3, 4})});
  run("relu", [](ag::Tape<double>&, const Vs& v) { return ag::relu(v[0]); },
      {detail::away_from_zero({2, 6, 6}, rng, 0.1)});
  run("sigmoid", [](ag::Tape<double>&, const Vs& v) { return ag::sigmoid(v[0]); }, {uni({2, 5, 5})});
  run("softmax_channels", [](ag::Tape<double>&, const Vs& v) { return ag::softmax_channels(v[0]); },
      {uni({4, 3, 3})});
  run("add", [](ag::Tape<double>&, const Vs& v) { return ag::add(v[0], v[1]); }, {uni({2, 4, 4}), uni({2, 4, 4})});
  run("concat_channels", [](ag::Tape<double>&, const Vs& v) { return ag::concat_channels(v[0], v[1]); },
      {uni({2, 4, 4}), uni({3, 4, 4})});
  {
    auto target = detail::binary_mask({1, 4, 4}, rng);
    run("bce_loss", [target](ag::Tape<double>&, const Vs& v) { return ag::bce_loss(v[0], target); },
        {random_uniform<double>({1, 4, 4}, rng, 0.05, 0.95)});
    run("bce_logits_loss", [target](ag::Tape<double>&, const Vs& v) { return ag::bce_logits_loss(v[0], target); },
        {uni({1, 4, 4})});
  }
  {
    DTensor target({3, 4, 4});
    for (auto& v : target.data()) v = static_cast<double>(rng.uniform_int(0, 3));
    run("ce_loss", [target](ag::Tape<double>&, const Vs& v) { return ag::ce_loss(v[0], target); },
        {uni({4, 3, 4, 4})});
  }
  return out;
}

}  // namespace overseg
