#pragma once

// Batch-1 training loop, evaluation and prediction over loaded datasets.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "overseg/data.hpp"
#include "overseg/io.hpp"
#include "overseg/metrics.hpp"
#include "overseg/nn.hpp"

namespace overseg {

struct TrainOptions {
  std::int64_t epochs = 300;
  std::optional<double> lr;  // unset picks 1e-3 for 2D and 1e-4 for 3D
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 keeps only the final checkpoint
  std::int64_t patience = 20;         // epochs without improvement before stopping
  double min_delta = 1e-5;
  double target_dice = 0;  // stop once mean val dice exceeds this; 0 disables
  bool write_plot = true;

  double effective_lr(int dims) const { return lr ? *lr : (dims == 3 ? 1e-4 : 1e-3); }
  void validate() const {
    std::vector<std::string> bad;
    if (epochs < 1) bad.push_back("epochs must be >= 1");
    if (lr && !(*lr >= 0)) bad.push_back("lr must be non-negative");
    if (checkpoint_every < 0) bad.push_back("checkpoint_every must be >= 0");
    if (patience < 1) bad.push_back("patience must be >= 1");
    if (!bad.empty()) {
      std::string msg = "invalid training options:";
      for (const auto& b : bad) msg += "\n  - " + b;
      throw ValidationError(msg);
    }
  }
};

struct EpochRow {
  std::int64_t epoch;
  double train_loss;
  double val_dice;
  double seconds;
};

struct TrainResult {
  Model model;
  std::vector<EpochRow> rows;
  std::string stop_reason;  // "budget", "converged", "target"
};

/// Hard prediction cropped back to the sample's original extent, as [1, spatial...] ids.
inline Tensor predict_labels(const Model& m, const SampleRecord& s) {
  const auto out = predict(m, s.image);
  const auto sd = spatial_dims(out);
  std::vector<std::int64_t> one{1};
  one.insert(one.end(), sd.begin(), sd.end());
  Tensor labels{Shape(one)};
  const std::int64_t C = out.shape()[0];
  const std::int64_t S = labels.numel();
  for (std::int64_t i = 0; i < S; ++i) {
    if (C == 1) {
      labels[i] = out[i] > 0.5f ? 1.0f : 0.0f;
      continue;
    }
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (out[c * S + i] > out[best * S + i]) best = c;
    labels[i] = static_cast<float>(best);
  }
  return crop_to(labels, s.meta.orig_dims);
}

// Foreground (any nonzero id) masks of a prediction and the cropped ground truth.
inline std::pair<Mask, Mask> foreground_pair(const Tensor& pred_labels, const SampleRecord& s) {
  const auto gt = crop_to(s.mask, s.meta.orig_dims);
  Mask p = mask_from_tensor(pred_labels, true);
  Mask g = mask_from_tensor(gt, true);
  // ids >= 1 all count as foreground
  for (std::int64_t i = 0; i < gt.numel(); ++i) {
    p.v[static_cast<std::size_t>(i)] = pred_labels[i] >= 0.5f;
    g.v[static_cast<std::size_t>(i)] = gt[i] >= 0.5f;
  }
  return {p, g};
}

inline double mean_dice(const Model& m, const std::vector<SampleRecord>& samples) {
  if (samples.empty()) return 0;
  double s = 0;
  for (const auto& r : samples) {
    const auto [p, g] = foreground_pair(predict_labels(m, r), r);
    s += overlap_metrics(p, g).dice;
  }
  return s / static_cast<double>(samples.size());
}

inline std::string log_csv(const std::vector<EpochRow>& rows) {
  std::string s = "epoch,train_loss,val_dice\n";
  for (const auto& r : rows) s += std::to_string(r.epoch) + "," + fmt_real(r.train_loss) + "," + fmt_real(r.val_dice) + "\n";
  return s;
}

inline std::string timing_csv(const std::vector<EpochRow>& rows) {
  std::string s = "epoch,seconds\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.3f\n", static_cast<long long>(r.epoch), r.seconds);
    s += buf;
  }
  return s;
}

/// Polyline of train loss against epoch with labelled axes.
inline std::string loss_curve_svg(const std::vector<EpochRow>& rows) {
  const double W = 640, H = 400, L = 70, R = 20, T = 20, B = 50;
  double lo = 0, hi = 1;
  if (!rows.empty()) {
    lo = hi = rows[0].train_loss;
    for (const auto& r : rows) {
      lo = std::min(lo, r.train_loss);
      hi = std::max(hi, r.train_loss);
    }
    if (hi - lo < 1e-12) hi = lo + 1;
  }
  const double n = std::max<double>(1, static_cast<double>(rows.size()) - 1);
  auto px = [&](std::size_t i) { return L + (W - L - R) * static_cast<double>(i) / n; };
  auto py = [&](double v) { return T + (H - T - B) * (1 - (v - lo) / (hi - lo)); };
  std::ostringstream os;
  char buf[160];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<path d=\"M%.1f %.1f V%.1f H%.1f\" stroke=\"black\" fill=\"none\"/>\n", L, T, H - B,
                W - R);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\">%.4g</text>\n", L - 4,
                T + 4, hi);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\">%.4g</text>\n", L - 4,
                H - B, lo);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n",
                (L + W - R) / 2, H - 15);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"15\" y=\"%.1f\" font-size=\"12\" transform=\"rotate(-90 15 %.1f)\" "
                "text-anchor=\"middle\">train loss</text>\n",
                (T + H - B) / 2, (T + H - B) / 2);
  os << buf;
  os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(i), py(rows[i].train_loss));
    os << buf;
  }
  os << "\"/>\n</svg>\n";
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << s;
  if (!os) throw IoError("write failed for " + p.string());
}

/// Per-sample Adam (batch 1). Binary heads use BCE computed from the logits,
/// multi-class heads use softmax cross-entropy. `val` may be empty, in which
/// case the training samples are scored instead. Artifacts go to `out` when
/// it is non-empty.
inline TrainResult train(const ModelConfig& cfg, const TrainOptions& opt, const std::vector<SampleRecord>& train_set,
                         const std::vector<SampleRecord>& val_set, const std::filesystem::path& out,
                         const std::function<void(const EpochRow&)>& on_epoch = {}) {
  cfg.validate();
  opt.validate();
  if (train_set.empty()) throw ValidationError("training split is empty");
  for (const auto& s : train_set)
    if (s.image.shape()[0] != cfg.in_channels)
      throw ValidationError("sample " + s.meta.id + " has " + std::to_string(s.image.shape()[0]) +
                            " channels, config expects " + std::to_string(cfg.in_channels));
  if (!out.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  }
  const auto& scored = val_set.empty() ? train_set : val_set;
  const double lr = opt.effective_lr(cfg.dims);

  Rng rng(opt.seed);
  TrainResult res{build_model(cfg, rng), {}, "budget"};
  AdamState adam;
  std::vector<std::size_t> order(train_set.size());
  double best = std::numeric_limits<double>::infinity();
  std::int64_t stale = 0;

  for (std::int64_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = Rng(opt.seed).derive(0x5EED0000ULL + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    double loss_sum = 0;
    for (auto idx : order) {
      const auto& s = train_set[idx];
      ag::Tape<float> tape;
      const auto p = bind_params(tape, res.model.params, true);
      const auto z = forward_logits(cfg, p, tape.leaf(s.image));
      const auto loss = cfg.sigmoid_head() ? ag::bce_logits_loss(z, s.mask) : ag::ce_loss(z, s.mask);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " sample " + s.meta.id);
      tape.backward(loss);
      adam_step(res.model.params, tape.param_grads(), adam, lr);
      loss_sum += lv;
    }
    const double mean_loss = loss_sum / static_cast<double>(train_set.size());
    const double dice = mean_dice(res.model, scored);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.rows.push_back({epoch, mean_loss, dice, secs});
    if (on_epoch) on_epoch(res.rows.back());

    if (!out.empty() && opt.checkpoint_every > 0 && epoch % opt.checkpoint_every == 0)
      save_checkpoint(res.model.params.items(), out / ("epoch" + std::to_string(epoch) + ".kiuc"));

    if (mean_loss < best - opt.min_delta) {
      best = mean_loss;
      stale = 0;
    } else if (++stale >= opt.patience) {
      res.stop_reason = "converged";
      break;
    }
    if (opt.target_dice > 0 && dice > opt.target_dice) {
      res.stop_reason = "target";
      break;
    }
  }

  if (!out.empty()) {
    save_checkpoint(res.model.params.items(), out / "final.kiuc");
    write_text(out / "log.csv", log_csv(res.rows));
    write_text(out / "timing.csv", timing_csv(res.rows));
    write_text(out / "config.txt", format_model_config(cfg));
    if (opt.write_plot) write_text(out / "loss_curve.svg", loss_curve_svg(res.rows));
  }
  return res;
}

struct EvalResult {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::vector<std::pair<std::string, MetricsReport>> small_rows;  // small-structure region only
  MetricsAggregate all;
  MetricsAggregate small;
};

inline std::string aggregate_row(const std::string& id, const MetricsAggregate& a) {
  auto r = a.mean;
  r.pred_empty = r.gt_empty = false;
  auto s = metrics_row(id, r);
  // the two flag columns become row and exclusion counts
  s.resize(s.rfind(',', s.rfind(',') - 1));
  return s + "," + std::to_string(a.rows) + "," + std::to_string(a.excluded);
}

/// Per-sample metrics on foreground masks, plus the same metrics restricted
/// to the small-structure region of each sample that has one.
inline EvalResult evaluate(const Model& m, const std::vector<SampleRecord>& samples, const std::vector<double>& spacing = {}) {
  EvalResult er;
  std::vector<MetricsReport> all, small;
  for (const auto& s : samples) {
    const auto pl = predict_labels(m, s);
    const auto [p, g] = foreground_pair(pl, s);
    const auto sp = spacing.empty() ? std::vector<double>(p.dims.size(), 1.0) : spacing;
    const auto r = compute_metrics(p, g, sp);
    er.rows.emplace_back(s.meta.id, r);
    all.push_back(r);
    if (s.meta.small_areas.empty()) continue;
    const int dims = static_cast<int>(p.dims.size());
    const auto region = small_structure_region(crop_to(s.mask, s.meta.orig_dims), dims);
    const auto rs = compute_metrics(restrict_mask(p, region), restrict_mask(g, region), sp);
    er.small_rows.emplace_back(s.meta.id, rs);
    small.push_back(rs);
  }
  er.all = aggregate(all);
  er.small = aggregate(small);
  return er;
}

inline std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                               const MetricsAggregate& agg) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& [id, r] : rows) s += metrics_row(id, r) + "\n";
  s += aggregate_row("mean", agg) + "\n";
  return s;
}

}  // namespace overseg
