#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "overseg/overseg.hpp"

using namespace overseg;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

int exit_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Numeric: return kNumeric;
    case ErrorKind::Io:
    case ErrorKind::Format: return kIo;
    default: return kUsage;
  }
}

struct ModelFlags {
  std::string config;
  std::string variant;
  std::optional<int> levels;
  std::string channels;
  std::optional<int> dims;
  std::optional<int> num_classes;

  void add(CLI::App* app) {
    app->add_option("--config", config, "model config file (key=value lines)");
    app->add_option("--variant", variant, "override the variant: " + valid_variant_list());
    app->add_option("--levels", levels, "override the level count");
    app->add_option("--channels", channels, "override channels, comma separated");
    app->add_option("--dims", dims, "override spatial dims (2 or 3)");
    app->add_option("--num-classes", num_classes, "override the class count");
  }

  ModelConfig resolve() const {
    ModelConfig c = config.empty() ? ModelConfig{} : load_model_config(config);
    if (!variant.empty()) c.variant = parse_variant(variant);
    if (dims) c.dims = *dims;
    if (num_classes) c.num_classes = *num_classes;
    if (levels) {
      c.levels = *levels;
      if (channels.empty()) {
        c.channels.clear();
        for (int i = 0; i < c.levels; ++i) c.channels.push_back(std::int64_t{32} << i);
      }
    }
    if (!channels.empty()) c.channels = parse_int_list(channels);
    c.validate();
    return c;
  }
};

Model load_model(const ModelConfig& cfg, const std::string& checkpoint) {
  return Model{cfg, params_from_checkpoint(cfg, load_checkpoint(checkpoint))};
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

void print_rf_table(std::ostream& os, const RFRecord& rec, const std::string& branch) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-7s %-16s %8s %10s %12s\n", "branch", "layer", "jump", "rf_exact", "paper_approx");
  os << buf;
  for (const auto& r : rec) {
    std::snprintf(buf, sizeof buf, "%-7s %-16s %8s %10s %12s\n", branch.c_str(), r.id.c_str(), r.jump.str().c_str(),
                  r.rf.str().c_str(), r.paper_approx.str().c_str());
    os << buf;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"overseg: overcomplete/undercomplete segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a seeded synthetic dataset and manifest");
  GenParams gp;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gp.seed, "generator seed");
  gen->add_option("--dims", gp.dims, "2 or 3")->capture_default_str();
  gen->add_option("--size", gp.size, "height and width")->capture_default_str();
  gen->add_option("--depth", gp.depth, "depth for 3D")->capture_default_str();
  gen->add_option("--n-train", gp.n_train)->capture_default_str();
  gen->add_option("--n-test", gp.n_test)->capture_default_str();
  gen->add_option("--large-prob", gp.large_prob)->capture_default_str();
  gen->add_option("--small-min", gp.small_min)->capture_default_str();
  gen->add_option("--small-max", gp.small_max)->capture_default_str();
  gen->add_option("--blur", gp.blur_sigma, "Gaussian blur sigma")->capture_default_str();
  gen->add_option("--speckle", gp.speckle, "multiplicative speckle level")->capture_default_str();
  gen->add_flag("--multiclass", gp.multiclass, "ids 0 background, 1 large, 2 small");
  gen->add_flag("--allow-empty", gp.allow_empty);

  // train
  auto* tr = app.add_subcommand("train", "train a model with batch size 1");
  ModelFlags tr_model;
  tr_model.add(tr);
  std::string tr_manifest, tr_out, tr_split = "train", tr_val = "test";
  TrainOptions topt;
  std::optional<double> tr_lr;
  tr->add_option("--manifest", tr_manifest)->required();
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--epochs", topt.epochs)->capture_default_str();
  tr->add_option("--lr", tr_lr, "learning rate (default 1e-3 for 2D, 1e-4 for 3D)");
  tr->add_option("--checkpoint-every", topt.checkpoint_every)->capture_default_str();
  tr->add_option("--patience", topt.patience, "stop after this many epochs without loss improvement")
      ->capture_default_str();
  tr->add_option("--target-dice", topt.target_dice, "stop once mean val dice exceeds this (0 disables)");
  tr->add_option("--train-split", tr_split)->capture_default_str();
  tr->add_option("--val-split", tr_val, "split scored each epoch; empty or missing falls back to the training split")
      ->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "per-sample metrics CSV for a checkpoint");
  ModelFlags ev_model;
  ev_model.add(ev);
  std::string ev_ckpt, ev_manifest, ev_out, ev_split = "test";
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--split", ev_split, "split to score; empty for all")->capture_default_str();

  // predict
  auto* pr = app.add_subcommand("predict", "write predicted label maps");
  ModelFlags pr_model;
  pr_model.add(pr);
  std::string pr_ckpt, pr_manifest, pr_input, pr_out, pr_split;
  pr->add_option("--checkpoint", pr_ckpt)->required();
  auto* pr_m = pr->add_option("--manifest", pr_manifest);
  auto* pr_i = pr->add_option("--input", pr_input, "single KIUT image");
  pr_m->excludes(pr_i);
  pr->add_option("--split", pr_split, "manifest split; empty for all");
  pr->add_option("--out", pr_out)->required();

  // analyze-rf
  auto* rf = app.add_subcommand("analyze-rf", "receptive field per encoder layer");
  ModelFlags rf_model;
  rf_model.add(rf);
  std::int64_t rf_k = 3;
  bool rf_probe = false;
  rf->add_option("--kernel", rf_k, "conv kernel extent")->capture_default_str();
  rf->add_flag("--empirical", rf_probe, "also measure the gradient-support box of the deepest layer");

  // param-count
  auto* pc = app.add_subcommand("param-count", "analytic parameter count");
  ModelFlags pc_model;
  pc_model.add(pc);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every autograd op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      if (gen->count("--seed") == 0) gp.seed = seed;
      const auto path = generate_synthetic(gp, gen_out);
      std::cout << "wrote " << gp.n_train + gp.n_test << " samples, manifest " << path.string() << "\n";
      return kOk;
    }

    if (tr->parsed()) {
      const auto cfg = tr_model.resolve();
      topt.seed = app.count("--seed") ? seed : cfg.seed;
      topt.lr = tr_lr;
      const auto train_set = load_dataset(tr_manifest, tr_split, cfg.divisor());
      const auto val_set = tr_val.empty() ? std::vector<SampleRecord>{} : load_dataset(tr_manifest, tr_val, cfg.divisor());
      const auto res = train(cfg, topt, train_set, val_set, tr_out, [](const EpochRow& r) {
        std::printf("epoch %lld loss %.6f val_dice %.4f (%.1fs)\n", static_cast<long long>(r.epoch), r.train_loss,
                    r.val_dice, r.seconds);
        std::fflush(stdout);
      });
      std::cout << "stopped: " << res.stop_reason << " after " << res.rows.size() << " epochs\n"
                << "final checkpoint " << (fs::path(tr_out) / "final.kiuc").string() << "\n";
      return kOk;
    }

    if (ev->parsed()) {
      const auto cfg = ev_model.resolve();
      const auto model = load_model(cfg, ev_ckpt);
      const auto samples = load_dataset(ev_manifest, ev_split, cfg.divisor());
      const auto res = evaluate(model, samples);
      ensure_dir(ev_out);
      write_text(fs::path(ev_out) / "metrics.csv", metrics_csv(res.rows, res.all));
      write_text(fs::path(ev_out) / "small_metrics.csv", metrics_csv(res.small_rows, res.small));
      std::printf("samples %lld  mean dice %.6f  jaccard %.6f  hd95 %.4f  (%lld sentinel rows excluded)\n",
                  static_cast<long long>(res.all.rows), res.all.mean.dice, res.all.mean.jaccard,
                  res.all.mean.hausdorff95, static_cast<long long>(res.all.excluded));
      std::printf("small-structure subset: samples %lld  mean dice %.6f\n", static_cast<long long>(res.small.rows),
                  res.small.mean.dice);
      return kOk;
    }

    if (pr->parsed()) {
      const auto cfg = pr_model.resolve();
      const auto model = load_model(cfg, pr_ckpt);
      ensure_dir(pr_out);
      std::vector<SampleRecord> samples;
      if (!pr_input.empty()) {
        SampleRecord r;
        r.image = load_tensor(pr_input);
        r.meta.id = fs::path(pr_input).stem().string();
        r.meta.orig_dims = spatial_dims(r.image);
        r.meta.pad = pad_for(r.meta.orig_dims, cfg.divisor());
        r.image = reflect_pad(r.image, r.meta.pad);
        samples.push_back(std::move(r));
      } else if (!pr_manifest.empty()) {
        samples = load_dataset(pr_manifest, pr_split, cfg.divisor());
      } else {
        throw ValidationError("predict needs --manifest or --input");
      }
      for (const auto& s : samples) {
        const auto path = fs::path(pr_out) / (s.meta.id + "_pred.kiut");
        save_tensor(predict_labels(model, s), path);
        std::cout << path.string() << "\n";
      }
      return kOk;
    }

    if (rf->parsed()) {
      const auto cfg = rf_model.resolve();
      if (rf_k < 1 || rf_k % 2 == 0) throw ValidationError("--kernel must be odd and positive");
      std::cout << "variant " << variant_name(cfg.variant) << ", " << cfg.levels << " levels, k=" << rf_k
                << " (paper_approx = k*4^(i-1) under, k/4^(i-1) over)\n";
      for (auto [on, mode, name] : {std::tuple{cfg.has_under(), RFMode::Under, "under"},
                                    std::tuple{cfg.has_over(), RFMode::Over, "over"}}) {
        if (!on) continue;
        const auto stack = encoder_stack(cfg.levels, mode, rf_k);
        const auto rec = rf_exact(stack, mode, rf_k);
        print_rf_table(std::cout, rec, name);
        if (rf_probe) {
          // big enough that the deepest window stays inside the input
          const auto span = rec.back().rf.ceil() + 4;
          std::int64_t side;
          std::int64_t probe;
          if (mode == RFMode::Under) {
            side = std::max<std::int64_t>(span * 2, cfg.divisor() * 4);
            side += (cfg.divisor() - side % cfg.divisor()) % cfg.divisor();
            probe = side / cfg.divisor() / 2;
          } else {
            side = std::max<std::int64_t>(span * 2, 16);
            probe = side * cfg.divisor() / 2;
          }
          std::vector<std::int64_t> dims(static_cast<std::size_t>(cfg.dims), side);
          const auto box = rf_empirical(stack, Shape(dims), std::vector<std::int64_t>(dims.size(), probe), seed);
          std::cout << name << " empirical box extent:";
          for (auto e : box.extent()) std::cout << " " << e;
          std::cout << " (ceil rf_exact " << rec.back().rf.ceil() << ")\n";
        }
      }
      return kOk;
    }

    if (pc->parsed()) {
      const auto cfg = pc_model.resolve();
      const auto pb = param_count(cfg);
      std::cout << "variant " << variant_name(cfg.variant) << " channels";
      for (auto c : cfg.channels) std::cout << " " << c;
      std::cout << "\n";
      for (const auto& [group, n] : pb.rows) std::printf("  %-14s %12lld\n", group.c_str(), static_cast<long long>(n));
      std::printf("total %lld\n", static_cast<long long>(pb.total));
      auto with = [&](Variant v) {
        auto c = cfg;
        c.variant = v;
        return param_count(c).total;
      };
      std::printf("same channels: UC_SK %lld, KIUNET %lld\n", static_cast<long long>(with(Variant::UC_SK)),
                  static_cast<long long>(with(Variant::KIUNET)));
      std::cout << "reference totals: SegNet 12.5M, U-Net 3.1M, U-Net++ 9.0M, KiU-Net 0.29M\n";
      return kOk;
    }

    if (gc->parsed()) {
      const auto reports = gradcheck_suite(seed);
      bool ok = true;
      for (const auto& r : reports) {
        std::printf("%-22s max_rel_err %.3e coords %6lld %s\n", r.name.c_str(), r.max_rel_err,
                    static_cast<long long>(r.coords_checked), r.pass ? "ok" : "FAIL");
        ok = ok && r.pass;
      }
      std::cout << (ok ? "all ops pass\n" : "gradcheck failed\n");
      return ok ? kOk : kNumeric;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
