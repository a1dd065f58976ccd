#pragma once

// Two-branch segmentation models. The under branch shrinks resolution in the
// encoder (maxpool) and grows it back in the decoder; the over branch does the
// opposite. Variants switch branches, skips, cross-branch fusion and block type.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "overseg/autograd.hpp"
#include "overseg/error.hpp"
#include "overseg/io.hpp"
#include "overseg/tensor.hpp"

namespace overseg {

enum class Variant { UC, OC, UC_SK, OC_SK, UC_OC_SK, KIUNET, RES_KIUNET, DENSE_KIUNET };

inline constexpr std::array<std::pair<Variant, const char*>, 8> kVariantNames{{
    {Variant::UC, "UC"},
    {Variant::OC, "OC"},
    {Variant::UC_SK, "UC_SK"},
    {Variant::OC_SK, "OC_SK"},
    {Variant::UC_OC_SK, "UC_OC_SK"},
    {Variant::KIUNET, "KIUNET"},
    {Variant::RES_KIUNET, "RES_KIUNET"},
    {Variant::DENSE_KIUNET, "DENSE_KIUNET"},
}};

inline std::string variant_name(Variant v) {
  for (const auto& [k, n] : kVariantNames)
    if (k == v) return n;
  return "?";
}

inline std::string valid_variant_list() {
  std::string s;
  for (const auto& [k, n] : kVariantNames) s += (s.empty() ? "" : ", ") + std::string(n);
  return s;
}

inline Variant parse_variant(const std::string& name) {
  for (const auto& [k, n] : kVariantNames)
    if (name == n) return k;
  throw ValidationError("unknown variant '" + name + "'; valid variants: " + valid_variant_list());
}

enum class BlockKind { Plain, Residual, Dense };

struct ModelConfig {
  int dims = 2;
  Variant variant = Variant::KIUNET;
  int levels = 3;
  std::vector<std::int64_t> channels{32, 64, 128};
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 1;
  std::uint64_t seed = 0;

  bool has_under() const { return variant != Variant::OC && variant != Variant::OC_SK; }
  bool has_over() const { return variant != Variant::UC && variant != Variant::UC_SK; }
  bool skips() const { return variant != Variant::UC && variant != Variant::OC; }
  bool crfb_enabled() const {
    return variant == Variant::KIUNET || variant == Variant::RES_KIUNET || variant == Variant::DENSE_KIUNET;
  }
  BlockKind block_kind() const {
    if (variant == Variant::RES_KIUNET) return BlockKind::Residual;
    if (variant == Variant::DENSE_KIUNET) return BlockKind::Dense;
    return BlockKind::Plain;
  }
  // Binary heads end in a sigmoid, multi-class heads emit logits.
  bool sigmoid_head() const { return num_classes == 1; }
  std::int64_t divisor() const { return std::int64_t{1} << levels; }

  void validate() const {
    std::vector<std::string> bad;
    if (dims != 2 && dims != 3) bad.push_back("dims must be 2 or 3");
    if (levels < 1 || levels > 6) bad.push_back("levels must be in [1,6]");
    if (static_cast<int>(channels.size()) != levels)
      bad.push_back("length(channels)=" + std::to_string(channels.size()) + " must equal levels=" +
                    std::to_string(levels));
    for (auto c : channels)
      if (c < 1) bad.push_back("channels must be positive");
    if (block_kind() == BlockKind::Dense)
      for (auto c : channels)
        if (c % 4 != 0) bad.push_back("dense blocks need channels divisible by 4, got " + std::to_string(c));
    if (in_channels < 1) bad.push_back("in_channels must be positive");
    if (num_classes < 1) bad.push_back("num_classes must be positive");
    if (!bad.empty()) {
      std::string msg = "invalid model config:";
      for (const auto& b : bad) msg += "\n  - " + b;
      throw ValidationError(msg);
    }
  }
};

inline std::vector<std::int64_t> parse_int_list(const std::string& s) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      throw ValidationError("not an integer list: '" + s + "'");
    }
    if (item.find_first_not_of(" \t", pos) != std::string::npos)
      throw ValidationError("not an integer list: '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError("empty integer list");
  return out;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// key=value lines; '#' starts a comment. Unknown keys are rejected so typos
// do not silently fall back to defaults.
inline ModelConfig parse_model_config(std::istream& in, const std::string& origin = "<config>") {
  ModelConfig cfg;
  std::string line;
  int lineno = 0;
  bool channels_given = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    const auto key = trim(line.substr(0, eq));
    const auto val = trim(line.substr(eq + 1));
    try {
      if (key == "dims") cfg.dims = static_cast<int>(std::stoi(val));
      else if (key == "variant") cfg.variant = parse_variant(val);
      else if (key == "levels") cfg.levels = static_cast<int>(std::stoi(val));
      else if (key == "channels") {
        cfg.channels = parse_int_list(val);
        channels_given = true;
      } else if (key == "in_channels") cfg.in_channels = std::stoll(val);
      else if (key == "num_classes") cfg.num_classes = std::stoll(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else throw ValidationError("unknown key '" + key + "'");
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception&) {
      throw ValidationError(origin + ":" + std::to_string(lineno) + ": bad value for " + key + ": '" + val + "'");
    }
  }
  // levels without channels: keep the doubling schedule from 32.
  if (!channels_given && cfg.levels != 3) {
    cfg.channels.clear();
    for (int i = 0; i < cfg.levels; ++i) cfg.channels.push_back(std::int64_t{32} << i);
  }
  cfg.validate();
  return cfg;
}

inline ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_model_config(in, path.string());
}

inline std::string format_model_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "dims=" << cfg.dims << "\nvariant=" << variant_name(cfg.variant) << "\nlevels=" << cfg.levels
     << "\nchannels=";
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) os << (i ? "," : "") << cfg.channels[i];
  os << "\nin_channels=" << cfg.in_channels << "\nnum_classes=" << cfg.num_classes << "\nseed=" << cfg.seed
     << "\n";
  return os.str();
}

enum class Role { Encoder, Decoder };
enum class Branch { Under, Over };
enum class Resample { MaxPool2, Upsample2 };

struct BlockSpec {
  Role role;
  Branch branch;
  int level;  // 1-based
  Resample resample;
  std::int64_t cin;
  std::int64_t cout;

  std::string prefix() const {
    return std::string(branch == Branch::Under ? "u" : "k") + (role == Role::Encoder ? ".enc" : ".dec") +
           std::to_string(level);
  }
};

inline Resample resample_for(Role role, Branch branch) {
  const bool down = (role == Role::Encoder) == (branch == Branch::Under);
  return down ? Resample::MaxPool2 : Resample::Upsample2;
}

// Encoder level i: ch[i-2] (or in_channels) -> ch[i-1]. Decoder level 1 keeps
// the deepest width, then each level steps back one width.
inline std::vector<BlockSpec> branch_blocks(const ModelConfig& cfg, Branch branch) {
  std::vector<BlockSpec> out;
  const auto& ch = cfg.channels;
  const int L = cfg.levels;
  for (int i = 1; i <= L; ++i)
    out.push_back({Role::Encoder, branch, i, resample_for(Role::Encoder, branch),
                   i == 1 ? cfg.in_channels : ch[static_cast<std::size_t>(i - 2)], ch[static_cast<std::size_t>(i - 1)]});
  for (int j = 1; j <= L; ++j) {
    const auto cin = ch[static_cast<std::size_t>(j == 1 ? L - 1 : L - j + 1)];
    const auto cout = ch[static_cast<std::size_t>(L - j)];
    out.push_back({Role::Decoder, branch, j, resample_for(Role::Decoder, branch), cin, cout});
  }
  return out;
}

struct ParamSpec {
  std::string name;
  Shape shape;
  std::int64_t fan_in;
};

namespace detail {

inline Shape conv_weight_shape(int dims, std::int64_t cout, std::int64_t cin, std::int64_t k) {
  return dims == 2 ? Shape{cout, cin, k, k} : Shape{cout, cin, k, k, k};
}

inline void add_conv(std::vector<ParamSpec>& out, const std::string& name, int dims, std::int64_t cin,
                     std::int64_t cout, std::int64_t k = 3) {
  const std::int64_t kvol = dims == 2 ? k * k : k * k * k;
  out.push_back({name + ".w", conv_weight_shape(dims, cout, cin, k), kvol * cin});
  out.push_back({name + ".b", Shape{cout}, kvol * cin});
}

}  // namespace detail

inline std::string level_tag(Role role, int level) {
  return (role == Role::Encoder ? "enc" : "dec") + std::to_string(level);
}

// Every parameter of the model in a fixed order. This order is the checkpoint
// order and the Adam state order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  std::vector<Branch> branches;
  if (cfg.has_under()) branches.push_back(Branch::Under);
  if (cfg.has_over()) branches.push_back(Branch::Over);
  for (auto br : branches) {
    for (const auto& b : branch_blocks(cfg, br)) {
      const auto p = b.prefix();
      detail::add_conv(out, p + ".conv", cfg.dims, b.cin, b.cout);
      if (cfg.block_kind() == BlockKind::Residual) detail::add_conv(out, p + ".res", cfg.dims, b.cout, b.cout);
      if (cfg.block_kind() == BlockKind::Dense) {
        const auto g = b.cout / 4;
        for (int m = 0; m < 4; ++m)
          detail::add_conv(out, p + ".dense" + std::to_string(m + 1), cfg.dims, b.cout + m * g, g);
      }
    }
  }
  if (cfg.crfb_enabled()) {
    for (auto role : {Role::Encoder, Role::Decoder})
      for (const auto& b : branch_blocks(cfg, Branch::Under))
        if (b.role == role) {
          const auto p = "crfb." + level_tag(role, b.level);
          detail::add_conv(out, p + ".k2u", cfg.dims, b.cout, b.cout);
          detail::add_conv(out, p + ".u2k", cfg.dims, b.cout, b.cout);
        }
  }
  detail::add_conv(out, "head", cfg.dims, cfg.channels[0], cfg.num_classes, 1);
  return out;
}

/// Named parameter tensors in the fixed order of param_specs.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(NamedTensors items) : items_(std::move(items)) { reindex(); }

  const NamedTensors& items() const { return items_; }
  NamedTensors& items() { return items_; }
  std::size_t size() const { return items_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const { return items_[lookup(name)].second; }
  Tensor& at(const std::string& name) { return items_[lookup(name)].second; }

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& [k, t] : items_) n += t.numel();
    return n;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.items_ == b.items_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no parameter named '" + name + "'");
    return it->second;
  }
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (!index_.emplace(items_[i].first, i).second)
        throw ValidationError("duplicate parameter name '" + items_[i].first + "'");
  }

  NamedTensors items_;
  std::map<std::string, std::size_t> index_;
};

inline double init_limit(std::int64_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

// Weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero. Each tensor draws
// from its own derived stream so adding a layer does not reshuffle the rest.
inline ParameterSet init_params(const ModelConfig& cfg, Rng& rng) {
  NamedTensors items;
  std::uint64_t stream = 0;
  for (const auto& s : param_specs(cfg)) {
    Rng r = rng.derive(stream++);
    const bool bias = s.name.size() >= 2 && s.name.compare(s.name.size() - 2, 2, ".b") == 0;
    if (bias) {
      items.emplace_back(s.name, Tensor(s.shape));
    } else {
      const double lim = init_limit(s.fan_in);
      items.emplace_back(s.name, random_uniform(s.shape, r, -lim, lim));
    }
  }
  return ParameterSet(std::move(items));
}

// Checks a loaded checkpoint against the config and reports every missing,
// extra or misshapen tensor at once.
inline ParameterSet params_from_checkpoint(const ModelConfig& cfg, NamedTensors loaded) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [k, t] : loaded) by_name[k] = &t;
  std::vector<std::string> missing, extra, misshapen;
  NamedTensors ordered;
  std::map<std::string, bool> expected;
  for (const auto& s : param_specs(cfg)) {
    expected[s.name] = true;
    auto it = by_name.find(s.name);
    if (it == by_name.end()) {
      missing.push_back(s.name);
      continue;
    }
    if (!(it->second->shape() == s.shape))
      misshapen.push_back(s.name + " " + it->second->shape().str() + " (want " + s.shape.str() + ")");
    ordered.emplace_back(s.name, *it->second);
  }
  for (const auto& [k, t] : loaded)
    if (!expected.count(k)) extra.push_back(k);
  if (!missing.empty() || !extra.empty() || !misshapen.empty()) {
    std::string msg = "checkpoint does not match model config";
    auto list = [&](const char* what, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string("\n  ") + what + ":";
      for (const auto& s : v) msg += " " + s;
    };
    list("missing", missing);
    list("extra", extra);
    list("wrong shape", misshapen);
    throw ValidationError(msg);
  }
  return ParameterSet(std::move(ordered));
}

struct Model {
  ModelConfig cfg;
  ParameterSet params;
};

inline Model build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  return Model{cfg, init_params(cfg, rng)};
}

/// One row of a per-layer shape trace.
struct LayerTrace {
  std::string branch;  // "under" | "over"
  std::string block;   // "Encoder" | "Decoder"
  std::string layer;   // "Conv1", "MaxPooling", "Upsampling", "ReLU"
  Shape in;
  Shape out;
};

template <class T>
using BoundParams = std::map<std::string, ag::Var<T>>;

// Puts the parameters on a tape. Trainable ones show up in param_grads().
template <class T>
BoundParams<T> bind_params(ag::Tape<T>& tape, const ParameterSet& ps, bool trainable) {
  BoundParams<T> out;
  for (const auto& [name, t] : ps.items()) {
    auto v = t.template cast<T>();
    out.emplace(name, trainable ? tape.param(name, std::move(v)) : tape.leaf(std::move(v)));
  }
  return out;
}

namespace detail {

template <class T>
ag::Var<T> conv_named(const BoundParams<T>& p, const std::string& name, const ag::Var<T>& x) {
  auto w = p.find(name + ".w");
  auto b = p.find(name + ".b");
  if (w == p.end() || b == p.end()) throw ValidationError("missing parameter " + name);
  return ag::conv(x, w->second, b->second);
}

template <class T>
ag::Var<T> resample(const ag::Var<T>& x, Resample r) {
  return r == Resample::MaxPool2 ? ag::maxpool2(x) : ag::upsample2(x);
}

inline int exact_log4(std::int64_t ratio) {
  int k = 0;
  while (ratio > 1 && ratio % 4 == 0) {
    ratio /= 4;
    ++k;
  }
  return ratio == 1 ? k : -1;
}

}  // namespace detail

/// y = x + F(x) where F is one channel-preserving conv.
template <class T>
ag::Var<T> residual_block(const ag::Var<T>& x, const BoundParams<T>& p, const std::string& name) {
  return ag::add(x, detail::conv_named(p, name, x));
}

/// Four convs of k/4 maps; each sees the block input and every earlier output.
/// The four outputs are concatenated back to k maps and added to the input.
template <class T>
ag::Var<T> dense_block(const ag::Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  const auto k = x.shape()[0];
  if (k % 4 != 0) throw ValidationError("dense block needs channels divisible by 4, got " + std::to_string(k));
  std::vector<ag::Var<T>> feats{x};
  std::vector<ag::Var<T>> outs;
  for (int m = 0; m < 4; ++m) {
    auto in = feats.size() == 1 ? feats[0] : ag::concat_channels(feats);
    auto o = ag::relu(detail::conv_named(p, prefix + std::to_string(m + 1), in));
    feats.push_back(o);
    outs.push_back(o);
  }
  return ag::add(x, ag::concat_channels(outs));
}

/// Cross-branch fusion. fki sits 4^i times finer than fu along every spatial
/// axis; each direction is a channel-preserving conv followed by 2i factor-2
/// resampling stages, then added onto the other branch.
template <class T>
std::pair<ag::Var<T>, ag::Var<T>> crfb(const ag::Var<T>& fu, const ag::Var<T>& fki, const BoundParams<T>& p,
                                       const std::string& prefix) {
  const Shape su = fu.shape();
  const Shape sk = fki.shape();
  if (su.rank() != sk.rank() || su[0] != sk[0])
    throw ShapeError("crfb inputs " + su.str() + " and " + sk.str() + " need equal rank and channels");
  std::int64_t ratio = 0;
  for (std::size_t a = 1; a < su.rank(); ++a) {
    if (sk[a] % su[a] != 0 || (ratio != 0 && sk[a] / su[a] != ratio))
      throw ShapeError("crfb resolution ratio between " + su.str() + " and " + sk.str() + " is not uniform");
    ratio = sk[a] / su[a];
  }
  const int i = detail::exact_log4(ratio);
  if (i < 0)
    throw ShapeError("crfb resolution ratio " + std::to_string(ratio) + " between " + su.str() + " and " +
                     sk.str() + " is not a power of 4");
  auto r_ki = detail::conv_named(p, prefix + ".k2u", fki);
  auto r_u = detail::conv_named(p, prefix + ".u2k", fu);
  for (int s = 0; s < 2 * i; ++s) {
    r_ki = ag::maxpool2(r_ki);
    r_u = ag::upsample2(r_u);
  }
  return {ag::add(fu, r_ki), ag::add(fki, r_u)};
}

namespace detail {

template <class T>
struct BranchState {
  Branch branch;
  ag::Var<T> x;
  std::vector<ag::Var<T>> enc_out;  // post-fusion encoder outputs, for skips
};

inline const char* branch_label(Branch b) { return b == Branch::Under ? "under" : "over"; }

template <class T>
ag::Var<T> run_block(const ModelConfig& cfg, const BlockSpec& b, ag::Var<T> x, const BoundParams<T>& p,
                     const std::vector<ag::Var<T>>& enc_out, std::vector<LayerTrace>* trace) {
  const std::string block = b.role == Role::Encoder ? "Encoder" : "Decoder";
  const auto pre = b.prefix();
  auto record = [&](const std::string& layer, const Shape& in, const Shape& out) {
    if (trace) trace->push_back({branch_label(b.branch), block, layer, in, out});
  };
  Shape in = x.shape();
  auto y = conv_named(p, pre + ".conv", x);
  record("Conv" + std::to_string(b.level), in, y.shape());
  if (cfg.block_kind() == BlockKind::Residual) y = residual_block(y, p, pre + ".res");
  if (cfg.block_kind() == BlockKind::Dense) y = dense_block(y, p, pre + ".dense");
  // Decoder j receives encoder level L-j+1 at matching width and resolution,
  // added before its resampling step.
  if (b.role == Role::Decoder && cfg.skips() && b.level >= 2) {
    const auto src = static_cast<std::size_t>(cfg.levels - b.level);  // 0-based encoder index
    y = ag::add(y, enc_out[src]);
  }
  in = y.shape();
  y = resample(y, b.resample);
  record(b.resample == Resample::MaxPool2 ? "MaxPooling" : "Upsampling", in, y.shape());
  in = y.shape();
  y = ag::relu(y);
  record("ReLU", in, y.shape());
  return y;
}

}  // namespace detail

/// Head output before any sigmoid. Training on binary heads feeds this to
/// bce_logits_loss.
template <class T>
ag::Var<T> forward_logits(const ModelConfig& cfg, const BoundParams<T>& p, const ag::Var<T>& x,
                          std::vector<LayerTrace>* trace = nullptr) {
  const Shape xs = x.shape();
  if (static_cast<int>(xs.rank()) != cfg.dims + 1 || xs[0] != cfg.in_channels)
    throw ShapeError("model expects input [" + std::to_string(cfg.in_channels) + "," +
                     (cfg.dims == 2 ? "H,W" : "D,H,W") + "], got " + xs.str());
  for (std::size_t a = 1; a < xs.rank(); ++a)
    if (xs[a] % cfg.divisor() != 0)
      throw ShapeError("spatial dims of " + xs.str() + " must be divisible by 2^levels = " +
                       std::to_string(cfg.divisor()) + "; pad the input");

  std::vector<detail::BranchState<T>> br;
  if (cfg.has_under()) br.push_back({Branch::Under, x, {}});
  if (cfg.has_over()) br.push_back({Branch::Over, x, {}});
  std::vector<std::vector<BlockSpec>> blocks;
  for (const auto& b : br) blocks.push_back(branch_blocks(cfg, b.branch));

  const auto L = static_cast<std::size_t>(cfg.levels);
  for (std::size_t step = 0; step < 2 * L; ++step) {
    for (std::size_t k = 0; k < br.size(); ++k)
      br[k].x = detail::run_block(cfg, blocks[k][step], br[k].x, p, br[k].enc_out, trace);
    if (cfg.crfb_enabled()) {
      const auto& b = blocks[0][step];
      auto [u, o] = crfb(br[0].x, br[1].x, p, "crfb." + level_tag(b.role, b.level));
      br[0].x = u;
      br[1].x = o;
    }
    if (step < L)
      for (auto& b : br) b.enc_out.push_back(b.x);
  }

  auto merged = br.size() == 2 ? ag::add(br[0].x, br[1].x) : br[0].x;
  return detail::conv_named(p, "head", merged);
}

/// Full forward pass. Returns sigmoid probabilities for binary heads and raw
/// logits otherwise.
template <class T>
ag::Var<T> forward(const ModelConfig& cfg, const BoundParams<T>& p, const ag::Var<T>& x,
                   std::vector<LayerTrace>* trace = nullptr) {
  auto out = forward_logits(cfg, p, x, trace);
  return cfg.sigmoid_head() ? ag::sigmoid(out) : out;
}

/// Inference without gradients.
inline Tensor predict(const Model& m, const Tensor& x) {
  ag::Tape<float> tape;
  const auto p = bind_params(tape, m.params, false);
  return forward(m.cfg, p, tape.leaf(x)).value();
}

inline std::vector<LayerTrace> shape_trace(const ModelConfig& cfg, const Shape& input) {
  Rng rng(0);
  Model m = build_model(cfg, rng);
  ag::Tape<float> tape;
  const auto p = bind_params(tape, m.params, false);
  std::vector<LayerTrace> trace;
  forward(cfg, p, tape.leaf(Tensor(input)), &trace);
  return trace;
}

inline std::int64_t conv_param_count(std::int64_t k_spatial, std::int64_t cin, std::int64_t cout) {
  return (k_spatial * cin + 1) * cout;
}

struct ParamBreakdown {
  std::int64_t total = 0;
  std::vector<std::pair<std::string, std::int64_t>> rows;  // grouped by branch/level, crfb level, head
};

inline ParamBreakdown param_count(const ModelConfig& cfg) {
  ParamBreakdown out;
  for (const auto& s : param_specs(cfg)) {
    // group key: "u.enc1", "crfb.dec2", "head"
    std::string group = s.name;
    const auto first = group.find('.');
    const auto second = first == std::string::npos ? std::string::npos : group.find('.', first + 1);
    if (group.rfind("head", 0) == 0) group = "head";
    else if (second != std::string::npos) group = group.substr(0, second);
    if (out.rows.empty() || out.rows.back().first != group) out.rows.emplace_back(group, 0);
    out.rows.back().second += s.shape.numel();
    out.total += s.shape.numel();
  }
  return out;
}

/// Adam with bias-corrected moments. Moments are kept in double.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(NamedTensors& params, const NamedTensors& grads, AdamState& st, double lr,
                      const AdamOptions& opt = {}) {
  if (grads.size() != params.size())
    throw ValidationError("adam: " + std::to_string(params.size()) + " params vs " + std::to_string(grads.size()) +
                          " grads");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].first != grads[i].first || !(params[i].second.shape() == grads[i].second.shape()))
      throw ValidationError("adam: param '" + params[i].first + "' " + params[i].second.shape().str() +
                            " does not match grad '" + grads[i].first + "' " + grads[i].second.shape().str());
  if (st.m.empty()) {
    for (const auto& [k, t] : params) {
      st.m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
      st.v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ValidationError("adam: state does not match parameter list");
  ++st.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    const auto& g = grads[i].second;
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      const auto u = static_cast<std::size_t>(j);
      const double gj = g[j];
      m[u] = opt.beta1 * m[u] + (1 - opt.beta1) * gj;
      v[u] = opt.beta2 * v[u] + (1 - opt.beta2) * gj * gj;
      const double mhat = m[u] / c1;
      const double vhat = v[u] / c2;
      p[j] = static_cast<float>(p[j] - lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

inline void adam_step(ParameterSet& params, const NamedTensors& grads, AdamState& st, double lr,
                      const AdamOptions& opt = {}) {
  adam_step(params.items(), grads, st, lr, opt);
}

}  // namespace overseg
