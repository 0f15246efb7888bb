// SPDX-License-Identifier: Apache-2.0
#include "amfn/runconfig.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "amfn/common.hpp"

namespace amfn {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct KeyContext {
  const std::string& origin;
  std::size_t line;
  const std::string& key;
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(origin + ":" + std::to_string(line) + ": key '" + key + "' " + what);
  }
};

std::uint64_t parse_u64(const std::string& v, const KeyContext& ctx) {
  if (v.empty() || v.find('-') != std::string::npos)
    ctx.fail("expects an unsigned integer, got '" + v + "'");
  errno = 0;
  char* end = nullptr;
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end != v.c_str() + v.size())
    ctx.fail("expects an unsigned integer, got '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& v, const KeyContext& ctx) {
  return static_cast<std::size_t>(parse_u64(v, ctx));
}

double parse_real(const std::string& v, const KeyContext& ctx) {
  if (v.empty()) ctx.fail("expects a number, got ''");
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (errno != 0 || end != v.c_str() + v.size()) ctx.fail("expects a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v, const KeyContext& ctx) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  ctx.fail("expects true or false, got '" + v + "'");
}

std::vector<std::string> parse_cues(const std::string& v) {
  if (v == "auto") return {};
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

void apply_key(RunConfig& c, const KeyContext& ctx, const std::string& value) {
  const std::string& k = ctx.key;
  if (k == "seed") c.seed = parse_u64(value, ctx);
  else if (k == "workers") c.workers = parse_size(value, ctx);
  else if (k == "strategy") c.strategy = value;
  else if (k == "iou_thr") c.iou_thr = parse_real(value, ctx);
  else if (k == "model.l") c.model.l = parse_size(value, ctx);
  else if (k == "model.d") c.model.d = parse_size(value, ctx);
  else if (k == "model.k") c.model.k = parse_size(value, ctx);
  else if (k == "model.n_cls") c.model.n_cls = parse_size(value, ctx);
  else if (k == "model.heads") c.model.heads = parse_size(value, ctx);
  else if (k == "model.ffn_mult") c.model.ffn_mult = parse_size(value, ctx);
  else if (k == "model.gate_ratio") c.model.gate_ratio = parse_size(value, ctx);
  else if (k == "model.scalar_gate") c.model.scalar_gate = parse_bool(value, ctx);
  else if (k == "model.t_v") c.model.t_v = parse_size(value, ctx);
  else if (k == "model.n_v") c.model.n_v = parse_size(value, ctx);
  else if (k == "model.t_a") c.model.t_a = parse_size(value, ctx);
  else if (k == "model.n_a") c.model.n_a = parse_size(value, ctx);
  else if (k == "model.t_s") c.model.t_s = parse_size(value, ctx);
  else if (k == "model.n_s") c.model.n_s = parse_size(value, ctx);
  else if (k == "model.t_c") c.model.t_c = parse_size(value, ctx);
  else if (k == "model.c_in") c.model.c_in = parse_size(value, ctx);
  else if (k == "model.d_roi") c.model.d_roi = parse_size(value, ctx);
  else if (k == "train.epochs") c.train.epochs = parse_size(value, ctx);
  else if (k == "train.batch") c.train.batch = parse_size(value, ctx);
  else if (k == "train.lr_frontend") c.train.lr_frontend = parse_real(value, ctx);
  else if (k == "train.lr_rest") c.train.lr_rest = parse_real(value, ctx);
  else if (k == "train.drop_epoch") c.train.drop_epoch = parse_size(value, ctx);
  else if (k == "train.drop_factor") c.train.drop_factor = parse_real(value, ctx);
  else if (k == "train.flip") c.train.flip = parse_bool(value, ctx);
  else if (k == "train.specaug") c.train.specaug = parse_bool(value, ctx);
  else if (k == "train.focal_alpha") c.train.focal.alpha = parse_real(value, ctx);
  else if (k == "train.focal_gamma") c.train.focal.gamma = parse_real(value, ctx);
  else if (k == "train.beta1") c.train.optim.beta1 = parse_real(value, ctx);
  else if (k == "train.beta2") c.train.optim.beta2 = parse_real(value, ctx);
  else if (k == "train.eps") c.train.optim.eps = parse_real(value, ctx);
  else if (k == "train.weight_decay") c.train.optim.weight_decay = parse_real(value, ctx);
  else if (k == "data.train_scenes") c.train_scenes = parse_size(value, ctx);
  else if (k == "data.val_scenes") c.val_scenes = parse_size(value, ctx);
  else if (k == "data.noise_sigma") c.noise_sigma = parse_real(value, ctx);
  else if (k == "data.label_rate") c.label_rate = parse_real(value, ctx);
  else if (k == "data.k_gt_max") c.k_gt_max = parse_size(value, ctx);
  else if (k == "data.recall") c.recall = parse_real(value, ctx);
  else if (k == "data.jitter") c.jitter = parse_real(value, ctx);
  else if (k == "data.class_cues") c.class_cues = parse_cues(value);
  else ctx.fail("is not a recognized configuration key");
}

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::string> auto_cues(std::size_t n_cls) {
  static const std::vector<std::string> palette{"v", "a", "s", "va", "vs", "as", "vas"};
  std::vector<std::string> out(n_cls);
  for (std::size_t c = 0; c < n_cls; ++c) out[c] = palette[c % palette.size()];
  return out;
}

RunConfig profile_defaults(const std::string& name) {
  RunConfig c;
  c.profile = name;
  c.model.ffn_mult = 4;
  c.model.gate_ratio = 4;
  c.model.scalar_gate = false;
  c.model.c_in = 64;
  c.model.d_roi = 1024;
  c.train.epochs = 30;
  c.train.batch = 8;
  c.train.lr_frontend = 1e-5;
  c.train.lr_rest = 1e-4;
  c.train.drop_epoch = 7;
  c.train.drop_factor = 10.0;
  if (name == "toy") {
    c.model.l = 3;
    c.model.d = 64;
    c.model.k = 5;
    c.model.n_cls = 8;
    c.model.heads = 4;  // keeps the head dim at 16
    c.model.t_v = 2;
    c.model.n_v = 9;
    c.model.t_a = 4;
    c.model.n_a = 4;
    c.model.t_s = 2;
    c.model.n_s = 4;
    c.model.t_c = 2;
  } else if (name == "paper") {
    c.model.l = 6;
    c.model.d = 256;
    c.model.k = 15;
    c.model.n_cls = 60;
    c.model.heads = 8;
    c.model.t_v = 4;
    c.model.n_v = 49;  // 7x7 grid
    c.model.t_a = 20;
    c.model.n_a = 12;
    c.model.t_s = 4;
    c.model.n_s = 16;
    c.model.t_c = 4;
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected toy or paper)");
  }
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  t.workers = workers;
  return t;
}

DatasetManifest RunConfig::manifest(const std::string& split) const {
  if (split != "train" && split != "val")
    throw UsageError("manifest split must be train or val, got '" + split + "'");
  DatasetManifest m;
  m.split = split;
  m.scenes = split == "train" ? train_scenes : val_scenes;
  m.seed = split == "train" ? seed : seed + 1;
  m.n_cls = model.n_cls;
  m.noise_sigma = noise_sigma;
  m.label_rate = label_rate;
  m.k_gt_max = k_gt_max;
  m.k_slots = model.k;
  m.recall = recall;
  m.jitter = jitter;
  m.channels = model.c_in;
  m.d_roi = model.d_roi;
  m.t_v = model.t_v;
  m.n_v = model.n_v;
  m.t_a = model.t_a;
  m.n_a = model.n_a;
  m.t_s = model.t_s;
  m.n_s = model.n_s;
  m.class_cues = class_cues.empty() ? auto_cues(model.n_cls) : class_cues;
  return m;
}

std::string RunConfig::strategy_arg() const { return strategy == "full" ? "" : strategy; }

void RunConfig::validate() const {
  if (profile != "toy" && profile != "paper")
    throw ConfigError("unknown profile '" + profile + "' (expected toy or paper)");
  if (strategy != "full") {
    try {
      (void)parse_strategy(strategy);
    } catch (const UsageError&) {
      throw ConfigError("unknown strategy '" + strategy + "'");
    }
  }
  if (!(iou_thr > 0.0 && iou_thr < 1.0))
    throw ConfigError("iou_thr must lie in (0, 1), got " + fmt_real(iou_thr));
  if (train_scenes == 0) throw ConfigError("data.train_scenes must be at least 1");
  model.validate();
  train_config().validate();
  manifest("train").validate();
  if (val_scenes > 0) manifest("val").validate();
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  struct Entry {
    std::size_t line;
    std::string key, value;
  };
  std::vector<Entry> entries;
  std::map<std::string, std::size_t> seen;
  std::stringstream ss(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    if (value.empty())
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": key '" + key +
                        "' has no value");
    const auto [it, inserted] = seen.emplace(key, line_no);
    if (!inserted)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key +
                        "' (first on line " + std::to_string(it->second) + ")");
    entries.push_back({line_no, key, value});
  }

  // The profile fixes the defaults, so it is applied before everything else
  // no matter where it appears.
  std::string profile = "toy";
  for (const auto& e : entries)
    if (e.key == "profile") profile = e.value;
  RunConfig cfg = profile_defaults(profile);
  for (const auto& e : entries) {
    if (e.key == "profile") continue;
    apply_key(cfg, KeyContext{origin, e.line, e.key}, e.value);
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string format_config(const RunConfig& c) {
  std::stringstream out;
  out << "profile = " << c.profile << "\n";
  out << "seed = " << c.seed << "\n";
  out << "workers = " << c.workers << "\n";
  out << "strategy = " << c.strategy << "\n";
  out << "iou_thr = " << fmt_real(c.iou_thr) << "\n";
  out << "model.l = " << c.model.l << "\n";
  out << "model.d = " << c.model.d << "\n";
  out << "model.k = " << c.model.k << "\n";
  out << "model.n_cls = " << c.model.n_cls << "\n";
  out << "model.heads = " << c.model.heads << "\n";
  out << "model.ffn_mult = " << c.model.ffn_mult << "\n";
  out << "model.gate_ratio = " << c.model.gate_ratio << "\n";
  out << "model.scalar_gate = " << (c.model.scalar_gate ? "true" : "false") << "\n";
  out << "model.t_v = " << c.model.t_v << "\n";
  out << "model.n_v = " << c.model.n_v << "\n";
  out << "model.t_a = " << c.model.t_a << "\n";
  out << "model.n_a = " << c.model.n_a << "\n";
  out << "model.t_s = " << c.model.t_s << "\n";
  out << "model.n_s = " << c.model.n_s << "\n";
  out << "model.t_c = " << c.model.t_c << "\n";
  out << "model.c_in = " << c.model.c_in << "\n";
  out << "model.d_roi = " << c.model.d_roi << "\n";
  out << "train.epochs = " << c.train.epochs << "\n";
  out << "train.batch = " << c.train.batch << "\n";
  out << "train.lr_frontend = " << fmt_real(c.train.lr_frontend) << "\n";
  out << "train.lr_rest = " << fmt_real(c.train.lr_rest) << "\n";
  out << "train.drop_epoch = " << c.train.drop_epoch << "\n";
  out << "train.drop_factor = " << fmt_real(c.train.drop_factor) << "\n";
  out << "train.flip = " << (c.train.flip ? "true" : "false") << "\n";
  out << "train.specaug = " << (c.train.specaug ? "true" : "false") << "\n";
  out << "train.focal_alpha = " << fmt_real(c.train.focal.alpha) << "\n";
  out << "train.focal_gamma = " << fmt_real(c.train.focal.gamma) << "\n";
  out << "train.beta1 = " << fmt_real(c.train.optim.beta1) << "\n";
  out << "train.beta2 = " << fmt_real(c.train.optim.beta2) << "\n";
  out << "train.eps = " << fmt_real(c.train.optim.eps) << "\n";
  out << "train.weight_decay = " << fmt_real(c.train.optim.weight_decay) << "\n";
  out << "data.train_scenes = " << c.train_scenes << "\n";
  out << "data.val_scenes = " << c.val_scenes << "\n";
  out << "data.noise_sigma = " << fmt_real(c.noise_sigma) << "\n";
  out << "data.label_rate = " << fmt_real(c.label_rate) << "\n";
  out << "data.k_gt_max = " << c.k_gt_max << "\n";
  out << "data.recall = " << fmt_real(c.recall) << "\n";
  out << "data.jitter = " << fmt_real(c.jitter) << "\n";
  out << "data.class_cues = ";
  if (c.class_cues.empty()) {
    out << "auto";
  } else {
    for (std::size_t i = 0; i < c.class_cues.size(); ++i)
      out << (i ? "," : "") << c.class_cues[i];
  }
  out << "\n";
  return out.str();
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << format_config(cfg);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace amfn
