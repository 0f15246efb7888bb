// SPDX-License-Identifier: Apache-2.0
#include "amfn/learn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <utility>

#include "amfn/serialize.hpp"

namespace amfn {

namespace {

template <class Real>
std::vector<Real> mask_weights(const std::vector<std::uint8_t>& mask) {
  std::vector<Real> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? Real(1) : Real(0);
  return w;
}

std::size_t isqrt_exact(std::size_t n, const char* what) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(double(n))));
  if (g * g != n) throw ShapeError(std::string(what) + ": token count " + std::to_string(n) +
                                   " is not a square grid");
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss

void FocalConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ConfigError("focal alpha must lie in (0,1], got " + std::to_string(alpha));
  if (!(gamma >= 0.0))
    throw ConfigError("focal gamma must be >= 0, got " + std::to_string(gamma));
}

template <class Real>
Tensor<Real> to_targets(const Scene& scene, std::size_t n_cls) {
  const std::size_t k = scene.prop_mask.size();
  if (scene.prop_gt.size() != k)
    throw ShapeError("scene " + std::to_string(scene.id) + ": proposal mask/source size mismatch");
  std::vector<Real> vals(k * n_cls, Real(0));
  for (std::size_t s = 0; s < k; ++s) {
    if (!scene.prop_mask[s]) continue;
    const int src = scene.prop_gt[s];
    if (src < 0) continue;
    if (static_cast<std::size_t>(src) >= scene.gt_labels.size())
      throw ShapeError("scene " + std::to_string(scene.id) + ": proposal source " +
                       std::to_string(src) + " out of range");
    const std::uint64_t bits = scene.gt_labels[static_cast<std::size_t>(src)];
    for (std::size_t c = 0; c < n_cls; ++c)
      if ((bits >> c) & 1u) vals[s * n_cls + c] = Real(1);
  }
  return Tensor<Real>::from({k, n_cls}, std::move(vals));
}

template <class Real>
Tensor<Real> sigmoid_focal_loss(const Tensor<Real>& logits, const Tensor<Real>& targets,
                                const std::vector<std::uint8_t>& mask, const FocalConfig& cfg,
                                std::type_identity_t<Tape<Real>*> tape) {
  cfg.validate();
  if (logits.rank() != 2)
    throw ShapeError("focal loss: expected (K,N_cls) logits, got " + shape_str(logits.shape()));
  if (targets.shape() != logits.shape())
    throw ShapeError("focal loss: targets " + shape_str(targets.shape()) + " vs logits " +
                     shape_str(logits.shape()));
  if (mask.size() != logits.dim(0))
    throw ShapeError("focal loss: mask size " + std::to_string(mask.size()) + " vs K " +
                     std::to_string(logits.dim(0)));
  std::size_t valid = 0;
  for (auto m : mask) valid += m ? 1 : 0;
  if (valid == 0) throw UsageError("focal loss: batch has no valid actors");
  for (std::size_t i = 0; i < targets.numel(); ++i)
    if (targets[i] != Real(0) && targets[i] != Real(1))
      throw UsageError("focal loss: targets must be exactly 0 or 1");

  const Real alpha = static_cast<Real>(cfg.alpha);
  const Real gamma = static_cast<Real>(cfg.gamma);
  Tensor<Real> neg_z = scale(logits, Real(-1), tape);
  // Positive cells: -log p = softplus(-z), modulator (1-p)^gamma = sigmoid(-z)^gamma.
  Tensor<Real> pos = mul(pow_const(sigmoid(neg_z, tape), gamma, tape), softplus(neg_z, tape),
                         tape);
  pos = mul(pos, targets, tape);
  // Negative cells: -log(1-p) = softplus(z), modulator p^gamma = sigmoid(z)^gamma.
  Tensor<Real> neg = mul(pow_const(sigmoid(logits, tape), gamma, tape), softplus(logits, tape),
                         tape);
  std::vector<Real> invv(targets.numel());
  for (std::size_t i = 0; i < targets.numel(); ++i) invv[i] = Real(1) - targets[i];
  neg = mul(neg, Tensor<Real>::from(targets.shape(), std::move(invv)), tape);

  Tensor<Real> cell = add(scale(pos, alpha, tape), scale(neg, Real(1) - alpha, tape), tape);
  cell = scale_axis0(cell, mask_weights<Real>(mask), tape);
  const Real denom = static_cast<Real>(valid * logits.dim(1));
  return scale(sum_all(cell, tape), Real(1) / denom, tape);
}

// ---------------------------------------------------------------------------
// Optimizer

void OptimConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adamw betas must lie in [0,1)");
  if (!(eps > 0.0)) throw ConfigError("adamw eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("adamw weight decay must be >= 0");
}

OptimState init_optim(const ParamSet<float>& params, const OptimConfig& cfg) {
  cfg.validate();
  OptimState st;
  st.cfg = cfg;
  for (const auto& [name, t] : params.entries()) {
    st.m[name].assign(t.numel(), 0.0);
    st.v[name].assign(t.numel(), 0.0);
  }
  return st;
}

bool is_frontend_param(const std::string& name) {
  return name.find("frontend.") != std::string::npos;
}

void adamw_step(ParamSet<float>& params, const GradMap& grads, OptimState& state,
                double lr_frontend, double lr_rest) {
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, t] : params.entries()) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw UsageError("adamw_step: missing gradient for " + name);
    const std::vector<double>& g = git->second;
    if (g.size() != t.numel())
      throw ShapeError("adamw_step: gradient size " + std::to_string(g.size()) + " vs " +
                       std::to_string(t.numel()) + " for " + name);
    const auto mit = state.m.find(name);
    const auto vit = state.v.find(name);
    if (mit == state.m.end() || vit == state.v.end() || mit->second.size() != g.size() ||
        vit->second.size() != g.size())
      throw UsageError("adamw_step: optimizer state does not cover " + name);
    std::vector<double>& m = mit->second;
    std::vector<double>& v = vit->second;
    const double lr = is_frontend_param(name) ? lr_frontend : lr_rest;
    auto& vals = t.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double decayed = static_cast<double>(vals[i]) * (1.0 - lr * state.cfg.weight_decay);
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.cfg.eps);
      vals[i] = static_cast<float>(decayed - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedule

void TrainConfig::validate() const {
  if (batch == 0) throw ConfigError("train batch size must be >= 1");
  if (!(lr_frontend > 0.0) || !(lr_rest > 0.0))
    throw ConfigError("train learning rates must be positive");
  if (drop_epoch == 0) throw ConfigError("train drop epoch is 1-based");
  if (!(drop_factor >= 1.0)) throw ConfigError("train drop factor must be >= 1");
  focal.validate();
  optim.validate();
}

std::pair<double, double> lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch == 0) throw UsageError("lr_at: epochs are 1-based");
  const double f = epoch >= cfg.drop_epoch ? cfg.drop_factor : 1.0;
  return {cfg.lr_frontend / f, cfg.lr_rest / f};
}

// ---------------------------------------------------------------------------
// Augmentation

ModelInput<float> flip_horizontal(ModelInput<float> in) {
  if (in.has_v()) {
    const std::size_t t = in.f_v.dim(0), n = in.f_v.dim(1), c = in.f_v.dim(2);
    const std::size_t g = isqrt_exact(n, "flip_horizontal");
    std::vector<float> out(in.f_v.numel());
    const auto src = in.f_v.data();
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t r = 0; r < g; ++r)
        for (std::size_t col = 0; col < g; ++col) {
          const std::size_t from = (ti * n + r * g + col) * c;
          const std::size_t to = (ti * n + r * g + (g - 1 - col)) * c;
          std::copy(src.begin() + from, src.begin() + from + c, out.begin() + to);
        }
    in.f_v = Tensor<float>::from({t, n, c}, std::move(out));
  }
  if (!in.prop_box.empty()) {
    const std::size_t k = in.prop_box.dim(0);
    if (in.mask.size() != k)
      throw ShapeError("flip_horizontal: mask size " + std::to_string(in.mask.size()) +
                       " vs K " + std::to_string(k));
    const std::size_t d_roi = in.prop_roi.empty() ? 0 : in.prop_roi.dim(1);
    std::vector<float> boxes(in.prop_box.data().begin(), in.prop_box.data().end());
    std::vector<float> rois;
    if (d_roi) rois.assign(in.prop_roi.data().begin(), in.prop_roi.data().end());
    for (std::size_t s = 0; s < k; ++s) {
      if (!in.mask[s]) continue;
      const float x1 = boxes[s * 4 + 0], y1 = boxes[s * 4 + 1];
      const float x2 = boxes[s * 4 + 2], y2 = boxes[s * 4 + 3];
      const float nx1 = 1.0f - x2, nx2 = 1.0f - x1;
      boxes[s * 4 + 0] = nx1;
      boxes[s * 4 + 2] = nx2;
      if (!d_roi) continue;
      // Keep the feature's additive noise: subtract the old clean geometry,
      // add the mirrored one.
      const auto old_geom = roi_geometry(x1, y1, x2, y2, d_roi);
      const auto new_geom = roi_geometry(nx1, y1, nx2, y2, d_roi);
      for (std::size_t j = 0; j < d_roi; ++j)
        rois[s * d_roi + j] = static_cast<float>(
            new_geom[j] + (static_cast<double>(rois[s * d_roi + j]) - old_geom[j]));
    }
    in.prop_box = Tensor<float>::from({k, std::size_t(4)}, std::move(boxes));
    if (d_roi) in.prop_roi = Tensor<float>::from({k, d_roi}, std::move(rois));
  }
  return in;
}

Tensor<float> spec_augment_features(const Tensor<float>& f_a, RngState& rng) {
  if (f_a.rank() != 3)
    throw ShapeError("spec_augment_features: expected (T,N,C), got " + shape_str(f_a.shape()));
  const std::size_t t = f_a.dim(0), n = f_a.dim(1), c = f_a.dim(2);
  const std::size_t max_t = std::max<std::size_t>(1, t / 4);
  const std::size_t max_f = std::max<std::size_t>(1, c / 8);
  const auto tl = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_t)));
  const auto t0 =
      static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(t - tl)));
  const auto fl = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_f)));
  const auto f0 =
      static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c - fl)));
  Tensor<float> out = f_a;
  auto& vals = out.mutable_data();
  for (std::size_t ti = t0; ti < t0 + tl; ++ti)
    std::fill(vals.begin() + static_cast<std::ptrdiff_t>(ti * n * c),
              vals.begin() + static_cast<std::ptrdiff_t>((ti + 1) * n * c), 0.0f);
  if (fl)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ni = 0; ni < n; ++ni)
        std::fill_n(vals.begin() + static_cast<std::ptrdiff_t>((ti * n + ni) * c + f0), fl, 0.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

namespace {

std::vector<double> encode_model_config(const ModelConfig& c) {
  return {double(c.l),      double(c.d),          double(c.k),     double(c.n_cls),
          double(c.t_v),    double(c.n_v),        double(c.t_a),   double(c.n_a),
          double(c.t_s),    double(c.n_s),        double(c.t_c),   double(c.heads),
          double(c.ffn_mult), double(c.gate_ratio), double(c.c_in), double(c.d_roi),
          c.scalar_gate ? 1.0 : 0.0};
}

ModelConfig decode_model_config(const std::vector<double>& v, const std::string& path) {
  if (v.size() != 17) throw FormatError(path + ": model config echo has wrong length");
  auto u = [](double x) { return static_cast<std::size_t>(std::llround(x)); };
  ModelConfig c;
  c.l = u(v[0]);
  c.d = u(v[1]);
  c.k = u(v[2]);
  c.n_cls = u(v[3]);
  c.t_v = u(v[4]);
  c.n_v = u(v[5]);
  c.t_a = u(v[6]);
  c.n_a = u(v[7]);
  c.t_s = u(v[8]);
  c.n_s = u(v[9]);
  c.t_c = u(v[10]);
  c.heads = u(v[11]);
  c.ffn_mult = u(v[12]);
  c.gate_ratio = u(v[13]);
  c.c_in = u(v[14]);
  c.d_roi = u(v[15]);
  c.scalar_gate = v[16] != 0.0;
  return c;
}

std::vector<double> encode_train_config(const TrainConfig& t) {
  return {double(t.epochs),  double(t.batch),     t.lr_frontend,
          t.lr_rest,         double(t.drop_epoch), t.drop_factor,
          double(t.seed),    t.flip ? 1.0 : 0.0,  t.specaug ? 1.0 : 0.0,
          t.focal.alpha,     t.focal.gamma,       t.optim.beta1,
          t.optim.beta2,     t.optim.eps,         t.optim.weight_decay,
          double(t.workers)};
}

TrainConfig decode_train_config(const std::vector<double>& v, const std::string& path) {
  if (v.size() != 16) throw FormatError(path + ": train config echo has wrong length");
  auto u = [](double x) { return static_cast<std::size_t>(std::llround(x)); };
  TrainConfig t;
  t.epochs = u(v[0]);
  t.batch = u(v[1]);
  t.lr_frontend = v[2];
  t.lr_rest = v[3];
  t.drop_epoch = u(v[4]);
  t.drop_factor = v[5];
  t.seed = static_cast<std::uint64_t>(std::llround(v[6]));
  t.flip = v[7] != 0.0;
  t.specaug = v[8] != 0.0;
  t.focal.alpha = v[9];
  t.focal.gamma = v[10];
  t.optim.beta1 = v[11];
  t.optim.beta2 = v[12];
  t.optim.eps = v[13];
  t.optim.weight_decay = v[14];
  t.workers = u(v[15]);
  return t;
}

double encode_strategy(const std::string& s) {
  if (s.empty()) return -1.0;
  return static_cast<double>(static_cast<int>(parse_strategy(s)));
}

std::string decode_strategy(double v, const std::string& path) {
  const long idx = std::lround(v);
  if (idx == -1) return "";
  if (idx < 0 || idx > 4) throw FormatError(path + ": unknown strategy code in checkpoint");
  return strategy_name(static_cast<BaselineStrategy>(idx));
}

Tensor<double> vec_tensor(const std::vector<double>& v) {
  std::vector<double> copy = v;
  const std::size_t n = copy.size();
  return Tensor<double>::from({n}, std::move(copy));
}

std::vector<double> tensor_vec(const Tensor<double>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  NamedTensors entries;
  auto scalar = [](double v) {
    return AnyTensor::wrap(Tensor<double>::from({std::size_t(1)}, {v}));
  };
  entries.emplace_back("config.version", scalar(1.0));
  entries.emplace_back("config.model", AnyTensor::wrap(vec_tensor(encode_model_config(ckpt.model))));
  entries.emplace_back("config.train", AnyTensor::wrap(vec_tensor(encode_train_config(ckpt.train))));
  entries.emplace_back("config.strategy", scalar(encode_strategy(ckpt.strategy)));
  entries.emplace_back("state.epoch", scalar(static_cast<double>(ckpt.epoch)));
  entries.emplace_back("state.optim.step", scalar(static_cast<double>(ckpt.optim.step)));
  if (!ckpt.history.train_loss.empty()) {
    entries.emplace_back("history.train_loss", AnyTensor::wrap(vec_tensor(ckpt.history.train_loss)));
    entries.emplace_back("history.val_map", AnyTensor::wrap(vec_tensor(ckpt.history.val_map)));
    entries.emplace_back("history.lr_frontend",
                         AnyTensor::wrap(vec_tensor(ckpt.history.lr_frontend)));
    entries.emplace_back("history.lr_rest", AnyTensor::wrap(vec_tensor(ckpt.history.lr_rest)));
  }
  for (const auto& [name, t] : ckpt.params.entries())
    entries.emplace_back("param." + name, AnyTensor::wrap(t));
  for (const auto& [name, m] : ckpt.optim.m)
    entries.emplace_back("optim.m." + name, AnyTensor::wrap(vec_tensor(m)));
  for (const auto& [name, v] : ckpt.optim.v)
    entries.emplace_back("optim.v." + name, AnyTensor::wrap(vec_tensor(v)));
  save_named_tensors(path, entries);
}

Checkpoint load_checkpoint(const std::string& path) {
  const NamedTensors entries = load_named_tensors(path);
  std::map<std::string, const AnyTensor*> index;
  for (const auto& [name, t] : entries) {
    if (!index.emplace(name, &t).second)
      throw FormatError(path + ": duplicate checkpoint entry " + name);
  }
  auto need = [&](const std::string& name) -> const AnyTensor& {
    auto it = index.find(name);
    if (it == index.end()) throw FormatError(path + ": checkpoint missing entry " + name);
    return *it->second;
  };
  auto scalar = [&](const std::string& name) {
    const Tensor<double> t = need(name).as_f64(path + ":" + name);
    if (t.numel() != 1) throw FormatError(path + ": entry " + name + " is not a scalar");
    return t[0];
  };
  if (scalar("config.version") != 1.0)
    throw FormatError(path + ": unsupported checkpoint version");

  Checkpoint ckpt;
  ckpt.model = decode_model_config(tensor_vec(need("config.model").as_f64(path)), path);
  ckpt.train = decode_train_config(tensor_vec(need("config.train").as_f64(path)), path);
  ckpt.strategy = decode_strategy(scalar("config.strategy"), path);
  ckpt.epoch = static_cast<std::size_t>(std::llround(scalar("state.epoch")));
  ckpt.optim.cfg = ckpt.train.optim;
  ckpt.optim.step = static_cast<std::uint64_t>(std::llround(scalar("state.optim.step")));
  if (index.count("history.train_loss")) {
    ckpt.history.train_loss = tensor_vec(need("history.train_loss").as_f64(path));
    ckpt.history.val_map = tensor_vec(need("history.val_map").as_f64(path));
    ckpt.history.lr_frontend = tensor_vec(need("history.lr_frontend").as_f64(path));
    ckpt.history.lr_rest = tensor_vec(need("history.lr_rest").as_f64(path));
  }
  if (ckpt.history.train_loss.size() != ckpt.epoch ||
      ckpt.history.val_map.size() != ckpt.epoch ||
      ckpt.history.lr_frontend.size() != ckpt.epoch ||
      ckpt.history.lr_rest.size() != ckpt.epoch)
    throw FormatError(path + ": history length disagrees with the epoch counter");

  for (const auto& [name, t] : entries)
    if (name.rfind("param.", 0) == 0)
      ckpt.params.add(name.substr(6), t.as_f32(path + ":" + name));
  if (ckpt.params.entries().empty()) throw FormatError(path + ": checkpoint holds no parameters");
  for (const auto& [name, t] : ckpt.params.entries()) {
    const Tensor<double> m = need("optim.m." + name).as_f64(path);
    const Tensor<double> v = need("optim.v." + name).as_f64(path);
    if (m.numel() != t.numel() || v.numel() != t.numel())
      throw FormatError(path + ": optimizer moments do not match parameter " + name);
    ckpt.optim.m[name] = tensor_vec(m);
    ckpt.optim.v[name] = tensor_vec(v);
  }
  return ckpt;
}

void save_history_csv(const std::string& path, const TrainHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,train_loss,val_map,lr\n";
  char buf[96];
  for (std::size_t e = 0; e < history.train_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", e + 1, history.train_loss[e],
                  history.val_map[e], history.lr_rest[e]);
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Evaluation glue

void collect_detections(const ForwardResult<float>& r, int scene_id,
                        std::vector<Detection>& out) {
  const std::size_t k = r.scores.dim(0), n_cls = r.scores.dim(1);
  if (r.mask.size() != k || r.boxes.dim(0) != k)
    throw ShapeError("collect_detections: result pieces disagree on K");
  for (std::size_t s = 0; s < k; ++s) {
    if (!r.mask[s]) continue;
    Box b{r.boxes[s * 4 + 0], r.boxes[s * 4 + 1], r.boxes[s * 4 + 2], r.boxes[s * 4 + 3]};
    for (std::size_t c = 0; c < n_cls; ++c)
      out.push_back({scene_id, static_cast<int>(c), double(r.scores[s * n_cls + c]), b});
  }
}

void collect_ground_truth(const Scene& scene, std::vector<GroundTruthBox>& out) {
  const std::size_t g = scene.gt_labels.size();
  for (std::size_t i = 0; i < g; ++i) {
    Box b{scene.gt_box[i * 4 + 0], scene.gt_box[i * 4 + 1], scene.gt_box[i * 4 + 2],
          scene.gt_box[i * 4 + 3]};
    for (std::size_t c = 0; c < 64; ++c)
      if ((scene.gt_labels[i] >> c) & 1u) out.push_back({scene.id, static_cast<int>(c), b});
  }
}

double evaluate_map(const ModelConfig& mc, const ParamSet<float>& params,
                    const std::vector<Scene>& scenes, const std::string& strategy,
                    std::size_t workers) {
  if (scenes.empty()) throw UsageError("evaluate_map: empty scene list");
  std::optional<BaselineStrategy> strat;
  if (!strategy.empty()) strat = parse_strategy(strategy);
  const std::size_t w = workers ? workers : default_workers();
  std::vector<std::vector<Detection>> dets(scenes.size());
  std::vector<std::vector<GroundTruthBox>> gts(scenes.size());
  parallel_for(scenes.size(), w, [&](std::size_t i) {
    ModelInput<float> in = to_model_input<float>(scenes[i]);
    ForwardResult<float> r;
    if (strat) {
      r.scores = baseline_forward(*strat, in, mc, params, nullptr);
      r.boxes = in.prop_box;
      r.mask = in.mask;
    } else {
      r = forward(in, mc, params, nullptr);
    }
    collect_detections(r, scenes[i].id, dets[i]);
    collect_ground_truth(scenes[i], gts[i]);
  });
  std::vector<Detection> all_dets;
  std::vector<GroundTruthBox> all_gts;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    all_dets.insert(all_dets.end(), dets[i].begin(), dets[i].end());
    all_gts.insert(all_gts.end(), gts[i].begin(), gts[i].end());
  }
  return frame_map(all_dets, all_gts).map;
}

// ---------------------------------------------------------------------------
// Training loop

Checkpoint train_model(const ModelConfig& mc, const TrainConfig& tc,
                       const std::vector<Scene>& train_scenes,
                       const std::vector<Scene>& val_scenes, const std::string& strategy,
                       const Checkpoint* resume, const std::string& autosave_path) {
  mc.validate();
  tc.validate();
  if (train_scenes.empty()) throw UsageError("train: empty training set");
  std::optional<BaselineStrategy> strat;
  if (!strategy.empty()) strat = parse_strategy(strategy);

  Checkpoint ckpt;
  if (resume) {
    // The run is defined by its configs; a resumed checkpoint must echo them.
    // Exceptions: the epoch budget (resuming exists to extend it) and the
    // worker count (results never depend on it).
    auto scrub = [](TrainConfig t) {
      t.epochs = 0;
      t.workers = 0;
      return t;
    };
    if (encode_model_config(resume->model) != encode_model_config(mc) ||
        encode_train_config(scrub(resume->train)) != encode_train_config(scrub(tc)) ||
        resume->strategy != strategy)
      throw ConfigError("resume checkpoint was trained under a different configuration");
    ckpt = *resume;
    ckpt.train = tc;
  } else {
    ckpt.params = strat ? build_baseline_params(*strat, mc, tc.seed) : build_params(mc, tc.seed);
    ckpt.optim = init_optim(ckpt.params, tc.optim);
    ckpt.model = mc;
    ckpt.train = tc;
    ckpt.strategy = strategy;
    ckpt.epoch = 0;
  }

  const std::size_t w = tc.workers ? tc.workers : default_workers();
  const std::size_t n = train_scenes.size();

  for (std::size_t epoch = ckpt.epoch + 1; epoch <= tc.epochs; ++epoch) {
    const auto [lr_f, lr_r] = lr_at(epoch, tc);
    const RngState erng = RngState(tc.seed, "train").fork("epoch", epoch);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    {
      RngState srng = erng.fork("shuffle");
      for (std::size_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(srng.uniform_int(0, static_cast<std::int64_t>(i)));
        std::swap(order[i], order[j]);
      }
    }

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += tc.batch) {
      const std::size_t bsz = std::min(tc.batch, n - start);
      const std::size_t step = start / tc.batch + 1;
      std::vector<double> scene_loss(bsz, 0.0);
      std::vector<GradMap> scene_grad(bsz);
      auto run_batch = [&] {
        parallel_for(bsz, w, [&](std::size_t bi) {
          const Scene& sc = train_scenes[order[start + bi]];
          RngState arng = erng.fork("aug", start + bi);
          ModelInput<float> in = to_model_input<float>(sc);
          if (tc.flip && in.has_v() && arng.bernoulli(0.5)) in = flip_horizontal(std::move(in));
          if (tc.specaug && in.has_a()) {
            RngState sa = arng.fork("specaug");
            in.f_a = spec_augment_features(in.f_a, sa);
          }
          ParamSet<float> local = ckpt.params;  // worker-private tape linkage
          Tape<float> tape;
          local.watch_all(tape);
          const Tensor<float> targets = to_targets<float>(sc, mc.n_cls);
          std::vector<Tensor<float>> heads =
              strat ? baseline_train_logits(*strat, in, mc, local, &tape)
                    : std::vector<Tensor<float>>{forward(in, mc, local, &tape).logits};
          Tensor<float> loss;
          for (std::size_t h = 0; h < heads.size(); ++h) {
            Tensor<float> lh = sigmoid_focal_loss(heads[h], targets, in.mask, tc.focal, &tape);
            loss = h == 0 ? lh : add(loss, lh, &tape);
          }
          if (heads.size() > 1) loss = scale(loss, 1.0f / float(heads.size()), &tape);
          scene_loss[bi] = static_cast<double>(loss.value());
          tape.backward(loss);
          GradMap g;
          for (const auto& [name, t] : local.entries()) {
            std::vector<double>& dst = g[name];
            dst.assign(t.numel(), 0.0);
            const auto span = tape.grad(t.node);
            // Unreached parameters (e.g. branches of an absent modality) keep
            // zero gradients.
            for (std::size_t i = 0; i < span.size(); ++i) dst[i] = double(span[i]);
          }
          scene_grad[bi] = std::move(g);
        });
      };
      try {
        run_batch();
      } catch (const NumericError& e) {
        // The ops guard non-finite activations; re-raise with loop context.
        throw NumericError("training aborted at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + e.what());
      }

      for (std::size_t bi = 0; bi < bsz; ++bi) {
        if (!std::isfinite(scene_loss[bi]))
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step) + " (scene " +
                             std::to_string(train_scenes[order[start + bi]].id) + ")");
        loss_sum += scene_loss[bi];
      }
      GradMap batch;
      for (const auto& [name, t] : ckpt.params.entries())
        batch[name].assign(t.numel(), 0.0);
      for (std::size_t bi = 0; bi < bsz; ++bi)
        for (auto& [name, acc] : batch) {
          const std::vector<double>& g = scene_grad[bi].at(name);
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
        }
      const double inv = 1.0 / static_cast<double>(bsz);
      for (auto& [name, acc] : batch)
        for (double& x : acc) x *= inv;
      adamw_step(ckpt.params, batch, ckpt.optim, lr_f, lr_r);
    }

    ckpt.epoch = epoch;
    ckpt.history.train_loss.push_back(loss_sum / static_cast<double>(n));
    ckpt.history.val_map.push_back(
        val_scenes.empty() ? 0.0 : evaluate_map(mc, ckpt.params, val_scenes, strategy, w));
    ckpt.history.lr_frontend.push_back(lr_f);
    ckpt.history.lr_rest.push_back(lr_r);
    if (!autosave_path.empty()) save_checkpoint(autosave_path, ckpt);
  }
  return ckpt;
}

#define AMFN_INSTANTIATE_LEARN(Real)                                                       \
  template Tensor<Real> to_targets<Real>(const Scene&, std::size_t);                       \
  template Tensor<Real> sigmoid_focal_loss<Real>(                                          \
      const Tensor<Real>&, const Tensor<Real>&, const std::vector<std::uint8_t>&,          \
      const FocalConfig&, Tape<Real>*);

AMFN_INSTANTIATE_LEARN(float)
AMFN_INSTANTIATE_LEARN(double)
#undef AMFN_INSTANTIATE_LEARN

}  // namespace amfn
