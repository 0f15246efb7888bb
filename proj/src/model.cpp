// SPDX-License-Identifier: Apache-2.0
#include "amfn/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "amfn/serialize.hpp"

namespace amfn {

namespace {

constexpr double kLnEps = 1e-5;

template <class Real>
Real ln_eps() {
  return static_cast<Real>(kLnEps);
}

// (n, D) tensor whose every row is v; differentiable in v.
template <class Real>
Tensor<Real> repeat_row(const Tensor<Real>& v, std::size_t n, std::type_identity_t<Tape<Real>*> tape) {
  return matmul(Tensor<Real>::full({n, 1}, Real(1)), v.reshaped({1, v.numel()}), tape);
}

template <class Real>
std::vector<Real> mask_weights(const std::vector<std::uint8_t>& mask) {
  std::vector<Real> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? Real(1) : Real(0);
  return w;
}

std::size_t grid_side(std::size_t n_v) {
  return static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n_v))));
}

// Pre-norm encoder block: x + SA(LN(x)), then + FFN(LN(.)).
template <class Real>
Tensor<Real> encoder_block(const Tensor<Real>& x, const std::optional<Tensor<Real>>& key_bias,
                           const ParamSet<Real>& p, const std::string& prefix,
                           std::size_t heads, std::type_identity_t<Tape<Real>*> tape,
                           Tensor<Real>* attn_out = nullptr) {
  Tensor<Real> n1 = layer_norm(x, p.at(prefix + "ln1.g"), p.at(prefix + "ln1.b"), ln_eps<Real>(),
                               tape);
  Tensor<Real> sa = multi_head_self_attention(
      n1, p.at(prefix + "qkv.w"), p.at(prefix + "qkv.b"), p.at(prefix + "out.w"),
      p.at(prefix + "out.b"), heads, key_bias, tape, attn_out);
  Tensor<Real> h = add(x, sa, tape);
  Tensor<Real> n2 = layer_norm(h, p.at(prefix + "ln2.g"), p.at(prefix + "ln2.b"), ln_eps<Real>(),
                               tape);
  Tensor<Real> f1 = gelu(linear(n2, p.at(prefix + "ffn1.w"), p.at(prefix + "ffn1.b"), tape), tape);
  Tensor<Real> f2 = linear(f1, p.at(prefix + "ffn2.w"), p.at(prefix + "ffn2.b"), tape);
  return add(h, f2, tape);
}

// Context-token position encoding for one modality: 2D over the visual grid,
// 1D over audio/scene token index.
template <class Real>
Tensor<Real> context_pe(char modality, const ModelConfig& cfg) {
  switch (modality) {
    case 'v': {
      const std::size_t g = grid_side(cfg.n_v);
      return sinusoidal_pe_2d<Real>(g, g, cfg.d);
    }
    case 'a':
      return sinusoidal_pe<Real>(cfg.n_a, cfg.d);
    case 's':
      return sinusoidal_pe<Real>(cfg.n_s, cfg.d);
    default:
      throw UsageError("context_pe: unknown modality '" + std::string(1, modality) + "'");
  }
}

template <class Real>
void check_stream(const Tensor<Real>& f, const char* name, std::size_t t, std::size_t n,
                  std::size_t c) {
  if (f.shape() != Shape{t, n, c})
    throw ShapeError(std::string(name) + " stream " + shape_str(f.shape()) +
                     " does not match config (" + std::to_string(t) + "," + std::to_string(n) +
                     "," + std::to_string(c) + ")");
}

// Copies `prefix`-scoped entries into a stand-alone set with the prefix
// stripped. Tensor copies share storage and tape linkage, so gradients land
// on the originals.
template <class Real>
ParamSet<Real> sub_params(const ParamSet<Real>& p, const std::string& prefix) {
  ParamSet<Real> out;
  for (const auto& [name, t] : p.entries())
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), t);
  return out;
}

struct ParamBuilder {
  ParamSet<float>& out;
  const RngState& base;
  std::string prefix;

  void matrix(const std::string& name, std::size_t in, std::size_t n_out) {
    out.add(prefix + name + ".w", init_trunc_normal({in, n_out}, 0.02, base, prefix + name + ".w"));
    out.add(prefix + name + ".b", init_zeros({n_out}));
  }
  void norm(const std::string& name, std::size_t d) {
    out.add(prefix + name + ".g", init_ones({d}));
    out.add(prefix + name + ".b", init_zeros({d}));
  }
  void vec(const std::string& name, std::size_t d) {
    out.add(prefix + name, init_trunc_normal({d}, 0.02, base, prefix + name));
  }
  void block(const ModelConfig& cfg) {
    norm("ln1", cfg.d);
    matrix("qkv", cfg.d, 3 * cfg.d);
    matrix("out", cfg.d, cfg.d);
    norm("ln2", cfg.d);
    matrix("ffn1", cfg.d, cfg.ffn_mult * cfg.d);
    matrix("ffn2", cfg.ffn_mult * cfg.d, cfg.d);
  }
  void head(const ModelConfig& cfg) {
    norm("head.ln", cfg.d);
    matrix("head.fc", cfg.d, cfg.n_cls);
  }
};

void add_model_params(ParamSet<float>& out, const ModelConfig& cfg, const RngState& base,
                      const std::string& scope) {
  ParamBuilder b{out, base, scope};
  b.prefix = scope + "frontend.";
  for (char m : {'v', 'a', 's'}) {
    const std::string mod(1, m);
    b.matrix("proj_" + mod, cfg.c_in, cfg.d);
    b.matrix("init_" + mod, cfg.d_roi, cfg.d);
  }
  for (std::size_t l = 0; l < cfg.l; ++l) {
    const std::string layer = scope + "layer." + std::to_string(l) + ".";
    for (char m : {'v', 'a', 's'}) {
      const std::string mod(1, m);
      b.prefix = layer + "mfe_" + mod + ".block.";
      b.block(cfg);
      b.prefix = layer + "mfe_" + mod + ".bn.";
      b.matrix("qkv", cfg.d, 3 * cfg.d);
      b.matrix("out", cfg.d, cfg.d);
      b.prefix = layer + "mfe_" + mod + ".type.";
      b.vec("actor", cfg.d);
      b.vec("ctx", cfg.d);
      b.vec("bn", cfg.d);
    }
    b.prefix = layer + "mfa.gate.";
    const std::size_t hidden = 3 * cfg.d / cfg.gate_ratio;
    b.matrix("fc1", 3 * cfg.d, hidden);
    b.matrix("fc2", hidden, cfg.scalar_gate ? 3 : 3 * cfg.d);
  }
  b.prefix = scope;
  b.head(cfg);
}

}  // namespace

void ModelConfig::validate() const {
  if (l < 1) throw ConfigError("model: need at least one layer");
  if (d < 4 || d % 4 != 0)
    throw ConfigError("model: width d must be a positive multiple of 4 (2D grid encoding), got " +
                      std::to_string(d));
  if (heads == 0 || d % heads != 0)
    throw ConfigError("model: heads must divide d, got d=" + std::to_string(d) +
                      " heads=" + std::to_string(heads));
  if (k < 1) throw ConfigError("model: need at least one proposal slot");
  if (n_cls < 2 || n_cls > 64) throw ConfigError("model: n_cls must lie in [2, 64]");
  if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be positive");
  if (gate_ratio < 1 || (3 * d) % gate_ratio != 0)
    throw ConfigError("model: gate_ratio must divide 3*d");
  if (t_c != t_v)
    throw ConfigError("model: fusion rate t_c " + std::to_string(t_c) +
                      " must equal the visual rate t_v " + std::to_string(t_v));
  for (std::size_t dim : {t_v, n_v, t_a, n_a, t_s, n_s})
    if (dim == 0) throw ConfigError("model: stream extents must be positive");
  const std::size_t g = grid_side(n_v);
  if (g * g != n_v)
    throw ConfigError("model: n_v " + std::to_string(n_v) + " is not a square grid cell count");
  if (c_in == 0 || d_roi == 0) throw ConfigError("model: input widths must be positive");
}

template <class Real>
ModelInput<Real> to_model_input(const Scene& scene) {
  ModelInput<Real> in;
  if (scene.has_v()) in.f_v = scene.f_v.template cast<Real>();
  if (scene.has_a()) in.f_a = scene.f_a.template cast<Real>();
  if (scene.has_s()) in.f_s = scene.f_s.template cast<Real>();
  in.prop_roi = scene.prop_roi.template cast<Real>();
  in.prop_box = scene.prop_box.template cast<Real>();
  in.mask.assign(scene.prop_mask.begin(), scene.prop_mask.end());
  return in;
}

ParamSet<float> build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet<float> out;
  RngState base(seed, "params");
  add_model_params(out, cfg, base, "");
  return out;
}

template <class Real>
Tensor<Real> temporal_bottleneck(const Tensor<Real>& a, const std::vector<std::uint8_t>& mask,
                                 const ParamSet<Real>& p, const std::string& prefix,
                                 std::size_t heads, std::type_identity_t<Tape<Real>*> tape, Tensor<Real>* attn_out) {
  if (a.rank() != 3) throw ShapeError("temporal_bottleneck: expected (K,T,D), got " +
                                      shape_str(a.shape()));
  Tensor<Real> pooled = masked_mean_axis0(a, mask, tape);       // (T,D)
  Tensor<Real> pe = sinusoidal_pe<Real>(a.dim(1), a.dim(2));
  Tensor<Real> x = add(pooled, pe, tape);
  return multi_head_self_attention(x, p.at(prefix + "qkv.w"), p.at(prefix + "qkv.b"),
                                   p.at(prefix + "out.w"), p.at(prefix + "out.b"), heads,
                                   std::nullopt, tape, attn_out);
}

template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> mfe_layer(const Tensor<Real>& a, const Tensor<Real>& f,
                                                const std::vector<std::uint8_t>& mask,
                                                char modality, const ModelConfig& cfg,
                                                const ParamSet<Real>& p,
                                                const std::string& prefix, std::type_identity_t<Tape<Real>*> tape,
                                                LayerDiagnostics<Real>* diag) {
  const std::size_t k = a.dim(0), t = a.dim(1), d = a.dim(2);
  if (f.rank() != 3 || f.dim(0) != t || f.dim(2) != d)
    throw ShapeError("mfe_layer: context " + shape_str(f.shape()) + " does not match queries " +
                     shape_str(a.shape()));
  if (mask.size() != k)
    throw ShapeError("mfe_layer: mask size " + std::to_string(mask.size()) + " vs K " +
                     std::to_string(k));
  const std::size_t n = f.dim(1);
  const std::size_t m = k + n + 1;
  const std::string mod(1, modality);

  Tensor<Real>* bn_attn = nullptr;
  Tensor<Real> bn_attn_store;
  if (diag) bn_attn = &bn_attn_store;
  Tensor<Real> b = temporal_bottleneck(a, mask, p, prefix + "bn.", cfg.heads, tape, bn_attn);

  // Token sequence per time step: [K actors | N context | 1 bottleneck].
  Tensor<Real> actors = permute(a, {1, 0, 2}, tape);                       // (T,K,D)
  Tensor<Real> tokens = concat({actors, f, b.reshaped({t, std::size_t(1), d})}, 1, tape);

  // Learned type embeddings per token role, broadcast over time.
  Tensor<Real> types = concat({repeat_row(p.at(prefix + "type.actor"), k, tape),
                               repeat_row(p.at(prefix + "type.ctx"), n, tape),
                               repeat_row(p.at(prefix + "type.bn"), 1, tape)},
                              0, tape);                                    // (M,D)
  tokens = add(tokens, types, tape);

  // Fixed positions: none on actors or the bottleneck, modality-shaped on
  // context tokens.
  Tensor<Real> pos = concat({Tensor<Real>::zeros({k, d}), context_pe<Real>(modality, cfg),
                             Tensor<Real>::zeros({1, d})},
                            0, nullptr);
  tokens = add(tokens, pos, tape);

  std::vector<std::uint8_t> visible(m, 1);
  for (std::size_t i = 0; i < k; ++i) visible[i] = mask[i];
  std::optional<Tensor<Real>> key_bias = attention_key_bias<Real>(visible);

  Tensor<Real>* attn = nullptr;
  Tensor<Real> attn_store;
  if (diag) attn = &attn_store;
  Tensor<Real> out =
      encoder_block(tokens, key_bias, p, prefix + "block.", cfg.heads, tape, attn);

  if (diag) {
    diag->attention["mfe_" + mod] = attn_store;
    diag->attention["mfe_" + mod + ".bn"] = bn_attn_store;
  }

  // Split roles back out; the bottleneck output is discarded, masked actor
  // rows are forced back to exact zero.
  Tensor<Real> a_out = permute(slice(out, 1, 0, k, tape), {1, 0, 2}, tape);  // (K,T,D)
  a_out = scale_axis0(a_out, mask_weights<Real>(mask), tape);
  Tensor<Real> f_out = slice(out, 1, k, n, tape);                            // (T,N,D)
  return {a_out, f_out};
}

template <class Real>
Tensor<Real> temporal_align(const Tensor<Real>& x, std::size_t t_c, std::type_identity_t<Tape<Real>*> tape) {
  return resize_time(x, t_c, tape);
}

template <class Real>
Tensor<Real> temporal_dealign(const Tensor<Real>& x, std::size_t t_mod, std::type_identity_t<Tape<Real>*> tape) {
  return resize_time(x, t_mod, tape);
}

template <class Real>
GateWeights<Real> gate_weights(const std::type_identity_t<std::optional<Tensor<Real>>>& a_v,
                               const std::type_identity_t<std::optional<Tensor<Real>>>& a_a,
                               const std::type_identity_t<std::optional<Tensor<Real>>>& a_s, const ModelConfig& cfg,
                               const ParamSet<Real>& p, const std::string& prefix,
                               std::type_identity_t<Tape<Real>*> tape) {
  if (!a_v && !a_a && !a_s) throw UsageError("gate_weights: at least one modality required");
  const std::size_t k = (a_v ? a_v : a_a ? a_a : a_s)->dim(0);
  auto pool = [&](const std::optional<Tensor<Real>>& a) -> Tensor<Real> {
    if (!a) return Tensor<Real>::zeros({k, cfg.d});
    if (a->rank() != 3 || a->dim(0) != k || a->dim(1) != cfg.t_c || a->dim(2) != cfg.d)
      throw ShapeError("gate_weights: expected aligned (K,T_c,D), got " + shape_str(a->shape()));
    return mean_axis(*a, 1, tape);
  };
  Tensor<Real> pooled = concat({pool(a_v), pool(a_a), pool(a_s)}, 1, tape);  // (K,3D)
  Tensor<Real> h = gelu(linear(pooled, p.at(prefix + "fc1.w"), p.at(prefix + "fc1.b"), tape),
                        tape);
  Tensor<Real> g = sigmoid(linear(h, p.at(prefix + "fc2.w"), p.at(prefix + "fc2.b"), tape), tape);
  GateWeights<Real> out;
  if (cfg.scalar_gate) {
    // One value per (actor, modality), broadcast across channels.
    Tensor<Real> ones_row = Tensor<Real>::full({1, cfg.d}, Real(1));
    out.w_v = matmul(slice(g, 1, 0, 1, tape), ones_row, tape);
    out.w_a = matmul(slice(g, 1, 1, 1, tape), ones_row, tape);
    out.w_s = matmul(slice(g, 1, 2, 1, tape), ones_row, tape);
  } else {
    out.w_v = slice(g, 1, 0, cfg.d, tape);
    out.w_a = slice(g, 1, cfg.d, cfg.d, tape);
    out.w_s = slice(g, 1, 2 * cfg.d, cfg.d, tape);
  }
  return out;
}

template <class Real>
MfaResult<Real> mfa_layer(const std::type_identity_t<std::optional<Tensor<Real>>>& a_v,
                          const std::type_identity_t<std::optional<Tensor<Real>>>& a_a,
                          const std::type_identity_t<std::optional<Tensor<Real>>>& a_s, const ModelConfig& cfg,
                          const ParamSet<Real>& p, const std::string& prefix, GateMode mode,
                          std::type_identity_t<Tape<Real>*> tape) {
  if (!a_v && !a_a && !a_s) throw UsageError("mfa_layer: at least one modality required");
  std::optional<Tensor<Real>> aligned[3];
  const std::optional<Tensor<Real>>* inputs[3] = {&a_v, &a_a, &a_s};
  for (int i = 0; i < 3; ++i)
    if (*inputs[i]) aligned[i] = temporal_align(**inputs[i], cfg.t_c, tape);

  const std::size_t k = (aligned[0] ? aligned[0] : aligned[1] ? aligned[1] : aligned[2])->dim(0);
  GateWeights<Real> gates;
  if (mode == GateMode::kOnes) {
    Tensor<Real> one = Tensor<Real>::full({k, cfg.d}, Real(1));
    gates = {one, one, one};
  } else {
    gates = gate_weights(aligned[0], aligned[1], aligned[2], cfg, p, prefix + "gate.", tape);
  }
  Tensor<Real>* gate_of[3] = {&gates.w_v, &gates.w_a, &gates.w_s};

  // a_fuse = (1/|M|) sum over present modalities of gate (*) aligned query.
  std::optional<Tensor<Real>> gated[3];
  std::size_t present = 0;
  Tensor<Real> sum;
  for (int i = 0; i < 3; ++i) {
    if (!aligned[i]) continue;
    gated[i] = mul_time_broadcast(*aligned[i], *gate_of[i], tape);
    sum = present == 0 ? *gated[i] : add(sum, *gated[i], tape);
    ++present;
  }
  MfaResult<Real> out;
  out.a_fuse = scale(sum, Real(1) / static_cast<Real>(present), tape);

  const std::size_t t_mod[3] = {cfg.t_v, cfg.t_a, cfg.t_s};
  std::optional<Tensor<Real>>* next[3] = {&out.a_v, &out.a_a, &out.a_s};
  for (int i = 0; i < 3; ++i) {
    if (!aligned[i]) {
      *gate_of[i] = Tensor<Real>();  // absent modality: no gate to report
      continue;
    }
    Tensor<Real> updated = add(out.a_fuse, *gated[i], tape);
    *next[i] = temporal_dealign(updated, t_mod[i], tape);
  }
  out.gates = gates;
  return out;
}

template <class Real>
Tensor<Real> classify(const Tensor<Real>& a_fuse, const std::vector<std::uint8_t>& mask,
                      const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                      Tensor<Real>* logits_out) {
  if (a_fuse.rank() != 3)
    throw ShapeError("classify: expected (K,T,D), got " + shape_str(a_fuse.shape()));
  if (mask.size() != a_fuse.dim(0))
    throw ShapeError("classify: mask size " + std::to_string(mask.size()) + " vs K " +
                     std::to_string(a_fuse.dim(0)));
  Tensor<Real> pooled = mean_axis(a_fuse, 1, tape);  // (K,D)
  Tensor<Real> normed =
      layer_norm(pooled, p.at("head.ln.g"), p.at("head.ln.b"), ln_eps<Real>(), tape);
  Tensor<Real> logits = linear(normed, p.at("head.fc.w"), p.at("head.fc.b"), tape);
  if (logits_out) *logits_out = logits;
  Tensor<Real> scores = sigmoid(logits, tape);
  return scale_axis0(scores, mask_weights<Real>(mask), tape);
}

template <class Real>
ForwardResult<Real> forward(const ModelInput<Real>& in, const ModelConfig& cfg,
                            const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape, GateMode mode,
                            bool want_diag) {
  cfg.validate();
  if (!in.has_v() && !in.has_a() && !in.has_s())
    throw UsageError("forward: scene carries no modality stream");
  if (in.mask.size() != cfg.k)
    throw ShapeError("forward: mask size " + std::to_string(in.mask.size()) + " vs K " +
                     std::to_string(cfg.k));
  bool any_valid = false;
  for (auto v : in.mask) any_valid |= v != 0;
  if (!any_valid) throw UsageError("forward: no valid actor proposal");
  if (in.prop_roi.shape() != Shape{cfg.k, cfg.d_roi})
    throw ShapeError("forward: proposal features " + shape_str(in.prop_roi.shape()) +
                     " do not match config");
  if (in.has_v()) check_stream(in.f_v, "visual", cfg.t_v, cfg.n_v, cfg.c_in);
  if (in.has_a()) check_stream(in.f_a, "audio", cfg.t_a, cfg.n_a, cfg.c_in);
  if (in.has_s()) check_stream(in.f_s, "scene", cfg.t_s, cfg.n_s, cfg.c_in);

  const char mods[3] = {'v', 'a', 's'};
  const bool present[3] = {in.has_v(), in.has_a(), in.has_s()};
  const Tensor<Real>* streams[3] = {&in.f_v, &in.f_a, &in.f_s};
  const std::size_t t_mod[3] = {cfg.t_v, cfg.t_a, cfg.t_s};
  const std::vector<Real> mw = mask_weights<Real>(in.mask);

  // Queries start as a per-modality projection of the proposal feature,
  // repeated across that modality's time steps; context tokens enter through
  // a per-modality channel projection.
  std::optional<Tensor<Real>> a[3];
  Tensor<Real> f[3];
  for (int i = 0; i < 3; ++i) {
    if (!present[i]) continue;
    const std::string mod(1, mods[i]);
    Tensor<Real> q = linear(in.prop_roi, p.at("frontend.init_" + mod + ".w"),
                            p.at("frontend.init_" + mod + ".b"), tape);
    q = resize_time(q.reshaped({cfg.k, std::size_t(1), cfg.d}), t_mod[i], tape);
    a[i] = scale_axis0(q, mw, tape);
    f[i] = linear(*streams[i], p.at("frontend.proj_" + mod + ".w"),
                  p.at("frontend.proj_" + mod + ".b"), tape);
  }

  ForwardResult<Real> res;
  if (want_diag) res.diag.layers.resize(cfg.l);
  Tensor<Real> fuse;
  for (std::size_t l = 0; l < cfg.l; ++l) {
    const std::string layer = "layer." + std::to_string(l) + ".";
    LayerDiagnostics<Real>* diag = want_diag ? &res.diag.layers[l] : nullptr;
    for (int i = 0; i < 3; ++i) {
      if (!present[i]) continue;
      const std::string mod(1, mods[i]);
      auto [aq, fc] =
          mfe_layer(*a[i], f[i], in.mask, mods[i], cfg, p, layer + "mfe_" + mod + ".", tape, diag);
      a[i] = aq;
      f[i] = fc;
    }
    MfaResult<Real> mfa =
        mfa_layer(a[0], a[1], a[2], cfg, p, layer + "mfa.", mode, tape);
    a[0] = mfa.a_v;
    a[1] = mfa.a_a;
    a[2] = mfa.a_s;
    fuse = mfa.a_fuse;
    if (diag) diag->gates = mfa.gates;
  }
  res.scores = classify(fuse, in.mask, p, tape, &res.logits);
  res.boxes = in.prop_box;
  res.mask = in.mask;
  return res;
}

BaselineStrategy parse_strategy(const std::string& name) {
  if (name == "roi_concat") return BaselineStrategy::kRoiConcat;
  if (name == "roi_relation") return BaselineStrategy::kRoiRelation;
  if (name == "global_relation") return BaselineStrategy::kGlobalRelation;
  if (name == "late_score") return BaselineStrategy::kLateScore;
  if (name == "equal_weight") return BaselineStrategy::kEqualWeight;
  throw UsageError("unknown fusion strategy '" + name +
                   "' (expected roi_concat, roi_relation, global_relation, late_score, "
                   "equal_weight)");
}

std::string strategy_name(BaselineStrategy s) {
  switch (s) {
    case BaselineStrategy::kRoiConcat: return "roi_concat";
    case BaselineStrategy::kRoiRelation: return "roi_relation";
    case BaselineStrategy::kGlobalRelation: return "global_relation";
    case BaselineStrategy::kLateScore: return "late_score";
    case BaselineStrategy::kEqualWeight: return "equal_weight";
  }
  throw UsageError("unknown fusion strategy value");
}

ParamSet<float> build_baseline_params(BaselineStrategy s, const ModelConfig& cfg,
                                      std::uint64_t seed) {
  cfg.validate();
  ParamSet<float> out;
  RngState base(seed, "params");
  ParamBuilder b{out, base, ""};
  auto add_inits = [&] {
    b.prefix = "frontend.";
    for (char m : {'v', 'a', 's'}) b.matrix(std::string("init_") + m, cfg.d_roi, cfg.d);
  };
  switch (s) {
    case BaselineStrategy::kRoiConcat:
      add_inits();
      b.prefix = "base.";
      b.matrix("fc1", 3 * cfg.d, cfg.d);
      b.prefix = "";
      b.head(cfg);
      return out;
    case BaselineStrategy::kRoiRelation:
      add_inits();
      b.prefix = "base.type.";
      b.vec("v", cfg.d);
      b.vec("a", cfg.d);
      b.vec("s", cfg.d);
      b.prefix = "base.block.";
      b.block(cfg);
      b.prefix = "";
      b.head(cfg);
      return out;
    case BaselineStrategy::kGlobalRelation:
      add_inits();
      b.prefix = "frontend.";
      for (char m : {'v', 'a', 's'}) b.matrix(std::string("proj_") + m, cfg.c_in, cfg.d);
      b.prefix = "base.type.";
      b.vec("actor", cfg.d);
      b.vec("v", cfg.d);
      b.vec("a", cfg.d);
      b.vec("s", cfg.d);
      b.prefix = "base.block.";
      b.block(cfg);
      b.prefix = "";
      b.head(cfg);
      return out;
    case BaselineStrategy::kLateScore:
      for (char m : {'v', 'a', 's'})
        add_model_params(out, cfg, base, std::string("branch_") + m + ".");
      return out;
    case BaselineStrategy::kEqualWeight:
      add_model_params(out, cfg, base, "");
      return out;
  }
  throw UsageError("unknown fusion strategy value");
}

namespace {

// Per-modality projections of the proposal feature; absent modalities
// contribute zeros, mirroring the gate MLP's treatment of absent streams.
template <class Real>
std::vector<Tensor<Real>> actor_features(const ModelInput<Real>& in, const ModelConfig& cfg,
                                         const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape) {
  const bool present[3] = {in.has_v(), in.has_a(), in.has_s()};
  const char mods[3] = {'v', 'a', 's'};
  std::vector<Tensor<Real>> feats;
  for (int i = 0; i < 3; ++i) {
    if (!present[i]) {
      feats.push_back(Tensor<Real>::zeros({cfg.k, cfg.d}));
      continue;
    }
    const std::string mod(1, mods[i]);
    feats.push_back(linear(in.prop_roi, p.at("frontend.init_" + mod + ".w"),
                           p.at("frontend.init_" + mod + ".b"), tape));
  }
  return feats;
}

template <class Real>
Tensor<Real> head_scores(const Tensor<Real>& feats, const std::vector<std::uint8_t>& mask,
                         const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                         Tensor<Real>* logits_out = nullptr) {
  Tensor<Real> normed =
      layer_norm(feats, p.at("head.ln.g"), p.at("head.ln.b"), ln_eps<Real>(), tape);
  Tensor<Real> logits = linear(normed, p.at("head.fc.w"), p.at("head.fc.b"), tape);
  if (logits_out) *logits_out = logits;
  Tensor<Real> scores = sigmoid(logits, tape);
  return scale_axis0(scores, mask_weights<Real>(mask), tape);
}

template <class Real>
Tensor<Real> roi_concat_forward(const ModelInput<Real>& in, const ModelConfig& cfg,
                                const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                                Tensor<Real>* logits_out = nullptr) {
  Tensor<Real> cat = concat(actor_features(in, cfg, p, tape), 1, tape);  // (K,3D)
  Tensor<Real> h = gelu(linear(cat, p.at("base.fc1.w"), p.at("base.fc1.b"), tape), tape);
  return head_scores(h, in.mask, p, tape, logits_out);
}

template <class Real>
Tensor<Real> roi_relation_forward(const ModelInput<Real>& in, const ModelConfig& cfg,
                                  const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                                  Tensor<Real>* logits_out = nullptr) {
  auto feats = actor_features(in, cfg, p, tape);
  const char mods[3] = {'v', 'a', 's'};
  std::vector<Tensor<Real>> tokens;
  for (int i = 0; i < 3; ++i)
    tokens.push_back(add(feats[i],
                         repeat_row(p.at(std::string("base.type.") + mods[i]), cfg.k, tape),
                         tape));
  Tensor<Real> seq = concat(tokens, 0, tape);  // (3K, D)
  std::vector<std::uint8_t> visible;
  for (int i = 0; i < 3; ++i) visible.insert(visible.end(), in.mask.begin(), in.mask.end());
  std::optional<Tensor<Real>> bias = attention_key_bias<Real>(visible);
  Tensor<Real> out = encoder_block(seq, bias, p, "base.block.", cfg.heads, tape);
  Tensor<Real> fused = slice(out, 0, 0, cfg.k, tape);
  fused = add(fused, slice(out, 0, cfg.k, cfg.k, tape), tape);
  fused = add(fused, slice(out, 0, 2 * cfg.k, cfg.k, tape), tape);
  fused = scale(fused, Real(1) / Real(3), tape);
  return head_scores(fused, in.mask, p, tape, logits_out);
}

template <class Real>
Tensor<Real> global_relation_forward(const ModelInput<Real>& in, const ModelConfig& cfg,
                                     const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                                     Tensor<Real>* logits_out = nullptr) {
  auto feats = actor_features(in, cfg, p, tape);
  Tensor<Real> actor = scale(add(add(feats[0], feats[1], tape), feats[2], tape), Real(1) / Real(3),
                             tape);
  actor = add(actor, repeat_row(p.at("base.type.actor"), cfg.k, tape), tape);
  std::vector<Tensor<Real>> tokens{actor};
  std::vector<std::uint8_t> visible(in.mask.begin(), in.mask.end());
  const bool present[3] = {in.has_v(), in.has_a(), in.has_s()};
  const char mods[3] = {'v', 'a', 's'};
  const Tensor<Real>* streams[3] = {&in.f_v, &in.f_a, &in.f_s};
  for (int i = 0; i < 3; ++i) {
    if (!present[i]) continue;
    const std::string mod(1, mods[i]);
    Tensor<Real> ctx = linear(*streams[i], p.at("frontend.proj_" + mod + ".w"),
                              p.at("frontend.proj_" + mod + ".b"), tape);
    const std::size_t rows = ctx.dim(0) * ctx.dim(1);
    ctx = add(ctx.reshaped({rows, cfg.d}), repeat_row(p.at("base.type." + mod), rows, tape),
              tape);
    ctx = add(ctx, sinusoidal_pe<Real>(rows, cfg.d), tape);
    tokens.push_back(ctx);
    visible.insert(visible.end(), rows, std::uint8_t(1));
  }
  Tensor<Real> seq = concat(tokens, 0, tape);
  std::optional<Tensor<Real>> bias = attention_key_bias<Real>(visible);
  Tensor<Real> out = encoder_block(seq, bias, p, "base.block.", cfg.heads, tape);
  return head_scores(slice(out, 0, 0, cfg.k, tape), in.mask, p, tape, logits_out);
}

template <class Real>
Tensor<Real> late_score_forward(const ModelInput<Real>& in, const ModelConfig& cfg,
                                const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape) {
  const bool present[3] = {in.has_v(), in.has_a(), in.has_s()};
  const char mods[3] = {'v', 'a', 's'};
  Tensor<Real> sum;
  std::size_t branches = 0;
  for (int i = 0; i < 3; ++i) {
    if (!present[i]) continue;
    ModelInput<Real> solo = in;
    if (i != 0) solo.f_v = Tensor<Real>();
    if (i != 1) solo.f_a = Tensor<Real>();
    if (i != 2) solo.f_s = Tensor<Real>();
    ParamSet<Real> branch = sub_params(p, std::string("branch_") + mods[i] + ".");
    Tensor<Real> s = forward(solo, cfg, branch, tape).scores;
    sum = branches == 0 ? s : add(sum, s, tape);
    ++branches;
  }
  if (branches == 0) throw UsageError("late_score: scene carries no modality stream");
  return scale(sum, Real(1) / static_cast<Real>(branches), tape);
}

}  // namespace

template <class Real>
std::vector<Tensor<Real>> baseline_train_logits(BaselineStrategy s, const ModelInput<Real>& in,
                                                const ModelConfig& cfg, const ParamSet<Real>& p,
                                                std::type_identity_t<Tape<Real>*> tape) {
  cfg.validate();
  std::vector<Tensor<Real>> out;
  Tensor<Real> logits;
  switch (s) {
    case BaselineStrategy::kRoiConcat:
      roi_concat_forward(in, cfg, p, tape, &logits);
      out.push_back(logits);
      return out;
    case BaselineStrategy::kRoiRelation:
      roi_relation_forward(in, cfg, p, tape, &logits);
      out.push_back(logits);
      return out;
    case BaselineStrategy::kGlobalRelation:
      global_relation_forward(in, cfg, p, tape, &logits);
      out.push_back(logits);
      return out;
    case BaselineStrategy::kLateScore: {
      const bool present[3] = {in.has_v(), in.has_a(), in.has_s()};
      const char mods[3] = {'v', 'a', 's'};
      for (int i = 0; i < 3; ++i) {
        if (!present[i]) continue;
        ModelInput<Real> solo = in;
        if (i != 0) solo.f_v = Tensor<Real>();
        if (i != 1) solo.f_a = Tensor<Real>();
        if (i != 2) solo.f_s = Tensor<Real>();
        ParamSet<Real> branch = sub_params(p, std::string("branch_") + mods[i] + ".");
        out.push_back(forward(solo, cfg, branch, tape).logits);
      }
      if (out.empty()) throw UsageError("late_score: scene carries no modality stream");
      return out;
    }
    case BaselineStrategy::kEqualWeight:
      out.push_back(forward(in, cfg, p, tape, GateMode::kOnes).logits);
      return out;
  }
  throw UsageError("unknown fusion strategy value");
}

template <class Real>
Tensor<Real> baseline_forward(BaselineStrategy s, const ModelInput<Real>& in,
                              const ModelConfig& cfg, const ParamSet<Real>& p,
                              std::type_identity_t<Tape<Real>*> tape) {
  cfg.validate();
  switch (s) {
    case BaselineStrategy::kRoiConcat:
      return roi_concat_forward(in, cfg, p, tape);
    case BaselineStrategy::kRoiRelation:
      return roi_relation_forward(in, cfg, p, tape);
    case BaselineStrategy::kGlobalRelation:
      return global_relation_forward(in, cfg, p, tape);
    case BaselineStrategy::kLateScore:
      return late_score_forward(in, cfg, p, tape);
    case BaselineStrategy::kEqualWeight:
      return forward(in, cfg, p, tape, GateMode::kOnes).scores;
  }
  throw UsageError("unknown fusion strategy value");
}

template <class Real>
void save_gates_csv(const std::string& path, const Diagnostics<Real>& diag) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "layer,modality,actor,gate_mean\n";
  for (std::size_t l = 0; l < diag.layers.size(); ++l) {
    const GateWeights<Real>& g = diag.layers[l].gates;
    const Tensor<Real>* gs[3] = {&g.w_v, &g.w_a, &g.w_s};
    const char* names[3] = {"v", "a", "s"};
    for (int i = 0; i < 3; ++i) {
      if (gs[i]->empty()) continue;
      const std::size_t k = gs[i]->dim(0), d = gs[i]->dim(1);
      for (std::size_t a = 0; a < k; ++a) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += (*gs[i])[a * d + j];
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.8g", mean / static_cast<double>(d));
        out << l << ',' << names[i] << ',' << a << ',' << buf << '\n';
      }
    }
  }
  if (!out) throw IoError("write failed for " + path);
}

template <class Real>
void save_attention_maps(const std::string& path, const Diagnostics<Real>& diag) {
  NamedTensors entries;
  for (std::size_t l = 0; l < diag.layers.size(); ++l)
    for (const auto& [key, t] : diag.layers[l].attention)
      if (!t.empty())
        entries.emplace_back("layer." + std::to_string(l) + "." + key, AnyTensor::wrap(t));
  save_named_tensors(path, entries);
}

#define AMFN_INSTANTIATE_MODEL(Real)                                                           \
  template ModelInput<Real> to_model_input<Real>(const Scene&);                                \
  template Tensor<Real> temporal_bottleneck<Real>(                                             \
      const Tensor<Real>&, const std::vector<std::uint8_t>&, const ParamSet<Real>&,            \
      const std::string&, std::size_t, Tape<Real>*, Tensor<Real>*);                            \
  template std::pair<Tensor<Real>, Tensor<Real>> mfe_layer<Real>(                              \
      const Tensor<Real>&, const Tensor<Real>&, const std::vector<std::uint8_t>&, char,        \
      const ModelConfig&, const ParamSet<Real>&, const std::string&, Tape<Real>*,              \
      LayerDiagnostics<Real>*);                                                                \
  template Tensor<Real> temporal_align<Real>(const Tensor<Real>&, std::size_t, Tape<Real>*);   \
  template Tensor<Real> temporal_dealign<Real>(const Tensor<Real>&, std::size_t, Tape<Real>*); \
  template GateWeights<Real> gate_weights<Real>(                                               \
      const std::optional<Tensor<Real>>&, const std::optional<Tensor<Real>>&,                  \
      const std::optional<Tensor<Real>>&, const ModelConfig&, const ParamSet<Real>&,           \
      const std::string&, Tape<Real>*);                                                        \
  template MfaResult<Real> mfa_layer<Real>(                                                    \
      const std::optional<Tensor<Real>>&, const std::optional<Tensor<Real>>&,                  \
      const std::optional<Tensor<Real>>&, const ModelConfig&, const ParamSet<Real>&,           \
      const std::string&, GateMode, Tape<Real>*);                                              \
  template Tensor<Real> classify<Real>(const Tensor<Real>&, const std::vector<std::uint8_t>&,  \
                                       const ParamSet<Real>&, Tape<Real>*, Tensor<Real>*);     \
  template ForwardResult<Real> forward<Real>(const ModelInput<Real>&, const ModelConfig&,      \
                                             const ParamSet<Real>&, Tape<Real>*, GateMode,     \
                                             bool);                                            \
  template std::vector<Tensor<Real>> baseline_train_logits<Real>(                              \
      BaselineStrategy, const ModelInput<Real>&, const ModelConfig&, const ParamSet<Real>&,    \
      Tape<Real>*);                                                                            \
  template Tensor<Real> baseline_forward<Real>(BaselineStrategy, const ModelInput<Real>&,      \
                                               const ModelConfig&, const ParamSet<Real>&,      \
                                               Tape<Real>*);                                   \
  template void save_gates_csv<Real>(const std::string&, const Diagnostics<Real>&);            \
  template void save_attention_maps<Real>(const std::string&, const Diagnostics<Real>&);

AMFN_INSTANTIATE_MODEL(float)
AMFN_INSTANTIATE_MODEL(double)
#undef AMFN_INSTANTIATE_MODEL

}  // namespace amfn
