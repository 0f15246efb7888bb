// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "amfn/dataset.hpp"
#include "amfn/ops.hpp"
#include "amfn/params.hpp"

namespace amfn {

// Actor-centric multi-modal fusion network: per-modality encoders that mix
// actor queries with context tokens through a bottleneck summary, a gated
// fusion stage that exchanges information across modalities at a common
// temporal rate, repeated for `l` layers, then a per-actor classifier.
struct ModelConfig {
  std::size_t l = 2;            // fusion layers
  std::size_t d = 64;           // embedding width
  std::size_t k = 5;            // actor proposal slots
  std::size_t n_cls = 8;
  std::size_t t_v = 2, n_v = 9;   // visual steps / grid cells
  std::size_t t_a = 4, n_a = 4;   // audio steps / tokens per step
  std::size_t t_s = 2, n_s = 4;   // scene steps / tokens per step
  std::size_t t_c = 2;            // fusion rate; must equal t_v
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t gate_ratio = 4;     // gate MLP bottleneck: 3d -> 3d/r -> out
  std::size_t c_in = 64;          // stream channel width entering proj_*
  std::size_t d_roi = 64;         // proposal feature width entering init_*
  bool scalar_gate = false;       // one gate value per (actor, modality)
                                  // instead of per channel

  void validate() const;
};

// Sigmoid gates per actor and channel, one per modality. Absent modalities
// hold empty tensors.
template <class Real>
struct GateWeights {
  Tensor<Real> w_v, w_a, w_s;
};

enum class GateMode {
  kLearned,  // gate MLP + sigmoid
  kOnes,     // bypass: every gate pinned to exactly 1 (equal-weight fusion)
};

// Detached per-layer observability: gates and post-softmax attention maps
// (keys "mfe_v", "mfe_v.bn", ... as (T,H,M,M) / (1,H,T,T) tensors).
template <class Real>
struct LayerDiagnostics {
  GateWeights<Real> gates;
  std::map<std::string, Tensor<Real>> attention;
};

template <class Real>
struct Diagnostics {
  std::vector<LayerDiagnostics<Real>> layers;
};

// Model-facing view of one scene. Absent streams are empty tensors; mask
// flags the valid proposal slots.
template <class Real>
struct ModelInput {
  Tensor<Real> f_v, f_a, f_s;        // (T, N, c_in)
  Tensor<Real> prop_roi;             // (K, d_roi)
  Tensor<Real> prop_box;             // (K, 4)
  std::vector<std::uint8_t> mask;    // K

  bool has_v() const { return !f_v.empty(); }
  bool has_a() const { return !f_a.empty(); }
  bool has_s() const { return !f_s.empty(); }
};

template <class Real>
ModelInput<Real> to_model_input(const Scene& scene);

template <class Real>
struct ForwardResult {
  Tensor<Real> scores;              // (K, N_cls), sigmoid, masked rows zero
  Tensor<Real> logits;              // (K, N_cls), pre-sigmoid head output for the loss;
                                    // masked rows carry no meaning and are simply ignored
  Tensor<Real> boxes;               // (K, 4), proposal boxes verbatim
  std::vector<std::uint8_t> mask;   // K
  Diagnostics<Real> diag;           // filled only when requested
};

// Parameter construction. Names follow
//   frontend.{proj_v,proj_a,proj_s,init_v,init_a,init_s}.{w,b}
//   layer.<l>.mfe_<m>.block.{ln1,qkv,out,ln2,ffn1,ffn2}.{g,b,w}
//   layer.<l>.mfe_<m>.bn.{qkv,out}.{w,b}
//   layer.<l>.mfe_<m>.type.{actor,ctx,bn}
//   layer.<l>.mfa.gate.{fc1,fc2}.{w,b}
//   head.{ln.{g,b},fc.{w,b}}
ParamSet<float> build_params(const ModelConfig& cfg, std::uint64_t seed);

// Per-actor summary over time: masked mean over valid actors, temporal
// sinusoidal encoding, one self-attention along time. (K,T,D) -> (T,D).
template <class Real>
Tensor<Real> temporal_bottleneck(const Tensor<Real>& a, const std::vector<std::uint8_t>& mask,
                                 const ParamSet<Real>& p, const std::string& prefix,
                                 std::size_t heads, std::type_identity_t<Tape<Real>*> tape,
                                 Tensor<Real>* attn_out = nullptr);

// One per-modality encoder layer. At every time step the token sequence is
// [K actors | N context | 1 bottleneck]; outputs are split back apart and the
// bottleneck output is discarded. Returns (actor queries (K,T,D), context
// (T,N,D)). `modality` picks the context position encoding: 'v' = 2D grid,
// 'a'/'s' = 1D token index.
template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> mfe_layer(const Tensor<Real>& a, const Tensor<Real>& f,
                                                const std::vector<std::uint8_t>& mask,
                                                char modality, const ModelConfig& cfg,
                                                const ParamSet<Real>& p,
                                                const std::string& prefix, std::type_identity_t<Tape<Real>*> tape,
                                                LayerDiagnostics<Real>* diag = nullptr);

// Axis-1 resampling between a modality's native rate and the fusion rate:
// contiguous window means when shrinking, nearest repetition when growing.
template <class Real>
Tensor<Real> temporal_align(const Tensor<Real>& x, std::size_t t_c, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> temporal_dealign(const Tensor<Real>& x, std::size_t t_mod, std::type_identity_t<Tape<Real>*> tape);

// Fusion gates from time-pooled concatenated queries: (K,3D) -> MLP ->
// sigmoid. Absent modalities contribute zeros to the MLP input; returned
// gates are populated for all three modalities.
template <class Real>
GateWeights<Real> gate_weights(const std::type_identity_t<std::optional<Tensor<Real>>>& a_v,
                               const std::type_identity_t<std::optional<Tensor<Real>>>& a_a,
                               const std::type_identity_t<std::optional<Tensor<Real>>>& a_s, const ModelConfig& cfg,
                               const ParamSet<Real>& p, const std::string& prefix,
                               std::type_identity_t<Tape<Real>*> tape);

template <class Real>
struct MfaResult {
  std::optional<Tensor<Real>> a_v, a_a, a_s;  // next-layer queries, native rates
  Tensor<Real> a_fuse;                        // (K, T_c, D)
  GateWeights<Real> gates;                    // empty slots for absent modalities
};

// Gated fusion: align present queries to t_c, gate, average over the present
// set, add the gated residual per modality, de-align back to native rates.
template <class Real>
MfaResult<Real> mfa_layer(const std::type_identity_t<std::optional<Tensor<Real>>>& a_v,
                          const std::type_identity_t<std::optional<Tensor<Real>>>& a_a,
                          const std::type_identity_t<std::optional<Tensor<Real>>>& a_s, const ModelConfig& cfg,
                          const ParamSet<Real>& p, const std::string& prefix, GateMode mode,
                          std::type_identity_t<Tape<Real>*> tape);

// (K,T_c,D) -> (K,N_cls): time mean, layer norm, linear, sigmoid; masked
// actor rows come out exactly zero. logits_out, when given, receives the
// pre-sigmoid linear output (still on the tape).
template <class Real>
Tensor<Real> classify(const Tensor<Real>& a_fuse, const std::vector<std::uint8_t>& mask,
                      const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                      Tensor<Real>* logits_out = nullptr);

template <class Real>
ForwardResult<Real> forward(const ModelInput<Real>& in, const ModelConfig& cfg,
                            const ParamSet<Real>& p, std::type_identity_t<Tape<Real>*> tape,
                            GateMode mode = GateMode::kLearned, bool want_diag = false);

// Fusion baselines for the ablation harness.
enum class BaselineStrategy {
  kRoiConcat,       // concatenated per-modality actor features -> MLP head
  kRoiRelation,     // one encoder block across per-modality actor tokens
  kGlobalRelation,  // one encoder block across actors and all context tokens
  kLateScore,       // independent single-modality models, scores averaged
  kEqualWeight,     // full model with gates pinned to 1
};

BaselineStrategy parse_strategy(const std::string& name);
std::string strategy_name(BaselineStrategy s);

ParamSet<float> build_baseline_params(BaselineStrategy s, const ModelConfig& cfg,
                                      std::uint64_t seed);

// Pre-sigmoid head outputs for training: one tensor per independently
// supervised head. Every strategy yields a single entry except late score
// fusion, which yields one per present modality branch (branches are trained
// on their own losses; only evaluation averages their scores).
template <class Real>
std::vector<Tensor<Real>> baseline_train_logits(BaselineStrategy s, const ModelInput<Real>& in,
                                                const ModelConfig& cfg, const ParamSet<Real>& p,
                                                std::type_identity_t<Tape<Real>*> tape);

template <class Real>
Tensor<Real> baseline_forward(BaselineStrategy s, const ModelInput<Real>& in,
                              const ModelConfig& cfg, const ParamSet<Real>& p,
                              std::type_identity_t<Tape<Real>*> tape);

// Gate observability exports: one CSV row per (layer, modality, actor) with
// the channel-mean gate, and attention maps as a named-tensor file.
template <class Real>
void save_gates_csv(const std::string& path, const Diagnostics<Real>& diag);
template <class Real>
void save_attention_maps(const std::string& path, const Diagnostics<Real>& diag);

#define AMFN_DECLARE_MODEL(Real)                                                               \
  extern template ModelInput<Real> to_model_input<Real>(const Scene&);                         \
  extern template Tensor<Real> temporal_bottleneck<Real>(                                      \
      const Tensor<Real>&, const std::vector<std::uint8_t>&, const ParamSet<Real>&,            \
      const std::string&, std::size_t, Tape<Real>*, Tensor<Real>*);                            \
  extern template std::pair<Tensor<Real>, Tensor<Real>> mfe_layer<Real>(                       \
      const Tensor<Real>&, const Tensor<Real>&, const std::vector<std::uint8_t>&, char,        \
      const ModelConfig&, const ParamSet<Real>&, const std::string&, Tape<Real>*,              \
      LayerDiagnostics<Real>*);                                                                \
  extern template Tensor<Real> temporal_align<Real>(const Tensor<Real>&, std::size_t,          \
                                                    Tape<Real>*);                              \
  extern template Tensor<Real> temporal_dealign<Real>(const Tensor<Real>&, std::size_t,        \
                                                      Tape<Real>*);                            \
  extern template GateWeights<Real> gate_weights<Real>(                                        \
      const std::optional<Tensor<Real>>&, const std::optional<Tensor<Real>>&,                  \
      const std::optional<Tensor<Real>>&, const ModelConfig&, const ParamSet<Real>&,           \
      const std::string&, Tape<Real>*);                                                        \
  extern template MfaResult<Real> mfa_layer<Real>(                                             \
      const std::optional<Tensor<Real>>&, const std::optional<Tensor<Real>>&,                  \
      const std::optional<Tensor<Real>>&, const ModelConfig&, const ParamSet<Real>&,           \
      const std::string&, GateMode, Tape<Real>*);                                              \
  extern template Tensor<Real> classify<Real>(const Tensor<Real>&,                             \
                                              const std::vector<std::uint8_t>&,                \
                                              const ParamSet<Real>&, Tape<Real>*,              \
                                              Tensor<Real>*);                                  \
  extern template ForwardResult<Real> forward<Real>(const ModelInput<Real>&,                   \
                                                    const ModelConfig&, const ParamSet<Real>&, \
                                                    Tape<Real>*, GateMode, bool);              \
  extern template std::vector<Tensor<Real>> baseline_train_logits<Real>(                       \
      BaselineStrategy, const ModelInput<Real>&, const ModelConfig&, const ParamSet<Real>&,    \
      Tape<Real>*);                                                                            \
  extern template Tensor<Real> baseline_forward<Real>(BaselineStrategy,                        \
                                                      const ModelInput<Real>&,                 \
                                                      const ModelConfig&, const ParamSet<Real>&, \
                                                      Tape<Real>*);                            \
  extern template void save_gates_csv<Real>(const std::string&, const Diagnostics<Real>&);     \
  extern template void save_attention_maps<Real>(const std::string&, const Diagnostics<Real>&);

AMFN_DECLARE_MODEL(float)
AMFN_DECLARE_MODEL(double)
#undef AMFN_DECLARE_MODEL

}  // namespace amfn
