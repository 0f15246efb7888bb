// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "amfn/metrics.hpp"
#include "amfn/model.hpp"
#include "amfn/rng.hpp"

namespace amfn {

// ---------------------------------------------------------------------------
// Loss

struct FocalConfig {
  double alpha = 0.25;  // positive-cell weight; negatives get 1 - alpha
  double gamma = 2.0;   // focusing exponent; 0 reduces to weighted BCE
  void validate() const;
};

// Multi-hot 0/1 targets (K, n_cls) for a scene's proposal slots: each valid
// slot inherits its source actor's labels; padded slots stay all-zero.
template <class Real>
Tensor<Real> to_targets(const Scene& scene, std::size_t n_cls);

// Mean over valid (actor, class) cells of -alpha_t (1 - p_t)^gamma log p_t
// with p_t the predicted probability of the cell's true state. Computed as a
// stable composite on logits z: positive cells alpha sigmoid(-z)^gamma
// softplus(-z), negative cells (1-alpha) sigmoid(z)^gamma softplus(z).
template <class Real>
Tensor<Real> sigmoid_focal_loss(const Tensor<Real>& logits, const Tensor<Real>& targets,
                                const std::vector<std::uint8_t>& mask, const FocalConfig& cfg,
                                std::type_identity_t<Tape<Real>*> tape);

// ---------------------------------------------------------------------------
// Optimizer

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  void validate() const;
};

// Adam moments in double precision, keyed and shaped like the ParamSet.
struct OptimState {
  OptimConfig cfg;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

OptimState init_optim(const ParamSet<float>& params, const OptimConfig& cfg = {});

// Batch gradient accumulator, keyed like the ParamSet, flat per tensor.
using GradMap = std::map<std::string, std::vector<double>>;

// Frontend projections are this artifact's analog of a pretrained backbone
// and train in their own (typically smaller) learning-rate group.
bool is_frontend_param(const std::string& name);

// One decoupled-weight-decay Adam step, elementwise in double precision:
// theta *= 1 - lr*lambda first, then the bias-corrected moment update.
void adamw_step(ParamSet<float>& params, const GradMap& grads, OptimState& state,
                double lr_frontend, double lr_rest);

// ---------------------------------------------------------------------------
// Schedule and loop configuration

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 8;
  double lr_frontend = 1e-5;  // backbone-analog group
  double lr_rest = 1e-4;
  std::size_t drop_epoch = 7;  // first epoch trained at the reduced rate
  double drop_factor = 10.0;
  std::uint64_t seed = 0;
  bool flip = true;     // horizontal mirror of the visual grid and boxes
  bool specaug = true;  // time/channel masking on the audio stream
  FocalConfig focal;
  OptimConfig optim;
  std::size_t workers = 0;  // 0 = default_workers(); results never depend on it
  void validate() const;
};

// (lr_frontend, lr_rest) for a 1-based epoch: base rates before drop_epoch,
// base/drop_factor at and after it. A drop_epoch beyond the last epoch gives
// a constant schedule.
std::pair<double, double> lr_at(std::size_t epoch, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Augmentation

// Mirrors the visual token grid along x, reflects the valid boxes, and
// rebuilds their geometry features while preserving each feature's additive
// noise component. Streams other than the visual one are untouched.
ModelInput<float> flip_horizontal(ModelInput<float> in);

// Feature-level SpecAugment analog: zeroes one random time span (up to T/4
// steps) and one random channel band (up to C/8 channels) of (T,N,C) audio
// tokens. Four draws are consumed regardless of the span lengths.
Tensor<float> spec_augment_features(const Tensor<float>& f_a, RngState& rng);

// ---------------------------------------------------------------------------
// Training loop

struct TrainHistory {
  // One entry per completed epoch.
  std::vector<double> train_loss, val_map, lr_frontend, lr_rest;
};

struct Checkpoint {
  ParamSet<float> params;
  OptimState optim;
  ModelConfig model;     // config echo
  TrainConfig train;     // config echo
  std::string strategy;  // "" = full model, else a fusion baseline name
  std::size_t epoch = 0;
  TrainHistory history;
};

// Single-file binary checkpoint in the named-tensor container; parameters
// stay f32, optimizer moments and scalars f64.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// CSV history: epoch,train_loss,val_map,lr (lr = the non-frontend group).
void save_history_csv(const std::string& path, const TrainHistory& history);

// Every valid (actor, class) pair becomes one detection carrying the slot's
// proposal box and sigmoid score.
void collect_detections(const ForwardResult<float>& r, int scene_id,
                        std::vector<Detection>& out);
void collect_ground_truth(const Scene& scene, std::vector<GroundTruthBox>& out);

// Frame-mAP of a parameter set over a scene list ("" = full model).
double evaluate_map(const ModelConfig& mc, const ParamSet<float>& params,
                    const std::vector<Scene>& scenes, const std::string& strategy = "",
                    std::size_t workers = 0);

// Minibatch AdamW on the focal loss. Per-epoch RNG derives from (seed, epoch)
// only, so a resumed run reproduces the uninterrupted one bit for bit.
// `resume`, when given, must echo the same configs; autosave_path, when set,
// receives the checkpoint after every epoch.
Checkpoint train_model(const ModelConfig& mc, const TrainConfig& tc,
                       const std::vector<Scene>& train_scenes,
                       const std::vector<Scene>& val_scenes, const std::string& strategy = "",
                       const Checkpoint* resume = nullptr,
                       const std::string& autosave_path = "");

#define AMFN_DECLARE_LEARN(Real)                                                           \
  extern template Tensor<Real> to_targets<Real>(const Scene&, std::size_t);                \
  extern template Tensor<Real> sigmoid_focal_loss<Real>(                                   \
      const Tensor<Real>&, const Tensor<Real>&, const std::vector<std::uint8_t>&,          \
      const FocalConfig&, Tape<Real>*);

AMFN_DECLARE_LEARN(float)
AMFN_DECLARE_LEARN(double)
#undef AMFN_DECLARE_LEARN

}  // namespace amfn
