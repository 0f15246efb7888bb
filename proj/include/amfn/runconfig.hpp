// SPDX-License-Identifier: Apache-2.0
#pragma once
// Run-level configuration: one strict key=value file drives dataset
// generation, training, and evaluation. A profile (toy or paper) supplies the
// defaults; explicit keys override them regardless of where the profile line
// sits in the file. Echoing with format_config and re-parsing reproduces the
// configuration exactly.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "amfn/dataset.hpp"
#include "amfn/learn.hpp"
#include "amfn/model.hpp"

namespace amfn {

struct RunConfig {
  std::string profile = "toy";
  std::uint64_t seed = 0;
  std::size_t workers = 0;       // 0 = hardware concurrency
  std::string strategy = "full"; // "full" or a baseline fusion strategy
  double iou_thr = 0.5;

  ModelConfig model;
  TrainConfig train;             // seed/workers mirrored from the fields above

  std::size_t train_scenes = 800;
  std::size_t val_scenes = 200;
  double noise_sigma = 0.1;
  double label_rate = 0.25;
  std::size_t k_gt_max = 3;
  double recall = 1.0;
  double jitter = 0.02;
  std::vector<std::string> class_cues;  // empty = automatic palette

  void validate() const;
  // Training config with the run-level seed and worker count applied.
  TrainConfig train_config() const;
  // Manifest for "train" or "val". The val split draws from seed + 1 so the
  // two splits never share scenes.
  DatasetManifest manifest(const std::string& split) const;
  // Strategy string in the form the model layer expects ("" = full model).
  std::string strategy_arg() const;
};

// Cue assignment when the config does not pin one: cycle a palette covering
// single, paired and triple modality cues.
std::vector<std::string> auto_cues(std::size_t n_cls);

RunConfig profile_defaults(const std::string& name);

RunConfig parse_config(const std::string& path);
// Same parser over an in-memory string; `origin` names the source in errors.
RunConfig parse_config_text(const std::string& text, const std::string& origin);

std::string format_config(const RunConfig& cfg);
void save_config(const std::string& path, const RunConfig& cfg);

}  // namespace amfn
