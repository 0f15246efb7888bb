// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amfn/rng.hpp"
#include "amfn/tensor.hpp"

namespace amfn {

// Generation recipe for one synthetic split; regeneration from a manifest is
// bit-identical, so the manifest file fully names its dataset.
struct DatasetManifest {
  std::string split = "train";
  std::size_t scenes = 0;
  std::size_t n_cls = 8;
  std::uint64_t seed = 0;
  double noise_sigma = 0.1;
  double label_rate = 0.25;    // per (actor, class) activation probability
  std::size_t k_gt_max = 3;    // actors per scene ~ U{1..k_gt_max}
  std::size_t k_slots = 5;     // proposal slots K (>= k_gt_max)
  double recall = 1.0;         // per-actor keep probability in the detector sim
  double jitter = 0.02;        // +/- box coordinate jitter in the detector sim
  std::size_t channels = 64;   // stream channel width
  std::size_t d_roi = 1024;    // proposal feature width
  std::size_t t_v = 2, n_v = 9;
  std::size_t t_a = 4, n_a = 4;
  std::size_t t_s = 2, n_s = 4;
  bool gen_v = true, gen_a = true, gen_s = true;
  // Per class, the modalities its cue is planted into: a string over {v,a,s}.
  std::vector<std::string> class_cues;

  void validate() const;
};

// One synthetic keyframe example. Streams and features are float32, the
// training dtype; absent streams are empty tensors.
struct Scene {
  int id = 0;
  Tensor<float> f_v;         // (T_v, N_v, C)
  Tensor<float> f_a;         // (T_a, N_a, C)
  Tensor<float> f_s;         // (T_s, N_s, C)
  Tensor<float> prop_box;    // (K, 4) normalized x1 y1 x2 y2
  Tensor<float> prop_conf;   // (K)
  Tensor<float> prop_roi;    // (K, D_roi)
  std::vector<char> prop_mask;           // K entries, 1 = valid
  std::vector<int> prop_gt;              // K entries, source actor index or -1
  Tensor<float> gt_box;                  // (G, 4)
  std::vector<std::uint64_t> gt_labels;  // G multi-hot bitmasks over N_cls

  bool has_v() const { return !f_v.empty(); }
  bool has_a() const { return !f_a.empty(); }
  bool has_s() const { return !f_s.empty(); }
  std::size_t n_gt() const { return gt_labels.size(); }
  std::size_t n_slots() const { return prop_mask.size(); }
  std::size_t n_valid() const;
};

// The fixed unit cue vector planted for (class, modality); a pure function of
// the manifest seed.
Tensor<float> cue_vector(const DatasetManifest& m, std::size_t cls, char modality);

// Box-geometry encoding used for proposal features: sinusoid features of the
// scaled center/size coordinates, concatenated to d_roi values.
std::vector<double> roi_geometry(double x1, double y1, double x2, double y2, std::size_t d_roi);

Scene generate_scene(const DatasetManifest& m, std::size_t scene_id);
std::vector<Scene> generate_dataset(const DatasetManifest& m, std::size_t workers = 1);

void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);

// Directory layout: <dir>/manifest.txt plus, per scene, an embeddings file
// scene_<id>.emb (JVT1 named tensors) and an annotations file scene_<id>.ann
// with one text line per ground-truth actor: scene_id x1 y1 x2 y2 bitmask.
void save_scene(const std::string& dir, const Scene& scene);
Scene load_scene(const std::string& dir, int scene_id);
void save_dataset(const std::string& dir, const DatasetManifest& m,
                  const std::vector<Scene>& scenes);
std::vector<Scene> load_dataset(const std::string& dir, const DatasetManifest& m);

// Drops the given streams from a loaded scene (modality ablation).
Scene restrict_modalities(Scene s, bool keep_v, bool keep_a, bool keep_s);

}  // namespace amfn
