// SPDX-License-Identifier: Apache-2.0
#include "amfn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "amfn/common.hpp"
#include "amfn/metrics.hpp"
#include "amfn/ops.hpp"
#include "amfn/serialize.hpp"

namespace fs = std::filesystem;

namespace amfn {

namespace {

constexpr double kMinSide = 0.25;
constexpr double kMaxSide = 0.6;
constexpr double kMaxPairIou = 0.5;
constexpr int kBoxRetries = 100;

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string scene_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05d", id);
  return buf;
}

bool cue_has(const std::string& cues, char mod) {
  return cues.find(mod) != std::string::npos;
}

std::size_t grid_side(std::size_t n_v) {
  auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n_v))));
  return g;
}

// Adds vec (length c) to every channel row selected by `rows` of a
// (t, n, c) accumulation buffer.
void add_rows(std::vector<double>& buf, std::size_t t, std::size_t n, std::size_t c,
              const std::vector<double>& vec, const std::vector<std::size_t>& rows) {
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t r : rows) {
      double* dst = buf.data() + (ti * n + r) * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += vec[j];
    }
}

Tensor<float> to_f32(Shape shape, const std::vector<double>& vals) {
  std::vector<float> out(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) out[i] = static_cast<float>(vals[i]);
  return Tensor<float>::from(std::move(shape), std::move(out));
}

std::vector<double> unit_cue(RngState rng, std::size_t c) {
  std::vector<double> v(c);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

}  // namespace

void DatasetManifest::validate() const {
  if (split.empty()) throw ConfigError("manifest: split name must be non-empty");
  if (n_cls < 2 || n_cls > 64)
    throw ConfigError("manifest: n_cls " + std::to_string(n_cls) +
                      " outside [2, 64] (labels are 64-bit masks)");
  if (class_cues.size() != n_cls)
    throw ConfigError("manifest: class_cues lists " + std::to_string(class_cues.size()) +
                      " classes, n_cls is " + std::to_string(n_cls));
  for (std::size_t c = 0; c < class_cues.size(); ++c) {
    const std::string& cues = class_cues[c];
    if (cues.empty())
      throw ConfigError("manifest: class " + std::to_string(c) + " has no cue modality");
    for (char m : cues) {
      if (m != 'v' && m != 'a' && m != 's')
        throw ConfigError("manifest: class " + std::to_string(c) + " cue '" +
                          std::string(1, m) + "' is not one of v, a, s");
      if ((m == 'v' && !gen_v) || (m == 'a' && !gen_a) || (m == 's' && !gen_s))
        throw ConfigError("manifest: class " + std::to_string(c) + " is cued on '" +
                          std::string(1, m) + "' but that stream is not generated");
      if (std::count(cues.begin(), cues.end(), m) != 1)
        throw ConfigError("manifest: class " + std::to_string(c) + " repeats cue '" +
                          std::string(1, m) + "'");
    }
  }
  if (k_gt_max < 1) throw ConfigError("manifest: k_gt_max must be at least 1");
  if (k_slots < k_gt_max)
    throw ConfigError("manifest: k_slots " + std::to_string(k_slots) + " below k_gt_max " +
                      std::to_string(k_gt_max));
  if (!(recall > 0.0 && recall <= 1.0))
    throw ConfigError("manifest: recall must lie in (0, 1]");
  if (!(jitter >= 0.0 && jitter <= 0.1))
    throw ConfigError("manifest: jitter must lie in [0, 0.1] so jittered boxes stay boxes");
  if (noise_sigma < 0.0) throw ConfigError("manifest: noise_sigma must be non-negative");
  if (!(label_rate > 0.0 && label_rate <= 1.0))
    throw ConfigError("manifest: label_rate must lie in (0, 1]");
  if (channels == 0) throw ConfigError("manifest: channels must be positive");
  if (d_roi < 8 || d_roi % 8 != 0)
    throw ConfigError("manifest: d_roi must be a positive multiple of 8, got " +
                      std::to_string(d_roi));
  if (!gen_v && !gen_a && !gen_s) throw ConfigError("manifest: no stream enabled");
  for (std::size_t dim : {t_v, n_v, t_a, n_a, t_s, n_s})
    if (dim == 0) throw ConfigError("manifest: stream extents must be positive");
  const std::size_t g = grid_side(n_v);
  if (g * g != n_v)
    throw ConfigError("manifest: n_v " + std::to_string(n_v) +
                      " is not a square grid cell count");
}

Tensor<float> cue_vector(const DatasetManifest& m, std::size_t cls, char modality) {
  RngState root(m.seed, "cue");
  return to_f32({m.channels}, unit_cue(root.fork(std::string(1, modality), cls), m.channels));
}

std::vector<double> roi_geometry(double x1, double y1, double x2, double y2, std::size_t d_roi) {
  const std::size_t q = d_roi / 4;
  // Sinusoid encodings of center/size; the x25 scale spreads the unit square
  // across several encoding wavelengths.
  const double vals[4] = {(x1 + x2) / 2 * 25.0, (y1 + y2) / 2 * 25.0, (x2 - x1) * 25.0,
                          (y2 - y1) * 25.0};
  std::vector<double> out;
  out.reserve(d_roi);
  for (double v : vals) {
    const std::vector<double> enc = sinusoid_features(v, q);
    out.insert(out.end(), enc.begin(), enc.end());
  }
  return out;
}

Scene generate_scene(const DatasetManifest& m, std::size_t scene_id) {
  m.validate();
  Scene scene;
  scene.id = static_cast<int>(scene_id);
  RngState root(m.seed, "dataset");
  RngState srng = root.fork("scene", scene_id);

  // Ground-truth boxes: non-degenerate, pairwise IoU below kMaxPairIou.
  RngState brng = srng.fork("boxes");
  const auto n_actors = static_cast<std::size_t>(
      brng.uniform_int(1, static_cast<std::int64_t>(m.k_gt_max)));
  std::vector<Box> boxes;
  for (std::size_t g = 0; g < n_actors; ++g) {
    bool placed = false;
    for (int attempt = 0; attempt < kBoxRetries && !placed; ++attempt) {
      const double w = brng.uniform(kMinSide, kMaxSide);
      const double h = brng.uniform(kMinSide, kMaxSide);
      const double x1 = brng.uniform(0.0, 1.0 - w);
      const double y1 = brng.uniform(0.0, 1.0 - h);
      Box cand{x1, y1, x1 + w, y1 + h};
      bool ok = true;
      for (const Box& other : boxes)
        if (iou(cand, other) >= kMaxPairIou) {
          ok = false;
          break;
        }
      if (ok) {
        boxes.push_back(cand);
        placed = true;
      }
    }
    if (!placed)
      throw std::runtime_error("generate_scene: failed to place actor " + std::to_string(g) +
                               " of scene " + std::to_string(scene_id) + " after " +
                               std::to_string(kBoxRetries) + " retries");
  }

  // Multi-hot labels; every actor carries at least one action.
  RngState lrng = srng.fork("labels");
  scene.gt_labels.resize(n_actors, 0);
  for (std::size_t g = 0; g < n_actors; ++g) {
    for (std::size_t c = 0; c < m.n_cls; ++c)
      if (lrng.bernoulli(m.label_rate)) scene.gt_labels[g] |= 1ULL << c;
    if (scene.gt_labels[g] == 0)
      scene.gt_labels[g] |=
          1ULL << static_cast<std::size_t>(lrng.uniform_int(0, (std::int64_t)m.n_cls - 1));
  }

  // Streams: planted cues plus isotropic noise.
  const std::size_t c = m.channels;
  std::vector<double> fv(m.gen_v ? m.t_v * m.n_v * c : 0, 0.0);
  std::vector<double> fa(m.gen_a ? m.t_a * m.n_a * c : 0, 0.0);
  std::vector<double> fsd(m.gen_s ? m.t_s * m.n_s * c : 0, 0.0);
  const std::size_t gside = grid_side(m.n_v);
  std::vector<std::size_t> all_a(m.n_a), all_s(m.n_s);
  for (std::size_t i = 0; i < m.n_a; ++i) all_a[i] = i;
  for (std::size_t i = 0; i < m.n_s; ++i) all_s[i] = i;
  RngState cue_root(m.seed, "cue");
  std::map<std::pair<char, std::size_t>, std::vector<double>> cue_cache;
  auto cue_for = [&](char mod, std::size_t cls) -> const std::vector<double>& {
    auto key = std::make_pair(mod, cls);
    auto it = cue_cache.find(key);
    if (it == cue_cache.end())
      it = cue_cache.emplace(key, unit_cue(cue_root.fork(std::string(1, mod), cls), c)).first;
    return it->second;
  };
  for (std::size_t g = 0; g < n_actors; ++g) {
    // Visual cues land on grid cells the actor box overlaps.
    std::vector<std::size_t> v_rows;
    if (m.gen_v) {
      for (std::size_t r = 0; r < gside; ++r)
        for (std::size_t col = 0; col < gside; ++col) {
          const double cx1 = static_cast<double>(col) / static_cast<double>(gside);
          const double cy1 = static_cast<double>(r) / static_cast<double>(gside);
          const double cx2 = cx1 + 1.0 / static_cast<double>(gside);
          const double cy2 = cy1 + 1.0 / static_cast<double>(gside);
          const Box& b = boxes[g];
          if (b.x1 < cx2 && b.x2 > cx1 && b.y1 < cy2 && b.y2 > cy1)
            v_rows.push_back(r * gside + col);
        }
    }
    for (std::size_t cls = 0; cls < m.n_cls; ++cls) {
      if (!(scene.gt_labels[g] >> cls & 1)) continue;
      const std::string& cues = m.class_cues[cls];
      if (m.gen_v && cue_has(cues, 'v')) add_rows(fv, m.t_v, m.n_v, c, cue_for('v', cls), v_rows);
      if (m.gen_a && cue_has(cues, 'a')) add_rows(fa, m.t_a, m.n_a, c, cue_for('a', cls), all_a);
      if (m.gen_s && cue_has(cues, 's')) add_rows(fsd, m.t_s, m.n_s, c, cue_for('s', cls), all_s);
    }
  }
  if (m.noise_sigma > 0.0) {
    RngState nrng = srng.fork("noise");
    for (auto& x : fv) x += m.noise_sigma * nrng.normal();
    for (auto& x : fa) x += m.noise_sigma * nrng.normal();
    for (auto& x : fsd) x += m.noise_sigma * nrng.normal();
  }
  if (m.gen_v) scene.f_v = to_f32({m.t_v, m.n_v, c}, fv);
  if (m.gen_a) scene.f_a = to_f32({m.t_a, m.n_a, c}, fa);
  if (m.gen_s) scene.f_s = to_f32({m.t_s, m.n_s, c}, fsd);

  // Detector simulation: recall-thinned, jittered proposals padded to K.
  RngState prng = srng.fork("props");
  std::vector<std::size_t> kept;
  for (std::size_t g = 0; g < n_actors; ++g)
    if (prng.bernoulli(m.recall)) kept.push_back(g);
  if (kept.empty()) kept.push_back(0);  // a scene must keep at least one valid proposal
  std::vector<double> pbox(m.k_slots * 4, 0.0), pconf(m.k_slots, 0.0);
  std::vector<double> proi(m.k_slots * m.d_roi, 0.0);
  scene.prop_mask.assign(m.k_slots, 0);
  scene.prop_gt.assign(m.k_slots, -1);
  for (std::size_t slot = 0; slot < kept.size(); ++slot) {
    const Box& b = boxes[kept[slot]];
    double d[4], jittered[4] = {b.x1, b.y1, b.x2, b.y2};
    double abs_sum = 0.0;
    for (int i = 0; i < 4; ++i) {
      d[i] = prng.uniform(-m.jitter, m.jitter);
      jittered[i] = std::clamp(jittered[i] + d[i], 0.0, 1.0);
      abs_sum += std::fabs(d[i]);
    }
    pbox[slot * 4 + 0] = jittered[0];
    pbox[slot * 4 + 1] = jittered[1];
    pbox[slot * 4 + 2] = jittered[2];
    pbox[slot * 4 + 3] = jittered[3];
    pconf[slot] = 1.0 - abs_sum / 4.0;
    std::vector<double> geo =
        roi_geometry(jittered[0], jittered[1], jittered[2], jittered[3], m.d_roi);
    for (std::size_t j = 0; j < m.d_roi; ++j)
      proi[slot * m.d_roi + j] = geo[j] + m.noise_sigma * prng.normal();
    scene.prop_mask[slot] = 1;
    scene.prop_gt[slot] = static_cast<int>(kept[slot]);
  }
  scene.prop_box = to_f32({m.k_slots, 4}, pbox);
  scene.prop_conf = to_f32({m.k_slots}, pconf);
  scene.prop_roi = to_f32({m.k_slots, m.d_roi}, proi);

  std::vector<double> gb(n_actors * 4);
  for (std::size_t g = 0; g < n_actors; ++g) {
    gb[g * 4 + 0] = boxes[g].x1;
    gb[g * 4 + 1] = boxes[g].y1;
    gb[g * 4 + 2] = boxes[g].x2;
    gb[g * 4 + 3] = boxes[g].y2;
  }
  scene.gt_box = to_f32({n_actors, 4}, gb);
  return scene;
}

std::vector<Scene> generate_dataset(const DatasetManifest& m, std::size_t workers) {
  m.validate();
  std::vector<Scene> scenes(m.scenes);
  parallel_for(m.scenes, workers,
               [&](std::size_t i) { scenes[i] = generate_scene(m, i); });
  return scenes;
}

std::size_t Scene::n_valid() const {
  std::size_t n = 0;
  for (char v : prop_mask) n += v ? 1 : 0;
  return n;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  m.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "amfn-manifest v1\n";
  out << "split = " << m.split << "\n";
  out << "scenes = " << m.scenes << "\n";
  out << "n_cls = " << m.n_cls << "\n";
  out << "seed = " << m.seed << "\n";
  out << "noise_sigma = " << fmt_real(m.noise_sigma) << "\n";
  out << "label_rate = " << fmt_real(m.label_rate) << "\n";
  out << "k_gt_max = " << m.k_gt_max << "\n";
  out << "k_slots = " << m.k_slots << "\n";
  out << "recall = " << fmt_real(m.recall) << "\n";
  out << "jitter = " << fmt_real(m.jitter) << "\n";
  out << "channels = " << m.channels << "\n";
  out << "d_roi = " << m.d_roi << "\n";
  out << "t_v = " << m.t_v << "\n";
  out << "n_v = " << m.n_v << "\n";
  out << "t_a = " << m.t_a << "\n";
  out << "n_a = " << m.n_a << "\n";
  out << "t_s = " << m.t_s << "\n";
  out << "n_s = " << m.n_s << "\n";
  std::string mods;
  auto add_mod = [&](char ch) {
    if (!mods.empty()) mods += ',';
    mods += ch;
  };
  if (m.gen_v) add_mod('v');
  if (m.gen_a) add_mod('a');
  if (m.gen_s) add_mod('s');
  out << "modalities = " << mods << "\n";
  out << "class_cues = ";
  for (std::size_t c = 0; c < m.class_cues.size(); ++c)
    out << (c ? "," : "") << m.class_cues[c];
  out << "\n";
  if (!out) throw IoError("write failed for " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "amfn-manifest v1")
    throw FormatError(path + ":1: expected header 'amfn-manifest v1'");
  DatasetManifest m;
  m.gen_v = m.gen_a = m.gen_s = false;
  std::size_t line_no = 1;
  std::map<std::string, bool> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (seen[key])
      throw FormatError(path + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    seen[key] = true;
    try {
      if (key == "split") m.split = value;
      else if (key == "scenes") m.scenes = std::stoull(value);
      else if (key == "n_cls") m.n_cls = std::stoull(value);
      else if (key == "seed") m.seed = std::stoull(value);
      else if (key == "noise_sigma") m.noise_sigma = std::stod(value);
      else if (key == "label_rate") m.label_rate = std::stod(value);
      else if (key == "k_gt_max") m.k_gt_max = std::stoull(value);
      else if (key == "k_slots") m.k_slots = std::stoull(value);
      else if (key == "recall") m.recall = std::stod(value);
      else if (key == "jitter") m.jitter = std::stod(value);
      else if (key == "channels") m.channels = std::stoull(value);
      else if (key == "d_roi") m.d_roi = std::stoull(value);
      else if (key == "t_v") m.t_v = std::stoull(value);
      else if (key == "n_v") m.n_v = std::stoull(value);
      else if (key == "t_a") m.t_a = std::stoull(value);
      else if (key == "n_a") m.n_a = std::stoull(value);
      else if (key == "t_s") m.t_s = std::stoull(value);
      else if (key == "n_s") m.n_s = std::stoull(value);
      else if (key == "modalities") {
        for (char mch : value) {
          if (mch == ',') continue;
          if (mch == 'v') m.gen_v = true;
          else if (mch == 'a') m.gen_a = true;
          else if (mch == 's') m.gen_s = true;
          else
            throw FormatError(path + ":" + std::to_string(line_no) + ": unknown modality '" +
                              std::string(1, mch) + "'");
        }
      } else if (key == "class_cues") {
        std::stringstream cs(value);
        std::string item;
        while (std::getline(cs, item, ',')) m.class_cues.push_back(item);
      } else {
        throw FormatError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": bad value for '" + key + "'");
    } catch (const std::out_of_range&) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": value out of range for '" +
                        key + "'");
    }
  }
  m.validate();
  return m;
}

void save_scene(const std::string& dir, const Scene& scene) {
  NamedTensors entries;
  if (scene.has_v()) entries.emplace_back("f_v", AnyTensor::wrap(scene.f_v));
  if (scene.has_a()) entries.emplace_back("f_a", AnyTensor::wrap(scene.f_a));
  if (scene.has_s()) entries.emplace_back("f_s", AnyTensor::wrap(scene.f_s));
  entries.emplace_back("prop_box", AnyTensor::wrap(scene.prop_box));
  entries.emplace_back("prop_conf", AnyTensor::wrap(scene.prop_conf));
  entries.emplace_back("prop_roi", AnyTensor::wrap(scene.prop_roi));
  const std::size_t k = scene.prop_mask.size();
  std::vector<float> mask(k), gt_idx(k);
  for (std::size_t i = 0; i < k; ++i) mask[i] = scene.prop_mask[i] ? 1.0f : 0.0f;
  for (std::size_t i = 0; i < k; ++i) gt_idx[i] = static_cast<float>(scene.prop_gt[i]);
  entries.emplace_back("prop_mask", AnyTensor::wrap(Tensor<float>::from({k}, std::move(mask))));
  entries.emplace_back("prop_gt", AnyTensor::wrap(Tensor<float>::from({k}, std::move(gt_idx))));
  const std::string stem = (fs::path(dir) / scene_stem(scene.id)).string();
  save_named_tensors(stem + ".emb", entries);

  std::ofstream ann(stem + ".ann", std::ios::trunc);
  if (!ann) throw IoError("cannot write " + stem + ".ann");
  for (std::size_t g = 0; g < scene.n_gt(); ++g) {
    auto bd = scene.gt_box.data();
    ann << scene.id << ' ' << fmt_real(bd[g * 4 + 0]) << ' ' << fmt_real(bd[g * 4 + 1]) << ' '
        << fmt_real(bd[g * 4 + 2]) << ' ' << fmt_real(bd[g * 4 + 3]) << ' '
        << scene.gt_labels[g] << '\n';
  }
  if (!ann) throw IoError("write failed for " + stem + ".ann");
}

Scene load_scene(const std::string& dir, int scene_id) {
  Scene scene;
  scene.id = scene_id;
  const std::string stem = (fs::path(dir) / scene_stem(scene_id)).string();
  NamedTensors entries = load_named_tensors(stem + ".emb");
  std::map<std::string, const AnyTensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  auto need = [&](const std::string& name) -> Tensor<float> {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError(stem + ".emb: missing required entry '" + name + "'");
    return it->second->as_f32(stem + ".emb:" + name);
  };
  if (by_name.count("f_v")) scene.f_v = need("f_v");
  if (by_name.count("f_a")) scene.f_a = need("f_a");
  if (by_name.count("f_s")) scene.f_s = need("f_s");
  scene.prop_box = need("prop_box");
  scene.prop_conf = need("prop_conf");
  scene.prop_roi = need("prop_roi");
  Tensor<float> mask = need("prop_mask");
  Tensor<float> gt_idx = need("prop_gt");
  scene.prop_mask.resize(mask.numel());
  for (std::size_t i = 0; i < mask.numel(); ++i) scene.prop_mask[i] = mask[i] != 0.0f;
  scene.prop_gt.resize(gt_idx.numel());
  for (std::size_t i = 0; i < gt_idx.numel(); ++i)
    scene.prop_gt[i] = static_cast<int>(std::lround(gt_idx[i]));

  std::ifstream ann(stem + ".ann");
  if (!ann) throw IoError("cannot read " + stem + ".ann");
  std::vector<float> gb;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    int sid;
    double x1, y1, x2, y2;
    std::uint64_t bits;
    if (!(ls >> sid >> x1 >> y1 >> x2 >> y2 >> bits))
      throw FormatError(stem + ".ann:" + std::to_string(line_no) +
                        ": expected 'scene_id x1 y1 x2 y2 bitmask'");
    if (sid != scene_id)
      throw FormatError(stem + ".ann:" + std::to_string(line_no) + ": scene id " +
                        std::to_string(sid) + " does not match file " +
                        std::to_string(scene_id));
    gb.push_back(static_cast<float>(x1));
    gb.push_back(static_cast<float>(y1));
    gb.push_back(static_cast<float>(x2));
    gb.push_back(static_cast<float>(y2));
    scene.gt_labels.push_back(bits);
  }
  scene.gt_box = Tensor<float>::from({scene.gt_labels.size(), 4}, std::move(gb));
  return scene;
}

void save_dataset(const std::string& dir, const DatasetManifest& m,
                  const std::vector<Scene>& scenes) {
  fs::create_directories(dir);
  save_manifest((fs::path(dir) / "manifest.txt").string(), m);
  for (const auto& s : scenes) save_scene(dir, s);
}

std::vector<Scene> load_dataset(const std::string& dir, const DatasetManifest& m) {
  std::vector<Scene> scenes;
  scenes.reserve(m.scenes);
  for (std::size_t i = 0; i < m.scenes; ++i)
    scenes.push_back(load_scene(dir, static_cast<int>(i)));
  return scenes;
}

Scene restrict_modalities(Scene s, bool keep_v, bool keep_a, bool keep_s) {
  if (!keep_v) s.f_v = Tensor<float>();
  if (!keep_a) s.f_a = Tensor<float>();
  if (!keep_s) s.f_s = Tensor<float>();
  if (!s.has_v() && !s.has_a() && !s.has_s())
    throw ConfigError("restrict_modalities: every stream was dropped");
  return s;
}

}  // namespace amfn
