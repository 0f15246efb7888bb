// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "amfn/dataset.hpp"
#include "amfn/learn.hpp"
#include "amfn/model.hpp"
#include "amfn/rng.hpp"
#include "amfn/serialize.hpp"
#include "doctest.h"

using namespace amfn;

namespace {

std::filesystem::path tmp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "amfn_learn_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class Error, class Fn>
void expect_throw_with(Fn fn, const char* needle) {
  try {
    fn();
    FAIL("expected an exception mentioning '" << needle << "'");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

template <class Real>
void require_same(const Tensor<Real>& a, const Tensor<Real>& b) {
  REQUIRE(a.shape() == b.shape());
  const auto& da = a.data();
  const auto& db = b.data();
  std::size_t diff = 0;
  for (std::size_t i = 0; i < da.size(); ++i)
    if (da[i] != db[i]) ++diff;
  REQUIRE(diff == 0);
}

void require_params_equal(const ParamSet<float>& a, const ParamSet<float>& b) {
  REQUIRE(a.entries().size() == b.entries().size());
  for (const auto& [name, t] : a.entries()) {
    INFO("param ", name);
    require_same(t, b.at(name));
  }
}

// Reference focal loss evaluated cell by cell with the naive formulas.
double focal_loop(const std::vector<double>& z, const std::vector<double>& t,
                  const std::vector<std::uint8_t>& mask, std::size_t n_cls,
                  const FocalConfig& cfg) {
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t s = 0; s < mask.size(); ++s) {
    if (!mask[s]) continue;
    ++valid;
    for (std::size_t c = 0; c < n_cls; ++c) {
      const double zi = z[s * n_cls + c];
      const double p = 1.0 / (1.0 + std::exp(-zi));
      if (t[s * n_cls + c] == 1.0)
        sum += cfg.alpha * std::pow(1.0 - p, cfg.gamma) * (-std::log(p));
      else
        sum += (1.0 - cfg.alpha) * std::pow(p, cfg.gamma) * (-std::log(1.0 - p));
    }
  }
  return sum / double(valid * n_cls);
}

// Shared shapes for the training-loop cases. Model dims mirror the manifest.
DatasetManifest train_manifest(std::size_t scenes, double sigma, std::uint64_t seed) {
  DatasetManifest m;
  m.scenes = scenes;
  m.n_cls = 4;
  m.seed = seed;
  m.noise_sigma = sigma;
  m.label_rate = 0.5;
  m.k_gt_max = 2;
  m.k_slots = 4;
  m.channels = 8;
  m.d_roi = 16;
  m.t_v = 2;
  m.n_v = 4;
  m.t_a = 2;
  m.n_a = 4;
  m.t_s = 2;
  m.n_s = 4;
  m.class_cues = {"v", "a", "s", "va"};
  return m;
}

ModelConfig train_model_cfg() {
  ModelConfig c;
  c.l = 1;
  c.d = 8;
  c.k = 4;
  c.n_cls = 4;
  c.t_v = 2;
  c.n_v = 4;
  c.t_a = 2;
  c.n_a = 4;
  c.t_s = 2;
  c.n_s = 4;
  c.t_c = 2;
  c.heads = 2;
  c.ffn_mult = 2;
  c.gate_ratio = 2;
  c.c_in = 8;
  c.d_roi = 16;
  return c;
}

TrainConfig quick_train(std::size_t epochs, std::size_t batch, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch = batch;
  tc.seed = seed;
  tc.workers = 1;
  return tc;
}

}  // namespace

TEST_CASE("learn: focal loss matches a direct per-cell loop") {
  RngState rng(401, "focal");
  const std::size_t k = 4, n = 5;
  std::vector<double> z(k * n), t(k * n);
  for (auto& v : z) v = rng.uniform(0.0, 1.0) * 8.0 - 4.0;
  for (auto& v : t) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  const std::vector<std::uint8_t> mask{1, 1, 0, 1};
  auto zt = Tensor<double>::from({k, n}, std::vector<double>(z));
  auto tt = Tensor<double>::from({k, n}, std::vector<double>(t));

  for (const FocalConfig cfg : {FocalConfig{0.25, 2.0}, FocalConfig{0.6, 1.7}}) {
    const double got = sigmoid_focal_loss<double>(zt, tt, mask, cfg, nullptr).value();
    const double ref = focal_loop(z, t, mask, n, cfg);
    INFO("alpha ", cfg.alpha, " gamma ", cfg.gamma);
    CHECK(got == doctest::Approx(ref).epsilon(1e-7));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("learn: focal loss at gamma zero is alpha-weighted cross entropy") {
  RngState rng(402, "bce");
  const std::size_t k = 3, n = 4;
  std::vector<double> z(k * n), t(k * n);
  for (auto& v : z) v = rng.uniform(0.0, 1.0) * 6.0 - 3.0;
  for (auto& v : t) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const std::vector<std::uint8_t> mask{1, 1, 1};
  const FocalConfig cfg{0.3, 0.0};
  const double got =
      sigmoid_focal_loss<double>(Tensor<double>::from({k, n}, std::vector<double>(z)),
                                 Tensor<double>::from({k, n}, std::vector<double>(t)), mask, cfg,
                                 nullptr)
          .value();
  // gamma = 0 kills the modulating factor, leaving alpha*BCE(pos) and
  // (1-alpha)*BCE(neg).
  double ref = 0.0;
  for (std::size_t i = 0; i < k * n; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    ref += t[i] == 1.0 ? -cfg.alpha * std::log(p) : -(1.0 - cfg.alpha) * std::log(1.0 - p);
  }
  ref /= double(k * n);
  CHECK(got == doctest::Approx(ref).epsilon(1e-7));

  // Pinned single-cell values: logit 0 gives p = 1/2, so the positive-cell
  // cross entropy is log 2; a gamma of 2 scales it by (1-p)^2 = 1/4.
  auto one = [&](double gamma) {
    return sigmoid_focal_loss<double>(Tensor<double>::from({1, 1}, {0.0}),
                                      Tensor<double>::from({1, 1}, {1.0}), {1},
                                      FocalConfig{1.0, gamma}, nullptr)
        .value();
  };
  CHECK(one(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(one(2.0) == doctest::Approx(std::log(2.0) / 4.0).epsilon(1e-9));
}

TEST_CASE("learn: focal loss ignores masked rows entirely") {
  RngState rng(403, "maskdrop");
  const std::size_t n = 3;
  std::vector<double> z0{0.4, -1.2, 2.0}, t0{1.0, 0.0, 1.0};
  std::vector<double> z(z0), t(t0);
  for (std::size_t i = 0; i < n; ++i) {
    z.push_back(rng.normal() * 50.0);  // garbage that must not leak in
    t.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
  }
  const double with_masked =
      sigmoid_focal_loss<double>(Tensor<double>::from({2, n}, std::move(z)),
                                 Tensor<double>::from({2, n}, std::move(t)), {1, 0},
                                 FocalConfig{}, nullptr)
          .value();
  const double solo =
      sigmoid_focal_loss<double>(Tensor<double>::from({1, n}, std::move(z0)),
                                 Tensor<double>::from({1, n}, std::move(t0)), {1}, FocalConfig{},
                                 nullptr)
          .value();
  CHECK(with_masked == doctest::Approx(solo).epsilon(1e-12));
}

TEST_CASE("learn: focal loss gradient matches finite differences") {
  RngState rng(404, "fd");
  const std::size_t k = 3, n = 4;
  std::vector<double> zv(k * n), tv(k * n);
  for (auto& v : zv) v = rng.uniform(0.0, 1.0) * 6.0 - 3.0;
  for (auto& v : tv) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const FocalConfig cfg{0.25, 2.0};

  Tape<double> tape;
  auto z = Tensor<double>::from({k, n}, std::vector<double>(zv));
  tape.watch(z);
  auto targets = Tensor<double>::from({k, n}, std::vector<double>(tv));
  Tensor<double> loss = sigmoid_focal_loss<double>(z, targets, mask, cfg, &tape);
  tape.backward(loss);
  const auto grad = tape.grad(z.node);
  REQUIRE(grad.size() == k * n);

  const double h = 1e-6;
  auto eval = [&](const std::vector<double>& vals) {
    return sigmoid_focal_loss<double>(Tensor<double>::from({k, n}, std::vector<double>(vals)),
                                      targets, mask, cfg, nullptr)
        .value();
  };
  for (std::size_t i = 0; i < k * n; ++i) {
    std::vector<double> hi(zv), lo(zv);
    hi[i] += h;
    lo[i] -= h;
    const double fd = (eval(hi) - eval(lo)) / (2.0 * h);
    INFO("coordinate ", i);
    CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-6).scale(1e-4));
  }
}

TEST_CASE("learn: focal loss rejects contract violations") {
  auto z = Tensor<double>::from({2, 2}, {0.1, 0.2, 0.3, 0.4});
  auto t = Tensor<double>::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  expect_throw_with<UsageError>(
      [&] { (void)sigmoid_focal_loss<double>(z, t, {0, 0}, FocalConfig{}, nullptr); },
      "no valid actors");
  auto bad_t = Tensor<double>::from({2, 2}, {0.5, 0.0, 0.0, 1.0});
  expect_throw_with<UsageError>(
      [&] { (void)sigmoid_focal_loss<double>(z, bad_t, {1, 1}, FocalConfig{}, nullptr); },
      "exactly 0 or 1");
  CHECK_THROWS_AS((void)sigmoid_focal_loss<double>(z, t, {1, 1, 1}, FocalConfig{}, nullptr),
                  ShapeError);
  auto t3 = Tensor<double>::from({2, 3}, {1.0, 0.0, 0.0, 1.0, 0.0, 1.0});
  CHECK_THROWS_AS((void)sigmoid_focal_loss<double>(z, t3, {1, 1}, FocalConfig{}, nullptr),
                  ShapeError);
  auto z1 = Tensor<double>::from({2}, {0.1, 0.2});
  CHECK_THROWS_AS((void)sigmoid_focal_loss<double>(z1, z1, {1, 1}, FocalConfig{}, nullptr),
                  ShapeError);
  CHECK_THROWS_AS((FocalConfig{0.0, 2.0}).validate(), ConfigError);
  CHECK_THROWS_AS((FocalConfig{1.1, 2.0}).validate(), ConfigError);
  CHECK_THROWS_AS((FocalConfig{0.25, -0.5}).validate(), ConfigError);
  CHECK_NOTHROW((FocalConfig{1.0, 0.0}).validate());
}

TEST_CASE("learn: to_targets lifts actor labels onto matched slots") {
  Scene sc;
  sc.id = 3;
  sc.prop_mask = {1, 1, 0, 1};
  sc.prop_gt = {0, -1, 2, 1};
  sc.gt_labels = {0b101u, 0b010u, 0b111u};
  const auto t = to_targets<float>(sc, 3);
  REQUIRE(t.shape() == Shape({4, 3}));
  const std::vector<float> want{1, 0, 1,   // slot 0 inherits actor 0 = classes {0,2}
                                0, 0, 0,   // unmatched slot stays all-negative
                                0, 0, 0,   // masked slot is ignored even with a source
                                0, 1, 0};  // slot 3 inherits actor 1 = class {1}
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(t[i] == want[i]);

  Scene bad = sc;
  bad.prop_gt = {0, -1, 2, 3};  // actor 3 does not exist
  CHECK_THROWS_AS((void)to_targets<float>(bad, 3), ShapeError);
  bad = sc;
  bad.prop_gt = {0, -1, 2};
  CHECK_THROWS_AS((void)to_targets<float>(bad, 3), ShapeError);
}

TEST_CASE("learn: adamw with zero gradients is pure weight decay") {
  ParamSet<float> p;
  p.add("frontend.stem.w", Tensor<float>::from({2}, {1.5f, -2.0f}));
  p.add("head.fc.w", Tensor<float>::from({2}, {0.5f, 3.0f}));
  OptimConfig oc;
  oc.weight_decay = 1e-2;
  OptimState st = init_optim(p, oc);
  GradMap g{{"frontend.stem.w", {0.0, 0.0}}, {"head.fc.w", {0.0, 0.0}}};
  const double lr_f = 1e-2, lr_r = 1e-1;
  adamw_step(p, g, st, lr_f, lr_r);
  // Zero gradients leave both moments at zero, so the update term vanishes
  // and the step is exactly theta * (1 - lr*lambda) per group.
  CHECK(p.at("frontend.stem.w")[0] == float(1.5 * (1.0 - lr_f * 1e-2)));
  CHECK(p.at("frontend.stem.w")[1] == float(-2.0 * (1.0 - lr_f * 1e-2)));
  CHECK(p.at("head.fc.w")[0] == float(0.5 * (1.0 - lr_r * 1e-2)));
  CHECK(p.at("head.fc.w")[1] == float(3.0 * (1.0 - lr_r * 1e-2)));
  CHECK(st.step == 1);
  for (double m : st.m.at("head.fc.w")) CHECK(m == 0.0);
  for (double v : st.v.at("head.fc.w")) CHECK(v == 0.0);
}

TEST_CASE("learn: adamw with zero decay reproduces adam step by step") {
  ParamSet<float> p;
  p.add("head.fc.w", Tensor<float>::from({3}, {0.2f, -0.7f, 1.1f}));
  OptimConfig oc;
  oc.weight_decay = 0.0;
  OptimState st = init_optim(p, oc);
  const double lr = 1e-3, b1 = oc.beta1, b2 = oc.beta2, eps = oc.eps;

  std::vector<float> theta{0.2f, -0.7f, 1.1f};
  std::vector<double> m(3, 0.0), v(3, 0.0);
  for (int step = 1; step <= 5; ++step) {
    std::vector<double> g{0.1 * step, -0.2, 0.05 * step * step};
    adamw_step(p, GradMap{{"head.fc.w", g}}, st, lr, lr);
    // Textbook Adam: m_hat = m/(1-b1^t), v_hat = v/(1-b2^t),
    // theta -= lr * m_hat / (sqrt(v_hat) + eps).
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (std::size_t i = 0; i < 3; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      theta[i] = float(double(theta[i]) - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      INFO("step ", step, " coord ", i);
      CHECK(p.at("head.fc.w")[i] == doctest::Approx(theta[i]).epsilon(1e-9));
    }
  }
  CHECK(st.step == 5);
}

TEST_CASE("learn: adamw applies per-group learning rates") {
  CHECK(is_frontend_param("frontend.proj_v.w"));
  CHECK(is_frontend_param("branch_a.frontend.proj_a.b"));
  CHECK_FALSE(is_frontend_param("layer.0.mfe_v.block.qkv.w"));
  CHECK_FALSE(is_frontend_param("head.fc.w"));

  ParamSet<float> p;
  p.add("frontend.proj_v.w", Tensor<float>::from({1}, {1.0f}));
  p.add("head.fc.w", Tensor<float>::from({1}, {1.0f}));
  OptimConfig oc;
  oc.weight_decay = 0.0;
  OptimState st = init_optim(p, oc);
  GradMap g{{"frontend.proj_v.w", {1.0}}, {"head.fc.w", {1.0}}};
  adamw_step(p, g, st, 1e-5, 1e-4);
  // First step with unit gradient: m_hat = v_hat = 1, so each group moves by
  // its own lr/(1+eps).
  const double step1 = 1.0 / (1.0 + oc.eps);
  CHECK(p.at("frontend.proj_v.w")[0] == doctest::Approx(1.0 - 1e-5 * step1).epsilon(1e-6));
  CHECK(p.at("head.fc.w")[0] == doctest::Approx(1.0 - 1e-4 * step1).epsilon(1e-6));
}

TEST_CASE("learn: adamw rejects missing or mismatched pieces") {
  ParamSet<float> p;
  p.add("head.fc.w", Tensor<float>::from({2}, {1.0f, 2.0f}));
  OptimState st = init_optim(p, {});
  expect_throw_with<UsageError>([&] { adamw_step(p, GradMap{}, st, 1e-4, 1e-4); },
                                "missing gradient");
  GradMap bad{{"head.fc.w", {1.0}}};
  CHECK_THROWS_AS(adamw_step(p, bad, st, 1e-4, 1e-4), ShapeError);
  ParamSet<float> other;
  other.add("other.w", Tensor<float>::from({1}, {1.0f}));
  OptimState st2 = init_optim(other, {});
  GradMap ok{{"head.fc.w", {1.0, 1.0}}};
  CHECK_THROWS_AS(adamw_step(p, ok, st2, 1e-4, 1e-4), UsageError);
  CHECK_THROWS_AS((OptimConfig{1.0, 0.999, 1e-8, 0.0}).validate(), ConfigError);
  CHECK_THROWS_AS((OptimConfig{0.9, 0.999, 0.0, 0.0}).validate(), ConfigError);
  CHECK_THROWS_AS((OptimConfig{0.9, 0.999, 1e-8, -1.0}).validate(), ConfigError);
}

TEST_CASE("learn: lr schedule drops tenfold at the drop epoch") {
  TrainConfig tc;
  tc.lr_frontend = 1e-5;
  tc.lr_rest = 1e-4;
  tc.drop_epoch = 7;
  tc.drop_factor = 10.0;
  auto at = [&](std::size_t e) { return lr_at(e, tc); };
  CHECK(at(1).first == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(at(1).second == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(at(6).second == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(at(7).first == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(at(7).second == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(at(20).second == doctest::Approx(1e-5).epsilon(1e-12));
  tc.drop_epoch = 11;  // beyond the budget: the schedule stays flat
  CHECK(at(10).second == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK_THROWS_AS((void)lr_at(0, tc), UsageError);
  TrainConfig bad;
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.drop_factor = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("learn: horizontal flip mirrors geometry and keeps feature noise") {
  const auto m = train_manifest(1, 0.1, 77);
  const Scene sc = generate_scene(m, 0);
  const ModelInput<float> in = to_model_input<float>(sc);
  const ModelInput<float> fl = flip_horizontal(in);

  // Grid tokens swap columns; g = 2 for n_v = 4.
  const std::size_t g = 2, c = m.channels;
  for (std::size_t t = 0; t < m.t_v; ++t)
    for (std::size_t r = 0; r < g; ++r)
      for (std::size_t col = 0; col < g; ++col)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t a = (t * 4 + r * g + col) * c + ch;
          const std::size_t b = (t * 4 + r * g + (g - 1 - col)) * c + ch;
          REQUIRE(fl.f_v[a] == in.f_v[b]);
        }
  // Audio and scene streams are untouched.
  require_same(fl.f_a, in.f_a);
  require_same(fl.f_s, in.f_s);

  for (std::size_t s = 0; s < in.mask.size(); ++s) {
    const float x1 = in.prop_box[s * 4 + 0], y1 = in.prop_box[s * 4 + 1];
    const float x2 = in.prop_box[s * 4 + 2], y2 = in.prop_box[s * 4 + 3];
    if (!in.mask[s]) {
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(fl.prop_box[s * 4 + j] == in.prop_box[s * 4 + j]);
      for (std::size_t j = 0; j < m.d_roi; ++j)
        CHECK(fl.prop_roi[s * m.d_roi + j] == in.prop_roi[s * m.d_roi + j]);
      continue;
    }
    CHECK(fl.prop_box[s * 4 + 0] == 1.0f - x2);
    CHECK(fl.prop_box[s * 4 + 2] == 1.0f - x1);
    CHECK(fl.prop_box[s * 4 + 1] == y1);
    CHECK(fl.prop_box[s * 4 + 3] == y2);
    // The roi feature is clean geometry plus noise; the flip must carry the
    // noise over to the mirrored geometry unchanged.
    const auto old_geom = roi_geometry(x1, y1, x2, y2, m.d_roi);
    const auto new_geom = roi_geometry(fl.prop_box[s * 4 + 0], y1, fl.prop_box[s * 4 + 2], y2,
                                       m.d_roi);
    for (std::size_t j = 0; j < m.d_roi; ++j) {
      const double old_noise = double(in.prop_roi[s * m.d_roi + j]) - old_geom[j];
      const double new_noise = double(fl.prop_roi[s * m.d_roi + j]) - new_geom[j];
      CHECK(new_noise == doctest::Approx(old_noise).epsilon(1e-5).scale(1.0));
    }
  }

  // Flipping twice restores the grid exactly and the boxes within rounding.
  const ModelInput<float> back = flip_horizontal(fl);
  require_same(back.f_v, in.f_v);
  for (std::size_t i = 0; i < in.prop_box.numel(); ++i)
    CHECK(back.prop_box[i] == doctest::Approx(in.prop_box[i]).epsilon(1e-6).scale(1.0));

  ModelInput<float> ragged = in;
  ragged.f_v = Tensor<float>::from({1, 3, 2}, std::vector<float>(6, 0.0f));
  CHECK_THROWS_AS((void)flip_horizontal(ragged), ShapeError);
}

TEST_CASE("learn: spec augment consumes four draws and zeroes two spans") {
  const std::size_t t = 8, n = 2, c = 16;
  bool saw_time_span = false, saw_freq_span = false;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    RngState fill(900 + seed, "fill");
    std::vector<float> vals(t * n * c);
    for (auto& v : vals) v = 1.0f + float(fill.uniform(0.0, 1.0));
    const auto x = Tensor<float>::from({t, n, c}, std::move(vals));

    RngState used(seed, "specaug");
    RngState replay(seed, "specaug");
    const Tensor<float> out = spec_augment_features(x, used);

    // Replay the documented draw order: time length <= T/4, time start,
    // channel length <= C/8, channel start.
    const auto tl = std::size_t(replay.uniform_int(0, std::int64_t(t / 4)));
    const auto t0 = std::size_t(replay.uniform_int(0, std::int64_t(t - tl)));
    const auto fl = std::size_t(replay.uniform_int(0, std::int64_t(c / 8)));
    const auto f0 = std::size_t(replay.uniform_int(0, std::int64_t(c - fl)));
    saw_time_span |= tl > 0;
    saw_freq_span |= fl > 0;
    std::size_t diff = 0;
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
          const std::size_t i = (ti * n + ni) * c + ci;
          const bool zeroed = (ti >= t0 && ti < t0 + tl) || (ci >= f0 && ci < f0 + fl);
          const float want = zeroed ? 0.0f : x[i];
          if (out[i] != want) ++diff;
        }
    INFO("seed ", seed);
    REQUIRE(diff == 0);
    // Exactly four draws consumed: the streams must stay in lockstep.
    CHECK(used.uniform_int(0, 1 << 20) == replay.uniform_int(0, 1 << 20));
  }
  CHECK(saw_time_span);
  CHECK(saw_freq_span);

  RngState rng(3, "tiny");
  const auto tiny = Tensor<float>::from({1, 1, 1}, {2.0f});
  const Tensor<float> out = spec_augment_features(tiny, rng);
  CHECK((out[0] == 2.0f || out[0] == 0.0f));
  const auto flat = Tensor<float>::from({2, 2}, std::vector<float>(4, 1.0f));
  CHECK_THROWS_AS((void)spec_augment_features(flat, rng), ShapeError);
}

TEST_CASE("learn: checkpoint round trips losslessly") {
  const auto dir = tmp_dir("ckpt");
  const ModelConfig mc = train_model_cfg();

  Checkpoint ck;
  ck.model = mc;
  ck.train = quick_train(9, 4, 123);
  ck.train.lr_rest = 3e-4;
  ck.train.flip = false;
  ck.strategy = "";
  ck.params = build_params(mc, 11);
  ck.optim = init_optim(ck.params, ck.train.optim);
  ck.optim.step = 7;
  auto& m0 = ck.optim.m.begin()->second;
  for (std::size_t i = 0; i < m0.size(); ++i) m0[i] = 0.5 + 0.25 * double(i);
  ck.epoch = 2;
  ck.history.train_loss = {0.9, 0.7};
  ck.history.val_map = {0.1, 0.4};
  ck.history.lr_frontend = {1e-5, 1e-5};
  ck.history.lr_rest = {3e-4, 3e-4};

  const std::string path = (dir / "model.jvt").string();
  save_checkpoint(path, ck);
  const Checkpoint got = load_checkpoint(path);
  require_params_equal(got.params, ck.params);
  CHECK(got.optim.step == 7);
  CHECK(got.optim.m.at(ck.optim.m.begin()->first) == m0);
  CHECK(got.optim.v.size() == ck.optim.v.size());
  CHECK(got.epoch == 2);
  CHECK(got.strategy == "");
  CHECK(got.history.train_loss == ck.history.train_loss);
  CHECK(got.history.val_map == ck.history.val_map);
  CHECK(got.history.lr_frontend == ck.history.lr_frontend);
  CHECK(got.history.lr_rest == ck.history.lr_rest);
  CHECK(got.model.d == mc.d);
  CHECK(got.model.n_cls == mc.n_cls);
  CHECK(got.model.scalar_gate == mc.scalar_gate);
  CHECK(got.train.epochs == 9);
  CHECK(got.train.batch == 4);
  CHECK(got.train.seed == 123);
  CHECK(got.train.lr_rest == 3e-4);
  CHECK(got.train.flip == false);
  CHECK(got.train.optim.weight_decay == ck.train.optim.weight_decay);

  Checkpoint base;
  base.model = mc;
  base.train = quick_train(1, 2, 5);
  base.strategy = "late_score";
  base.params = build_baseline_params(BaselineStrategy::kLateScore, mc, 5);
  base.optim = init_optim(base.params, base.train.optim);
  const std::string path2 = (dir / "baseline.jvt").string();
  save_checkpoint(path2, base);
  CHECK(load_checkpoint(path2).strategy == "late_score");

  NamedTensors broken;
  broken.emplace_back("config.version",
                      AnyTensor::wrap(Tensor<double>::from({std::size_t(1)}, {1.0})));
  const std::string path3 = (dir / "broken.jvt").string();
  save_named_tensors(path3, broken);
  expect_throw_with<FormatError>([&] { (void)load_checkpoint(path3); }, "missing entry");
}

TEST_CASE("learn: history csv lists one row per epoch") {
  const auto dir = tmp_dir("hist");
  TrainHistory h;
  h.train_loss = {0.75, 0.5};
  h.val_map = {0.25, 0.625};
  h.lr_frontend = {1e-5, 1e-6};
  h.lr_rest = {1e-4, 1e-5};
  const std::string path = (dir / "history.csv").string();
  save_history_csv(path, h);
  std::ifstream in(path);
  std::string line;
  REQUIRE(bool(std::getline(in, line)));
  CHECK(line == "epoch,train_loss,val_map,lr");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 4);
    CHECK(std::stoul(cells[0]) == rows + 1);
    CHECK(std::stod(cells[1]) == doctest::Approx(h.train_loss[rows]).epsilon(1e-15));
    CHECK(std::stod(cells[2]) == doctest::Approx(h.val_map[rows]).epsilon(1e-15));
    CHECK(std::stod(cells[3]) == doctest::Approx(h.lr_rest[rows]).epsilon(1e-15));
    ++rows;
  }
  CHECK(rows == 2);
}

TEST_CASE("learn: zero epochs returns the freshly built model") {
  const auto scenes = generate_dataset(train_manifest(3, 0.05, 21), 1);
  const ModelConfig mc = train_model_cfg();
  const TrainConfig tc = quick_train(0, 2, 33);
  const Checkpoint ck = train_model(mc, tc, scenes, {});
  CHECK(ck.epoch == 0);
  CHECK(ck.history.train_loss.empty());
  CHECK(ck.optim.step == 0);
  require_params_equal(ck.params, build_params(mc, 33));
  CHECK_THROWS_AS((void)train_model(mc, tc, {}, {}), UsageError);
}

TEST_CASE("learn: full-batch loss decreases monotonically on clean data") {
  const auto scenes = generate_dataset(train_manifest(8, 0.0, 50), 1);
  const ModelConfig mc = train_model_cfg();
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    TrainConfig tc = quick_train(20, 8, seed);
    tc.flip = false;
    tc.specaug = false;
    tc.drop_epoch = 30;  // keep the lr flat across the window
    const Checkpoint ck = train_model(mc, tc, scenes, {});
    REQUIRE(ck.history.train_loss.size() == 20);
    for (std::size_t e = 1; e < 20; ++e) {
      INFO("seed ", seed, " epoch ", e + 1);
      CHECK(ck.history.train_loss[e] < ck.history.train_loss[e - 1]);
    }
  }
}

TEST_CASE("learn: training is deterministic and worker-count independent") {
  const auto scenes = generate_dataset(train_manifest(6, 0.05, 60), 1);
  const auto val = generate_dataset(train_manifest(3, 0.05, 61), 1);
  const ModelConfig mc = train_model_cfg();
  TrainConfig tc = quick_train(2, 3, 7);
  const Checkpoint a = train_model(mc, tc, scenes, val);
  const Checkpoint b = train_model(mc, tc, scenes, val);
  TrainConfig tc3 = tc;
  tc3.workers = 3;
  const Checkpoint c = train_model(mc, tc3, scenes, val);
  for (const Checkpoint* other : {&b, &c}) {
    require_params_equal(a.params, other->params);
    CHECK(a.history.train_loss == other->history.train_loss);
    CHECK(a.history.val_map == other->history.val_map);
    CHECK(a.history.lr_rest == other->history.lr_rest);
  }
  CHECK(a.history.val_map.size() == 2);
  for (double v : a.history.val_map) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("learn: resume extends a run bit-identically") {
  const auto scenes = generate_dataset(train_manifest(6, 0.05, 70), 1);
  const ModelConfig mc = train_model_cfg();
  TrainConfig tc3 = quick_train(3, 3, 9);
  TrainConfig tc1 = tc3;
  tc1.epochs = 1;
  const Checkpoint full = train_model(mc, tc3, scenes, {});
  const Checkpoint part = train_model(mc, tc1, scenes, {});
  const Checkpoint resumed = train_model(mc, tc3, scenes, {}, "", &part);
  require_params_equal(resumed.params, full.params);
  CHECK(resumed.history.train_loss == full.history.train_loss);
  CHECK(resumed.epoch == 3);
  CHECK(resumed.optim.step == full.optim.step);

  TrainConfig other = tc3;
  other.lr_rest = 5e-4;
  CHECK_THROWS_AS((void)train_model(mc, other, scenes, {}, "", &part), ConfigError);
  CHECK_THROWS_AS((void)train_model(mc, tc3, scenes, {}, "equal_weight", &part), ConfigError);
}

TEST_CASE("learn: autosave writes a loadable checkpoint each epoch") {
  const auto dir = tmp_dir("autosave");
  const auto scenes = generate_dataset(train_manifest(4, 0.05, 80), 1);
  const ModelConfig mc = train_model_cfg();
  const TrainConfig tc = quick_train(2, 2, 4);
  const std::string path = (dir / "auto.jvt").string();
  const Checkpoint ck = train_model(mc, tc, scenes, {}, "", nullptr, path);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.epoch == 2);
  require_params_equal(loaded.params, ck.params);
  CHECK(loaded.history.train_loss == ck.history.train_loss);

  // A resumed run restarted from the autosave must land on the same weights.
  TrainConfig tc1 = tc;
  tc1.epochs = 1;
  const Checkpoint part = train_model(mc, tc1, scenes, {});
  const Checkpoint resumed = train_model(mc, tc, scenes, {}, "", &part);
  require_params_equal(resumed.params, ck.params);
}

TEST_CASE("learn: non-finite losses abort with context") {
  auto scenes = generate_dataset(train_manifest(2, 0.05, 90), 1);
  auto& vals = scenes[0].f_v.mutable_data();
  std::fill(vals.begin(), vals.end(), std::numeric_limits<float>::infinity());
  const ModelConfig mc = train_model_cfg();
  const TrainConfig tc = quick_train(1, 2, 2);
  expect_throw_with<NumericError>([&] { (void)train_model(mc, tc, scenes, {}); }, "epoch 1");
}

TEST_CASE("learn: baseline strategies train end to end") {
  const auto scenes = generate_dataset(train_manifest(3, 0.05, 95), 1);
  const ModelConfig mc = train_model_cfg();
  const TrainConfig tc = quick_train(1, 3, 6);
  for (const char* strat : {"late_score", "roi_concat"}) {
    const Checkpoint ck = train_model(mc, tc, scenes, {}, strat);
    CHECK(ck.strategy == strat);
    CHECK(ck.history.train_loss.size() == 1);
    CHECK(std::isfinite(ck.history.train_loss[0]));
  }
  // Every branch of the late-score ensemble receives gradient.
  const Checkpoint ls = train_model(mc, tc, scenes, {}, "late_score");
  const ParamSet<float> init = build_baseline_params(BaselineStrategy::kLateScore, mc, tc.seed);
  for (const char* name :
       {"branch_v.head.fc.w", "branch_a.head.fc.w", "branch_s.head.fc.w"}) {
    const auto& trained = ls.params.at(name);
    const auto& fresh = init.at(name);
    double moved = 0.0;
    for (std::size_t i = 0; i < trained.numel(); ++i)
      moved = std::max(moved, std::abs(double(trained[i]) - double(fresh[i])));
    INFO("branch ", name);
    CHECK(moved > 0.0);
  }
}

TEST_CASE("learn: evaluation collects detections from valid slots") {
  ForwardResult<float> r;
  r.scores = Tensor<float>::from({2, 3}, {0.9f, 0.1f, 0.5f, 0.2f, 0.3f, 0.4f});
  r.boxes = Tensor<float>::from({2, 4}, {0.1f, 0.2f, 0.4f, 0.6f, 0.0f, 0.0f, 1.0f, 1.0f});
  r.mask = {1, 0};
  std::vector<Detection> dets;
  collect_detections(r, 17, dets);
  REQUIRE(dets.size() == 3);  // one valid slot x three classes
  CHECK(dets[0].scene_id == 17);
  CHECK(dets[1].class_id == 1);
  CHECK(dets[2].confidence == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(dets[0].box.x1 == doctest::Approx(0.1).epsilon(1e-7));

  Scene sc;
  sc.id = 17;
  sc.gt_box = Tensor<float>::from({2, 4}, {0.1f, 0.1f, 0.3f, 0.3f, 0.5f, 0.5f, 0.9f, 0.9f});
  sc.gt_labels = {0b101u, 0b010u};
  std::vector<GroundTruthBox> gts;
  collect_ground_truth(sc, gts);
  REQUIRE(gts.size() == 3);
  CHECK(gts[0].class_id == 0);
  CHECK(gts[1].class_id == 2);
  CHECK(gts[2].class_id == 1);
  CHECK(gts[2].box.x1 == doctest::Approx(0.5).epsilon(1e-7));

  const auto scenes = generate_dataset(train_manifest(3, 0.05, 99), 1);
  const ModelConfig mc = train_model_cfg();
  for (const char* strat : {"", "equal_weight"}) {
    const ParamSet<float> p = strat[0] == '\0'
                                  ? build_params(mc, 1)
                                  : build_baseline_params(parse_strategy(strat), mc, 1);
    const double map = evaluate_map(mc, p, scenes, strat, 1);
    INFO("strategy '", strat, "'");
    CHECK(map >= 0.0);
    CHECK(map <= 1.0);
  }
  CHECK_THROWS_AS((void)evaluate_map(mc, build_params(mc, 1), {}, "", 1), UsageError);
}
