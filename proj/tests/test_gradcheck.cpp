// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "amfn/gradcheck.hpp"
#include "amfn/dataset.hpp"
#include "amfn/learn.hpp"
#include "amfn/model.hpp"
#include "amfn/ops.hpp"
#include "amfn/rng.hpp"
#include "doctest.h"

using namespace amfn;

namespace {

// f(theta) = 0.5 * sum theta^2 over every tensor; analytic gradient is theta
// itself, and the symmetric difference of a quadratic is exact up to
// rounding, so the relative error is pure float noise.
Tensor<double> half_norm_sq(const ParamSet<double>& p, Tape<double>* tape) {
  Tensor<double> acc;
  bool first = true;
  for (const auto& [name, t] : p.entries()) {
    Tensor<double> s = sum_all(mul(t, t, tape), tape);
    acc = first ? s : add(acc, s, tape);
    first = false;
  }
  return scale(acc, 0.5, tape);
}

}  // namespace

TEST_CASE("gradcheck: analytic quadratic has near-zero error") {
  ParamSet<double> p;
  p.add("a", Tensor<double>::from({3}, {0.5, -1.25, 2.0}));
  p.add("b", Tensor<double>::from({2, 2}, {0.1, -0.2, 0.3, -0.4}));
  RngState rng(1, "quad");
  const GradCheckReport rep = grad_check(half_norm_sq, p, 1e-5, 100, rng);
  CHECK(rep.coords_checked == 7);  // samples exceed both sizes: all coords
  CHECK(rep.failures.empty());
  CHECK(rep.max_rel_err <= 1e-9);
  CHECK(rep.ok(1e-9));
  CHECK_FALSE(rep.worst.name.empty());
  CHECK(rep.worst.rel_err == rep.max_rel_err);
}

TEST_CASE("gradcheck: sampling is capped and deterministic") {
  ParamSet<double> p;
  std::vector<double> vals(50);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * double(i) - 0.2;
  p.add("big", Tensor<double>::from({50}, std::move(vals)));
  RngState r1(9, "sample");
  const GradCheckReport a = grad_check(half_norm_sq, p, 1e-5, 5, r1);
  CHECK(a.coords_checked == 5);
  RngState r2(9, "sample");
  const GradCheckReport b = grad_check(half_norm_sq, p, 1e-5, 5, r2);
  CHECK(a.max_rel_err == b.max_rel_err);
  CHECK(a.worst.name == b.worst.name);
  CHECK(a.worst.index == b.worst.index);
}

TEST_CASE("gradcheck: non-finite evaluations are recorded as failures") {
  ParamSet<double> p;
  // The -h bump drives the coordinate negative and sqrt of a negative is NaN.
  p.add("edge", Tensor<double>::from({1}, {5e-6}));
  auto f = [](const ParamSet<double>& q, Tape<double>* tape) {
    return sum_all(pow_const(q.at("edge"), 0.5, tape), tape);
  };
  RngState rng(3, "nan");
  const GradCheckReport rep = grad_check(f, p, 1e-5, 4, rng);
  REQUIRE(rep.failures.size() == 1);
  CHECK(rep.failures[0].find("edge[0]") != std::string::npos);
  CHECK_FALSE(rep.ok(1.0));
}

TEST_CASE("gradcheck: rejects out-of-range steps and empty inputs") {
  ParamSet<double> p;
  p.add("a", Tensor<double>::from({1}, {1.0}));
  RngState rng(0, "bad");
  CHECK_THROWS_AS((void)grad_check(half_norm_sq, p, 1e-3, 4, rng), UsageError);
  CHECK_THROWS_AS((void)grad_check(half_norm_sq, p, 5e-7, 4, rng), UsageError);
  CHECK_THROWS_AS((void)grad_check(half_norm_sq, p, 1e-5, 0, rng), UsageError);
  ParamSet<double> empty;
  CHECK_THROWS_AS((void)grad_check(half_norm_sq, empty, 1e-5, 4, rng), UsageError);
}

TEST_CASE("gradcheck: tiny model with focal loss passes at 1e-4") {
  DatasetManifest m;
  m.scenes = 1;
  m.n_cls = 3;
  m.seed = 17;
  m.noise_sigma = 0.05;
  m.label_rate = 0.5;
  m.k_gt_max = 2;
  m.k_slots = 3;
  m.channels = 6;
  m.d_roi = 8;
  m.t_v = 2;
  m.n_v = 4;
  m.t_a = 2;
  m.n_a = 2;
  m.t_s = 1;
  m.n_s = 2;
  m.class_cues = {"v", "a", "s"};
  const Scene sc = generate_scene(m, 0);

  ModelConfig cfg;
  cfg.l = 1;
  cfg.d = 8;
  cfg.k = 3;
  cfg.n_cls = 3;
  cfg.t_v = 2;
  cfg.n_v = 4;
  cfg.t_a = 2;
  cfg.n_a = 2;
  cfg.t_s = 1;
  cfg.n_s = 2;
  cfg.t_c = 2;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.gate_ratio = 2;
  cfg.c_in = 6;
  cfg.d_roi = 8;

  const ModelInput<double> in = to_model_input<double>(sc);
  const Tensor<double> targets = to_targets<double>(sc, cfg.n_cls);
  const FocalConfig focal{};
  auto f = [&](const ParamSet<double>& p, Tape<double>* tape) {
    const ForwardResult<double> r = forward(in, cfg, p, tape);
    return sigmoid_focal_loss<double>(r.logits, targets, in.mask, focal, tape);
  };
  const ParamSet<double> params = build_params(cfg, 23).cast<double>();
  RngState rng(5, "model");
  const GradCheckReport rep = grad_check(f, params, 1e-5, 2, rng);
  CHECK(rep.failures.empty());
  CHECK(rep.coords_checked >= 2 * params.size());
  INFO("worst ", rep.worst.name, "[", rep.worst.index, "] rel ", rep.max_rel_err);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("gradcheck: report file round trips the summary") {
  const auto dir = std::filesystem::temp_directory_path() / "amfn_gradcheck_tests";
  std::filesystem::create_directories(dir);
  ParamSet<double> p;
  p.add("a", Tensor<double>::from({2}, {0.25, -0.75}));
  RngState rng(2, "report");
  const GradCheckReport rep = grad_check(half_norm_sq, p, 1e-5, 8, rng);
  const std::string path = (dir / "report.txt").string();
  save_gradcheck_report(path, rep);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  CHECK(text.find("coords_checked 2") != std::string::npos);
  CHECK(text.find("failures 0") != std::string::npos);
  CHECK(text.find("max_rel_err") != std::string::npos);
  CHECK(text.find("worst a[") != std::string::npos);
}
