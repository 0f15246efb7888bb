// SPDX-License-Identifier: Apache-2.0
#pragma once
// Finite-difference verification of tape gradients. The objective is run once
// on a tape for analytic gradients, then twice per sampled coordinate with a
// +/-h bump for the central-difference oracle.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "amfn/params.hpp"
#include "amfn/rng.hpp"
#include "amfn/tape.hpp"
#include "amfn/tensor.hpp"

namespace amfn {

// Scalar objective. Must build the same computation whether taped or not so
// the finite-difference evaluations (tape == nullptr) probe the very function
// the tape differentiated.
using GradCheckFn = std::function<Tensor<double>(const ParamSet<double>&, Tape<double>*)>;

struct GradCheckRecord {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  GradCheckRecord worst;
  std::size_t coords_checked = 0;
  std::vector<std::string> failures;  // non-finite evaluations, one per coordinate
  bool ok(double tol) const { return failures.empty() && max_rel_err <= tol; }
};

// Checks `samples` coordinates per tensor (every coordinate when the tensor
// is smaller than that), drawn from `rng` in parameter-name order. Relative
// error uses max(|analytic|, |numeric|, 1e-8) as denominator. h must lie in
// [1e-6, 1e-4]; everything runs in 64-bit.
GradCheckReport grad_check(const GradCheckFn& f, const ParamSet<double>& params, double h,
                           std::size_t samples, RngState& rng);

void save_gradcheck_report(const std::string& path, const GradCheckReport& report);

}  // namespace amfn
