// SPDX-License-Identifier: Apache-2.0
#include "amfn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "amfn/common.hpp"

namespace amfn {

GradCheckReport grad_check(const GradCheckFn& f, const ParamSet<double>& params, double h,
                           std::size_t samples, RngState& rng) {
  if (!(h >= 1e-6 && h <= 1e-4))
    throw UsageError("grad_check: step must lie in [1e-6, 1e-4], got " + std::to_string(h));
  if (samples == 0) throw UsageError("grad_check: samples must be >= 1");
  if (params.entries().empty()) throw UsageError("grad_check: empty parameter set");

  GradCheckReport rep;
  ParamSet<double> tracked = params;
  Tape<double> tape;
  tracked.watch_all(tape);
  Tensor<double> loss = f(tracked, &tape);
  if (!std::isfinite(loss.value())) {
    rep.failures.push_back("objective: non-finite value at the base point");
    return rep;
  }
  tape.backward(loss);

  ParamSet<double> work = params;  // bumped in place for the fd evaluations
  for (const auto& [name, t] : tracked.entries()) {
    const auto g = tape.grad(t.node);
    const std::size_t n = t.numel();
    auto& vals = work.at(name).mutable_data();
    const bool full = samples >= n;
    const std::size_t count = full ? n : samples;
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t i =
          full ? s : static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(n - 1)));
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f(work, nullptr).value();
      vals[i] = orig - h;
      const double fm = f(work, nullptr).value();
      vals[i] = orig;
      ++rep.coords_checked;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.failures.push_back(name + "[" + std::to_string(i) + "]: non-finite evaluation");
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      // Parameters the objective never touches have no tape slot; their
      // gradient is zero.
      const double analytic = g.empty() ? 0.0 : g[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > rep.max_rel_err || rep.worst.name.empty()) {
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        rep.worst = {name, i, analytic, numeric, rel};
      }
    }
  }
  return rep;
}

void save_gradcheck_report(const std::string& path, const GradCheckReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  char buf[160];
  std::snprintf(buf, sizeof buf, "coords_checked %zu\nfailures %zu\nmax_rel_err %.17g\n",
                report.coords_checked, report.failures.size(), report.max_rel_err);
  out << buf;
  if (!report.worst.name.empty()) {
    std::snprintf(buf, sizeof buf, "worst %s[%zu] analytic %.17g numeric %.17g\n",
                  report.worst.name.c_str(), report.worst.index, report.worst.analytic,
                  report.worst.numeric);
    out << buf;
  }
  for (const auto& line : report.failures) out << "failure " << line << "\n";
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace amfn
