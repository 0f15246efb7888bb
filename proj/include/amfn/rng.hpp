// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace amfn {

// Counter-based deterministic RNG. A stream is identified by (seed, label);
// draws are a pure function of (seed, label, counter), so streams can be
// created in any order, on any thread, and always produce the same sequence.
class RngState {
 public:
  RngState(std::uint64_t seed, std::string_view label);

  // Derives a child stream, e.g. rng.fork("scene", 17).
  RngState fork(std::string_view label) const;
  RngState fork(std::string_view label, std::uint64_t index) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double next_double();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p);
  // Standard normal via Box-Muller (no cached spare; two draws per call).
  double normal();
  // Normal(0, std) rejected outside +/- 2 std.
  double truncated_normal(double stddev);

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace amfn
