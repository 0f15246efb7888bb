// SPDX-License-Identifier: Apache-2.0
#include "amfn/rng.hpp"

#include <cmath>

namespace amfn {

namespace {

// splitmix64 finalizer; full-period bijective mixer.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

RngState::RngState(std::uint64_t seed, std::string_view label)
    : seed_(seed), label_(label) {
  key_ = mix64(mix64(seed) ^ fnv1a(label));
}

RngState RngState::fork(std::string_view label) const {
  return RngState(seed_, label_ + "/" + std::string(label));
}

RngState RngState::fork(std::string_view label, std::uint64_t index) const {
  return RngState(seed_,
                  label_ + "/" + std::string(label) + "." + std::to_string(index));
}

std::uint64_t RngState::next_u64() {
  return mix64(key_ ^ mix64(counter_++));
}

double RngState::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

std::int64_t RngState::uniform_int(std::int64_t lo, std::int64_t hi) {
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection-free modulo; span is tiny relative to 2^64 everywhere we use it.
  return lo + static_cast<std::int64_t>(next_u64() % span);
}

bool RngState::bernoulli(double p) { return next_double() < p; }

double RngState::normal() {
  double u1 = 1.0 - next_double();  // (0, 1]
  double u2 = next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

double RngState::truncated_normal(double stddev) {
  for (;;) {
    double x = normal();
    if (std::fabs(x) <= 2.0) return x * stddev;
  }
}

}  // namespace amfn
