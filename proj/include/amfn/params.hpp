// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "amfn/rng.hpp"
#include "amfn/tape.hpp"
#include "amfn/tensor.hpp"

namespace amfn {

// Named parameter collection. Iteration is lexicographic by name (std::map),
// which fixes watch order, gradient-reduction order, and file layout.
template <class Real>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<Real> t) {
    auto [it, inserted] = entries_.emplace(name, std::move(t));
    (void)it;
    if (!inserted) throw UsageError("duplicate parameter name: " + name);
  }
  Tensor<Real>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::map<std::string, Tensor<Real>>& entries() { return entries_; }
  const std::map<std::string, Tensor<Real>>& entries() const { return entries_; }

  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void watch_all(Tape<Real>& tape) {
    for (auto& [name, t] : entries_) tape.watch(t);
  }

  template <class Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<Other>());
    return out;
  }

 private:
  std::map<std::string, Tensor<Real>> entries_;
};

// Initializers. Each draws from its own stream so adding or removing a
// parameter never shifts another parameter's values.
Tensor<float> init_trunc_normal(const Shape& shape, double stddev, const RngState& base,
                                const std::string& name);
Tensor<float> init_zeros(const Shape& shape);
Tensor<float> init_ones(const Shape& shape);

extern template class ParamSet<float>;
extern template class ParamSet<double>;

}  // namespace amfn
