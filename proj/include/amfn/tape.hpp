// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <functional>
#include <span>
#include <vector>

#include "amfn/tensor.hpp"

namespace amfn {

// Reverse-mode differentiation tape. Ops append nodes in execution order,
// which is already a topological order, so backward is a single reverse
// sweep. A tape is single-owner, single-threaded and single-use.
template <class Real>
class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  Tape() : serial_(next_serial()) {}

  // Marks a leaf tensor (parameter or tracked input).
  void watch(Tensor<Real>& t) {
    t.node = record(t.numel(), nullptr);
    t.tape_serial = serial_;
  }

  // True when the tensor's node id was issued by this tape. Node ids from
  // other tapes would otherwise alias unrelated nodes here.
  bool tracks(const Tensor<Real>& t) const { return t.node >= 0 && t.tape_serial == serial_; }

  // Copy for capture in a backward closure: node ids from foreign tapes are
  // cleared so the closure sees them as constants.
  Tensor<Real> claim(const Tensor<Real>& t) const {
    Tensor<Real> c = t;
    if (!tracks(t)) c.node = -1;
    return c;
  }

  std::uint64_t serial() const { return serial_; }

  int record(std::size_t out_numel, BackFn back) {
    nodes_.push_back(Node{std::move(back), out_numel});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Runs the reverse sweep from a scalar loss. Gradients of every watched
  // leaf reachable from the loss are afterwards available via grad();
  // unreached leaves report an empty span, which callers read as zero.
  void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!tracks(loss)) throw UsageError("loss is not on this tape");
    if (used_) throw UsageError("tape already consumed by a backward pass");
    used_ = true;
    grads_[static_cast<std::size_t>(loss.node)].assign(1, Real(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].back && !grads_[i].empty()) nodes_[i].back(*this);
    }
  }

  std::span<const Real> grad(int node) const {
    if (node < 0) return {};
    const auto& g = grads_[static_cast<std::size_t>(node)];
    return {g.data(), g.size()};
  }

  // Gradient accumulation slot, zero-initialized on first touch.
  std::span<Real> grad_slot(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].numel, Real(0));
    return {g.data(), g.size()};
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return used_; }

 private:
  struct Node {
    BackFn back;
    std::size_t numel;
  };
  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;  // serial 0 is reserved for "no tape"
  }

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<std::vector<Real>> grads_;
  bool used_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace amfn
