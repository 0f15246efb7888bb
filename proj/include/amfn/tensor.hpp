// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "amfn/common.hpp"

namespace amfn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major tensor. Data is shared and treated as immutable once an op
// has produced it; copies are cheap. `node` links the value into a Tape when
// gradients are being recorded (-1 = constant / untracked).
template <class Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<Real>>(shape_numel(t.shape_), Real(0));
    return t;
  }
  static Tensor full(Shape shape, Real value) {
    Tensor t = zeros(std::move(shape));
    for (Real& v : *t.data_) v = value;
    return t;
  }
  static Tensor from(Shape shape, std::vector<Real> values) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor data size " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<Real>>(std::move(values));
    return t;
  }
  static Tensor scalar(Real value) { return from({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool empty() const { return !data_; }

  std::span<const Real> data() const { return {data_->data(), data_->size()}; }
  const Real& operator[](std::size_t i) const { return (*data_)[i]; }
  Real value() const {
    if (numel() != 1) throw ShapeError("value() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  // Mutable access for owners that have not yet published the tensor
  // (initializers, finite-difference perturbation of a private ParamSet).
  std::vector<Real>& mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<Real>>(*data_);
    return *data_;
  }

  // Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  template <class Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Other>((*data_)[i]);
    return Tensor<Other>::from(shape_, std::move(out));
  }

  // Tape linkage. `node` is only meaningful together with `tape_serial`,
  // which names the Tape instance that issued it; a tensor left over from an
  // earlier tape is treated as a constant by ops recording on a newer one.
  int node = -1;
  std::uint64_t tape_serial = 0;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<Real>> data_;
};

// Serialization dtype codes for the tensor container.
template <class Real>
struct dtype_code;
template <>
struct dtype_code<float> {
  static constexpr std::uint8_t value = 0;
};
template <>
struct dtype_code<double> {
  static constexpr std::uint8_t value = 1;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace amfn
