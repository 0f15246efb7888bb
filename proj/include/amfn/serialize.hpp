// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "amfn/params.hpp"
#include "amfn/tensor.hpp"

namespace amfn {

// Binary tensor container ("JVT1"): magic, version u32 LE, dtype u8
// (0 = f32, 1 = f64), rank u8, extents u64 LE, row-major payload LE.
// A named-tensor file is: u32 entry count, then per entry u16 name length,
// UTF-8 name, embedded tensor container. Parse errors carry the byte offset.

// Tagged union so one file can mix f32 and f64 entries (e.g. checkpoints).
struct AnyTensor {
  std::uint8_t dtype = 0;
  Tensor<float> f32;
  Tensor<double> f64;

  static AnyTensor wrap(Tensor<float> t) {
    AnyTensor a;
    a.dtype = 0;
    a.f32 = std::move(t);
    return a;
  }
  static AnyTensor wrap(Tensor<double> t) {
    AnyTensor a;
    a.dtype = 1;
    a.f64 = std::move(t);
    return a;
  }
  Tensor<float> as_f32(const std::string& context) const;
  Tensor<double> as_f64(const std::string& context) const;
};

using NamedTensors = std::vector<std::pair<std::string, AnyTensor>>;

void save_named_tensors(const std::string& path, const NamedTensors& entries);
NamedTensors load_named_tensors(const std::string& path);

// Single-tensor convenience files (diagnostic exports).
template <class Real>
void save_tensor_file(const std::string& path, const Tensor<Real>& t);

void save_param_set(const std::string& path, const ParamSet<float>& params);
ParamSet<float> load_param_set(const std::string& path);

}  // namespace amfn
