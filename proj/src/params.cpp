// SPDX-License-Identifier: Apache-2.0
#include "amfn/params.hpp"

namespace amfn {

Tensor<float> init_trunc_normal(const Shape& shape, double stddev, const RngState& base,
                                const std::string& name) {
  RngState rng = base.fork(name);
  std::vector<float> vals(shape_numel(shape));
  for (float& v : vals) v = static_cast<float>(rng.truncated_normal(stddev));
  return Tensor<float>::from(shape, std::move(vals));
}

Tensor<float> init_zeros(const Shape& shape) { return Tensor<float>::zeros(shape); }

Tensor<float> init_ones(const Shape& shape) { return Tensor<float>::full(shape, 1.0f); }

template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace amfn
