// SPDX-License-Identifier: Apache-2.0
#include "amfn/tensor.hpp"

#include <sstream>

namespace amfn {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace amfn
