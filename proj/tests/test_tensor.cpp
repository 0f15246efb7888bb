// SPDX-License-Identifier: Apache-2.0
#include "amfn/tensor.hpp"
#include "doctest.h"

using amfn::ShapeError;
using amfn::Tensor;

TEST_CASE("tensor: factories and shape bookkeeping") {
  auto z = Tensor<float>::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.rank() == 2);
  for (std::size_t i = 0; i < 6; ++i) CHECK(z[i] == 0.0f);

  auto f = Tensor<float>::full({4}, 2.5f);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f[i] == 2.5f);

  auto s = Tensor<double>::scalar(3.0);
  CHECK(s.value() == 3.0);
}

TEST_CASE("tensor: from() rejects mismatched data size") {
  CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
}

TEST_CASE("tensor: value() rejects non-scalars") {
  auto t = Tensor<float>::from({2}, {1.0f, 2.0f});
  CHECK_THROWS_AS(t.value(), ShapeError);
}

TEST_CASE("tensor: reshape preserves data and count, rejects count changes") {
  auto t = Tensor<float>::from({2, 3}, {0, 1, 2, 3, 4, 5});
  auto r = t.reshaped({3, 2});
  CHECK(r.data().data() == t.data().data());  // shared storage
  CHECK(r.dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("tensor: mutable_data copies on write when shared") {
  auto t = Tensor<float>::from({3}, {1, 2, 3});
  Tensor<float> alias = t;
  alias.mutable_data()[0] = 9.0f;
  CHECK(t[0] == 1.0f);
  CHECK(alias[0] == 9.0f);
}

TEST_CASE("tensor: cast converts dtype and preserves values") {
  auto t = Tensor<float>::from({2}, {1.5f, -2.0f});
  auto d = t.cast<double>();
  CHECK(d[0] == 1.5);
  CHECK(d[1] == -2.0);
  auto back = d.cast<float>();
  CHECK(back[0] == 1.5f);
}
