// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <vector>

#include "amfn/tape.hpp"
#include "amfn/tensor.hpp"

namespace amfn {

// Differentiable tensor ops. Every op takes an optional tape; with a tape and
// at least one tracked input it records a backward closure, otherwise it is a
// pure forward computation. Shapes are strict: the only implicit broadcast is
// a trailing-suffix broadcast in add/mul (b's shape must be a suffix of a's).

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, std::type_identity_t<Real> c, std::type_identity_t<Tape<Real>*> tape);

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> softplus(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> pow_const(const Tensor<Real>& x, std::type_identity_t<Real> exponent, std::type_identity_t<Tape<Real>*> tape);

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b, std::type_identity_t<Tape<Real>*> tape);
// y = x.w + b over the last axis of x; leading axes are preserved.
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                    std::type_identity_t<Tape<Real>*> tape);
// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n); trans_b reads b as (B,n,k).
template <class Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b, bool trans_b, std::type_identity_t<Tape<Real>*> tape);

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, std::type_identity_t<Real> eps, std::type_identity_t<Tape<Real>*> tape);

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> mean_axis(const Tensor<Real>& x, std::size_t axis, std::type_identity_t<Tape<Real>*> tape);

// Weighted mean over axis 0 restricted to entries with mask!=0.
// (K,...) -> (...); requires at least one masked-in row.
template <class Real>
Tensor<Real> masked_mean_axis0(const Tensor<Real>& x, const std::vector<std::uint8_t>& mask,
                               std::type_identity_t<Tape<Real>*> tape);
// y[k,...] = w[k] * x[k,...]
template <class Real>
Tensor<Real> scale_axis0(const Tensor<Real>& x, const std::vector<Real>& w, std::type_identity_t<Tape<Real>*> tape);
// (K,T,D) * (K,D) with the gate broadcast over the time axis.
template <class Real>
Tensor<Real> mul_time_broadcast(const Tensor<Real>& a, const Tensor<Real>& w, std::type_identity_t<Tape<Real>*> tape);

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis, std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> concat(std::initializer_list<Tensor<Real>> parts, std::size_t axis,
                    std::type_identity_t<Tape<Real>*> tape) {
  return concat(std::vector<Tensor<Real>>(parts), axis, tape);
}
template <class Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t start, std::size_t len,
                   std::type_identity_t<Tape<Real>*> tape);
template <class Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<std::size_t>& perm,
                     std::type_identity_t<Tape<Real>*> tape);

// Resizes axis 1 of (K,T,D): identity at T==t_out, contiguous window means
// when shrinking (boundaries floor(i*T/t_out)), nearest repetition when
// growing (index floor(j*T/t_out)). Window means are computed relative to the
// window's first element so a window of identical values reproduces the value
// bit-exactly.
template <class Real>
Tensor<Real> resize_time(const Tensor<Real>& x, std::size_t t_out, std::type_identity_t<Tape<Real>*> tape);

// Multi-head self-attention over the token axis. x is (M,D) or (B,M,D) with
// each batch row an independent sequence. key_bias, when present, is an (M)
// additive term applied to every attention logit row (0 = visible, large
// negative = masked). attn_out, when given, receives detached (B,H,M,M)
// post-softmax probabilities.
template <class Real>
Tensor<Real> multi_head_self_attention(
    const Tensor<Real>& x, const Tensor<Real>& w_qkv, const Tensor<Real>& b_qkv,
    const Tensor<Real>& w_out, const Tensor<Real>& b_out, std::size_t heads,
    const std::type_identity_t<std::optional<Tensor<Real>>>& key_bias, std::type_identity_t<Tape<Real>*> tape,
    Tensor<Real>* attn_out = nullptr);

// Additive attention bias from a key visibility mask: 0 where visible,
// -1e9 where masked. Requires at least one visible key.
template <class Real>
Tensor<Real> attention_key_bias(const std::vector<std::uint8_t>& visible);

// Fixed sinusoidal encodings (constants, never trained).
template <class Real>
Tensor<Real> sinusoidal_pe(std::size_t length, std::size_t dim);
// Grid encoding for (rows x cols) cells flattened row-major: first half of
// the channels encodes the column, second half the row.
template <class Real>
Tensor<Real> sinusoidal_pe_2d(std::size_t rows, std::size_t cols, std::size_t dim);

// Scalar-position encoding used for box geometry features.
std::vector<double> sinusoid_features(double pos, std::size_t dim);

template <class Real>
void ensure_finite(const Tensor<Real>& t, const char* op);

}  // namespace amfn
