// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "relayattn/tensor.hpp"

namespace relayattn {

/// Arithmetic width of the kernels. Storage is always double; in kFloat32
/// mode every product and partial sum is rounded to float, which emulates a
/// single-precision engine closely enough for tolerance testing.
enum class Precision { kFloat64, kFloat32 };

Precision parse_precision(std::string_view text);
std::string_view to_string(Precision precision);

/// Rounds `x` to the storage width of `precision`.
inline double round_to(Precision precision, double x) {
  return precision == Precision::kFloat32 ? static_cast<double>(static_cast<float>(x)) : x;
}

/// Rounds every element of `t` in place (no-op for kFloat64).
void round_tensor(Tensor& t, Precision precision);

/// Sequential dot product: ((a0*b0 + a1*b1) + a2*b2) + ...
double dot(std::span<const double> a, std::span<const double> b,
           Precision precision = Precision::kFloat64);

/// C = A * B^T for A [m x k] and B [n x k].
///
/// Each output element is a sequential dot product over k, so results are
/// bitwise reproducible and independent of the other rows of A.
Tensor matmul(const Tensor& a, const Tensor& b_transposed,
              Precision precision = Precision::kFloat64);

struct SoftmaxLse {
  Tensor probs;  ///< [rows x cols]
  Tensor lse;    ///< [rows]
};

/// Row-wise softmax plus the row log-sum-exp, max-shifted for stability.
SoftmaxLse softmax_lse(const Tensor& logits, Precision precision = Precision::kFloat64);

inline constexpr double kRopeBase = 10000.0;

/// Rotates consecutive pairs (x[2i], x[2i+1]) by position * base^(-2i/d).
Tensor rope_apply(const Tensor& vec, std::size_t position);
/// In-place variant used by the model for each head slice.
void rope_rotate(std::span<double> vec, std::size_t position);

/// Row-wise RMS normalisation of x [rows x dim] scaled by `gain` [dim].
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6,
                Precision precision = Precision::kFloat64);

/// x * sigmoid(x), elementwise in place.
void silu_inplace(Tensor& x, Precision precision = Precision::kFloat64);

/// In-place a += b; shapes must match.
void add_inplace(Tensor& a, const Tensor& b, Precision precision = Precision::kFloat64);

}  // namespace relayattn
