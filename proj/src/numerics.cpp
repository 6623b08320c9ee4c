// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "relayattn/errors.hpp"

namespace relayattn {

Precision parse_precision(std::string_view text) {
  if (text == "f64" || text == "float64" || text == "64") return Precision::kFloat64;
  if (text == "f32" || text == "float32" || text == "32") return Precision::kFloat32;
  throw ConfigError("unknown precision '" + std::string(text) + "' (expected f64 or f32)");
}

std::string_view to_string(Precision precision) {
  return precision == Precision::kFloat32 ? "f32" : "f64";
}

void round_tensor(Tensor& t, Precision precision) {
  if (precision == Precision::kFloat64) return;
  for (double& x : t.data()) x = round_to(precision, x);
}

double dot(std::span<const double> a, std::span<const double> b, Precision precision) {
  if (precision == Precision::kFloat32) {
    float acc = 0.0F;
    for (std::size_t i = 0; i < a.size(); ++i) {
      acc += static_cast<float>(a[i]) * static_cast<float>(b[i]);
    }
    return acc;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

Tensor matmul(const Tensor& a, const Tensor& b_transposed, Precision precision) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b_transposed, 2, "matmul rhs");
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b_transposed.dim(0);
  if (b_transposed.dim(1) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                         " * " + shape_string(b_transposed.shape()) + "^T");
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = a.rows(i, 1);
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] = dot(row, b_transposed.rows(j, 1), precision);
    }
  }
  return c;
}

SoftmaxLse softmax_lse(const Tensor& logits, Precision precision) {
  require_rank(logits, 2, "softmax_lse");
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  if (cols == 0) throw DimensionError("softmax_lse: empty row");
  SoftmaxLse out{Tensor({rows, cols}), Tensor({rows})};
  for (std::size_t r = 0; r < rows; ++r) {
    const auto x = logits.rows(r, 1);
    const double peak = *std::max_element(x.begin(), x.end());
    auto p = out.probs.rows(r, 1);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(x[c] - peak);
      sum += p[c];
    }
    for (double& v : p) v = round_to(precision, v / sum);
    out.lse[r] = round_to(precision, peak + std::log(sum));
  }
  return out;
}

void rope_rotate(std::span<double> vec, std::size_t position) {
  const std::size_t d = vec.size();
  if (d % 2 != 0) throw DimensionError("rope: odd dimension " + std::to_string(d));
  if (position == 0) return;
  const double pos = static_cast<double>(position);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double theta =
        std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = pos * theta;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = vec[2 * i];
    const double x1 = vec[2 * i + 1];
    vec[2 * i] = x0 * c - x1 * s;
    vec[2 * i + 1] = x0 * s + x1 * c;
  }
}

Tensor rope_apply(const Tensor& vec, std::size_t position) {
  require_rank(vec, 1, "rope_apply");
  Tensor out = vec;
  rope_rotate(out.data(), position);
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps, Precision precision) {
  require_rank(x, 2, "rms_norm");
  const std::size_t dim = x.dim(1);
  if (gain.size() != dim) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " for rows of " +
                         std::to_string(dim));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    const auto in = x.rows(r, 1);
    const double mean_sq = dot(in, in, precision) / static_cast<double>(dim);
    const double inv = 1.0 / std::sqrt(mean_sq + eps);
    auto o = out.rows(r, 1);
    for (std::size_t c = 0; c < dim; ++c) o[c] = round_to(precision, in[c] * inv * gain[c]);
  }
  return out;
}

void silu_inplace(Tensor& x, Precision precision) {
  for (double& v : x.data()) v = round_to(precision, v / (1.0 + std::exp(-v)));
}

void add_inplace(Tensor& a, const Tensor& b, Precision precision) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = round_to(precision, a[i] + b[i]);
}

}  // namespace relayattn
