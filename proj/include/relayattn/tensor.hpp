// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace relayattn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// The tensor owns its storage; copies are deep. A default-constructed
/// tensor has rank 0 and no elements.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor of the given shape.
  explicit Tensor(Shape shape);
  /// Throws DimensionError when `data.size() != product(shape)`.
  Tensor(Shape shape, std::vector<double> data);
  Tensor(Shape shape, std::initializer_list<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Contiguous slice along the leading axis: rows [first, first + count).
  std::span<double> rows(std::size_t first, std::size_t count);
  std::span<const double> rows(std::size_t first, std::size_t count) const;
  /// Stride (in elements) of one step along the leading axis.
  std::size_t row_stride() const noexcept;

  /// Same data, new shape. Throws DimensionError if sizes disagree.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  /// Throws NumericError naming `where` on the first non-finite value.
  void require_finite(std::string_view where) const;

  /// Bitwise equality of shape and data.
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Largest |a_i - b_i|; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Concatenates along axis 0; trailing dimensions must agree.
Tensor concat_rows(const Tensor& first, const Tensor& second);

/// Throws DimensionError unless `t` has exactly `rank` axes.
void require_rank(const Tensor& t, std::size_t rank, std::string_view what);

}  // namespace relayattn
