// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace evacap {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles.
///
/// A default-constructed tensor is "absent" (rank 0, no data); it is used for
/// optional inputs such as a missing visual stream. Every constructed tensor
/// has strictly positive extents and product(shape) == size().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// 2-D tensor from nested rows; all rows must have equal length.
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }
  static Tensor identity(std::size_t n);

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  // Matrix view helpers; valid for rank-2 tensors.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Value of a [1x1] tensor.
  double item() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }

  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain (non-recorded) kernels. The autodiff ops call these for their forward
// values, so there is exactly one implementation of each kernel.

/// C = A·B with the inner sum taken left to right over k.
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A·Bᵀ, same summation order.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// C = Aᵀ·B.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Stack rank-2 tensors vertically; absent tensors are skipped.
Tensor concat_rows(const std::vector<Tensor>& parts);

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Position-weighted sum used for golden checksums of model outputs.
double checksum(const Tensor& t);

/// Logistic function kept strictly inside (0, 1) even where the exact value
/// rounds to 0 or 1 in double precision.
double stable_sigmoid(double x);

}  // namespace evacap
