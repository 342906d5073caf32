// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace palu {

/// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::string shape_string() const;

  /// Throws numerical error if any entry is NaN or infinite.
  void require_finite(const std::string& what) const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Row-by-row, left-to-right accumulation; bit-reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double factor);

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end);
Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end);
Matrix hconcat(std::span<const Matrix> blocks);
Matrix vconcat(std::span<const Matrix> blocks);
Matrix block_diagonal(std::span<const Matrix> blocks);

double frobenius_norm(const Matrix& m);
/// ||a - b||_F / ||b||_F, or the absolute difference when b is zero.
double relative_error(const Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);
double trace(const Matrix& m);

}  // namespace palu
