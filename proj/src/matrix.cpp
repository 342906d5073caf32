// SPDX-License-Identifier: Apache-2.0
#include "palu/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "palu/error.hpp"

namespace palu {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    fail_validation("matrix data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_string());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) fail_validation("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix::require_finite(const std::string& what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      fail_numerical(what + ": non-finite entry at (" + std::to_string(i / cols_) + ", " +
                     std::to_string(i % cols_) + ")");
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    fail_validation("matmul dimension mismatch: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto src = b.row(k);
      for (std::size_t j = 0; j < n; ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail_validation(std::string(op) + " shape mismatch: " + a.shape_string() + " vs " +
                    b.shape_string());
  }
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto d = out.data();
  auto s = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto d = out.data();
  auto s = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= s[i];
  return out;
}

Matrix scale(const Matrix& m, double factor) {
  Matrix out = m;
  for (double& v : out.data()) v *= factor;
  return out;
}

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end) {
  if (begin > end || end > m.cols()) {
    fail_validation("column slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                    ") out of range for " + m.shape_string());
  }
  Matrix out(m.rows(), end - begin);
  for (std::size_t i = 0; i < m.rows(); ++i)
    std::copy_n(m.row(i).begin() + static_cast<std::ptrdiff_t>(begin), end - begin,
                out.row(i).begin());
  return out;
}

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  if (begin > end || end > m.rows()) {
    fail_validation("row slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                    ") out of range for " + m.shape_string());
  }
  const auto src = m.data().subspan(begin * m.cols(), (end - begin) * m.cols());
  return Matrix(end - begin, m.cols(), std::vector<double>(src.begin(), src.end()));
}

Matrix hconcat(std::span<const Matrix> blocks) {
  if (blocks.empty()) return {};
  const std::size_t rows = blocks.front().rows();
  std::size_t cols = 0;
  for (const auto& b : blocks) {
    if (b.rows() != rows) fail_validation("hconcat row mismatch: " + b.shape_string());
    cols += b.cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const auto& b : blocks) {
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(b.row(i).begin(), b.row(i).end(),
                out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
    offset += b.cols();
  }
  return out;
}

Matrix vconcat(std::span<const Matrix> blocks) {
  if (blocks.empty()) return {};
  const std::size_t cols = blocks.front().cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& b : blocks) {
    if (b.cols() != cols) fail_validation("vconcat column mismatch: " + b.shape_string());
    data.insert(data.end(), b.data().begin(), b.data().end());
    rows += b.rows();
  }
  return Matrix(rows, cols, std::move(data));
}

Matrix block_diagonal(std::span<const Matrix> blocks) {
  std::size_t rows = 0, cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out(rows, cols);
  std::size_t r0 = 0, c0 = 0;
  for (const auto& b : blocks) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) out(r0 + i, c0 + j) = b(i, j);
    r0 += b.rows();
    c0 += b.cols();
  }
  return out;
}

double frobenius_norm(const Matrix& m) {
  double sum = 0.0;
  for (double v : m.data()) sum += v * v;
  return std::sqrt(sum);
}

double relative_error(const Matrix& a, const Matrix& b) {
  const double diff = frobenius_norm(subtract(a, b));
  const double ref = frobenius_norm(b);
  return ref > 0.0 ? diff / ref : diff;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double best = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
  return best;
}

double trace(const Matrix& m) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) t += m(i, i);
  return t;
}

}  // namespace palu
