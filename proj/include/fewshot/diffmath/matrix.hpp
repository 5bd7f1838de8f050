// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      fail(ErrorKind::dimension,
           "matrix data length " + std::to_string(data_.size()) +
               " does not match shape " + shape_string(rows_, cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) {
        fail(ErrorKind::dimension, "ragged matrix initializer");
      }
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Appends one row; an empty matrix adopts the row's width.
  void append_row(std::span<const double> values) {
    if (rows_ == 0 && data_.empty()) cols_ = values.size();
    if (values.size() != cols_) {
      fail(ErrorKind::dimension, "append_row: row of length " + std::to_string(values.size()) +
                                     " into matrix with " + std::to_string(cols_) + " columns");
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
  if (!a.same_shape(b)) {
    fail(ErrorKind::dimension, std::string(what) + ": shape mismatch " + a.shape() +
                                   " vs " + b.shape());
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Plain (non-differentiable) product a·b.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::dimension, "matmul: shape mismatch " + a.shape() + " vs " + b.shape());
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// Rows `indices` of `m`, in order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = m.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix vstack(const std::vector<Matrix>& parts) {
  std::size_t rows = 0;
  const std::size_t cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::dimension, "vstack: column mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
  return Matrix(rows, cols, std::move(data));
}

}  // namespace fewshot
