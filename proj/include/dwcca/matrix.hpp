#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace dwcca {

// Dense row-major f64 matrix; the universal numeric carrier of the project.
// Plain value type: copyable, movable, comparable bit-for-bit.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), d_(rows * cols, fill) {}

  // Validating constructor: checks size consistency and finiteness.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return d_.size(); }
  bool empty() const { return d_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return d_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return d_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {d_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {d_.data() + i * cols_, cols_}; }

  std::vector<double>& data() { return d_; }
  const std::vector<double>& data() const { return d_; }

  bool operator==(const Matrix& o) const = default;

  Matrix& operator+=(const Matrix& o);
  Matrix& operator-=(const Matrix& o);
  Matrix& operator*=(double s);

  Matrix transpose() const;
  bool all_finite() const;

  double max_abs() const;
  double frobenius_norm() const;
  double trace() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> d_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

// y = a * b, shapes checked
Matrix matmul(const Matrix& a, const Matrix& b);

// (a + a^T) / 2
Matrix symmetrize(const Matrix& a);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace dwcca
