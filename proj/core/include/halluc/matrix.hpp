#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace halluc {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double v);
  // Reshapes and zero-fills.
  void reset(std::size_t rows, std::size_t cols);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Each output row depends only on the matching input row and is computed the same
// way whatever the row count.

/// out[r] = a[r] * b (+ bias) for r in [row_begin, a.rows()). out must be sized.
void matmul_rows(const Matrix& a, const Matrix& b, const Matrix* bias, Matrix& out,
                 std::size_t row_begin = 0);

/// out = a * b (+ bias); resizes out.
void matmul(const Matrix& a, const Matrix& b, const Matrix* bias, Matrix& out);

/// out += a^T * b.
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);

/// out = a * b^T; resizes out.
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);

/// out += colsum(a) as a 1 x cols row.
void add_colsum(const Matrix& a, Matrix& out);

}  // namespace halluc
