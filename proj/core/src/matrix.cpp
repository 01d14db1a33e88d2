#include "halluc/matrix.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace halluc {

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::reset(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  data_.assign(rows * cols, 0.0);
}

void matmul_rows(const Matrix& a, const Matrix& b, const Matrix* bias, Matrix& out,
                 std::size_t row_begin) {
  if (a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols()) {
    throw std::invalid_argument("matmul: shape mismatch");
  }
  const std::size_t n = b.cols();
  const std::size_t inner = a.cols();
  for (std::size_t r = row_begin; r < a.rows(); ++r) {
    double* o = out.data() + r * n;
    if (bias) {
      std::copy(bias->data(), bias->data() + n, o);
    } else {
      std::fill(o, o + n, 0.0);
    }
  }
  // 4x16 output tiles stay in registers across k; every element still
  // accumulates in k order.
  using V8 = double __attribute__((vector_size(64)));
  constexpr std::size_t kTile = 16;
  std::size_t r = row_begin;
  for (; r + 4 <= a.rows(); r += 4) {
    const double* a0 = a.data() + r * inner;
    std::size_t c0 = 0;
    for (; c0 + kTile <= n; c0 += kTile) {
      V8 acc[4][2];
      for (std::size_t i = 0; i < 4; ++i) {
        const double* o = out.data() + (r + i) * n + c0;
        std::memcpy(&acc[i][0], o, sizeof(V8));
        std::memcpy(&acc[i][1], o + 8, sizeof(V8));
      }
      for (std::size_t k = 0; k < inner; ++k) {
        V8 b0, b1;
        std::memcpy(&b0, b.data() + k * n + c0, sizeof(V8));
        std::memcpy(&b1, b.data() + k * n + c0 + 8, sizeof(V8));
        for (std::size_t i = 0; i < 4; ++i) {
          const double s = a0[i * inner + k];
          acc[i][0] += s * b0;
          acc[i][1] += s * b1;
        }
      }
      for (std::size_t i = 0; i < 4; ++i) {
        double* o = out.data() + (r + i) * n + c0;
        std::memcpy(o, &acc[i][0], sizeof(V8));
        std::memcpy(o + 8, &acc[i][1], sizeof(V8));
      }
    }
    for (std::size_t i = 0; i < 4; ++i) {
      double* __restrict o = out.data() + (r + i) * n;
      const double* ar = a0 + i * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        const double s = ar[k];
        const double* __restrict br = b.data() + k * n;
        for (std::size_t c = c0; c < n; ++c) o[c] += s * br[c];
      }
    }
  }
  for (; r < a.rows(); ++r) {
    double* __restrict o = out.data() + r * n;
    const double* ar = a.data() + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double s = ar[k];
      const double* __restrict br = b.data() + k * n;
      for (std::size_t c = 0; c < n; ++c) o[c] += s * br[c];
    }
  }
}

void matmul(const Matrix& a, const Matrix& b, const Matrix* bias, Matrix& out) {
  out.reset(a.rows(), b.cols());
  matmul_rows(a, b, bias, out, 0);
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw std::invalid_argument("matmul_tn_acc: shape mismatch");
  }
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* br = b.data() + r * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double s = a(r, i);
      if (s == 0.0) continue;
      double* __restrict o = out.data() + i * n;
      for (std::size_t c = 0; c < n; ++c) o[c] += s * br[c];
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
  out.reset(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.data() + r * inner;
    for (std::size_t c = 0; c < b.rows(); ++c) {
      const double* br = b.data() + c * inner;
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += ar[k] * br[k];
      out(r, c) = s;
    }
  }
}

void add_colsum(const Matrix& a, Matrix& out) {
  if (out.size() != a.cols()) throw std::invalid_argument("add_colsum: shape mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.data() + r * a.cols();
    for (std::size_t c = 0; c < a.cols(); ++c) out.data()[c] += ar[c];
  }
}

}  // namespace halluc
