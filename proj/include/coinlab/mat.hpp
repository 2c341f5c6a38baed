#pragma once

// Dense row-major matrices and the handful of kernels everything else sits
// on. Batched 3-D tensors are stored as (batch*rows) x cols with the batch
// extent tracked by the caller. All kernels keep a fixed per-element
// reduction order, so results do not depend on thread count.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "coinlab/errors.hpp"

namespace coinlab {

struct Mat {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int64_t r, int64_t c) : rows(r), cols(c), a(static_cast<size_t>(r * c), 0.0) {}

  int64_t size() const { return rows * cols; }
  double* data() { return a.data(); }
  const double* data() const { return a.data(); }
  double* row(int64_t i) { return a.data() + i * cols; }
  const double* row(int64_t i) const { return a.data() + i * cols; }
  double& at(int64_t i, int64_t j) { return a[i * cols + j]; }
  double at(int64_t i, int64_t j) const { return a[i * cols + j]; }

  void fill(double v) { std::fill(a.begin(), a.end(), v); }
  void zero() { fill(0.0); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline std::string shape_str(const Mat& m) {
  return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

inline void require_same_shape(const Mat& x, const Mat& y, const char* op) {
  if (!x.same_shape(y))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(x) + " vs " + shape_str(y));
}

// C = A * B, (m x k)(k x n). Accumulates over k in index order per output row.
inline void matmul_nn(Mat& c, const Mat& a, const Mat& b) {
  if (a.cols != b.rows)
    throw ShapeError("matmul: inner dims " + shape_str(a) + " vs " + shape_str(b));
  c.rows = a.rows;
  c.cols = b.cols;
  c.a.assign(static_cast<size_t>(c.rows * c.cols), 0.0);
  const int64_t m = a.rows, k = a.cols, n = b.cols;
  for (int64_t i = 0; i < m; ++i) {
    double* __restrict ci = c.row(i);
    const double* __restrict ai = a.row(i);
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* __restrict bp = b.row(p);
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// Strided lane sums break the serial dependency of a plain dot loop while
// keeping a fixed summation order.
inline double dot_unrolled(const double* __restrict x, const double* __restrict y, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  double s4 = 0.0, s5 = 0.0, s6 = 0.0, s7 = 0.0;
  int64_t j = 0;
  for (; j + 8 <= n; j += 8) {
    s0 += x[j] * y[j];
    s1 += x[j + 1] * y[j + 1];
    s2 += x[j + 2] * y[j + 2];
    s3 += x[j + 3] * y[j + 3];
    s4 += x[j + 4] * y[j + 4];
    s5 += x[j + 5] * y[j + 5];
    s6 += x[j + 6] * y[j + 6];
    s7 += x[j + 7] * y[j + 7];
  }
  double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
  for (; j < n; ++j) s += x[j] * y[j];
  return s;
}

// C += A * B^T, (m x n)(k x n)^T -> (m x k). Row-dot form.
inline void matmul_nt_acc(Mat& c, const Mat& a, const Mat& b) {
  if (a.cols != b.cols)
    throw ShapeError("matmul_nt: inner dims " + shape_str(a) + " vs " + shape_str(b));
  const int64_t m = a.rows, n = a.cols, k = b.rows;
  for (int64_t i = 0; i < m; ++i) {
    const double* __restrict ai = a.row(i);
    double* __restrict ci = c.row(i);
    for (int64_t p = 0; p < k; ++p) ci[p] += dot_unrolled(ai, b.row(p), n);
  }
}

// C += A^T * B, (m x k)^T (m x n) -> (k x n). Streams A and B row-wise.
inline void matmul_tn_acc(Mat& c, const Mat& a, const Mat& b) {
  if (a.rows != b.rows)
    throw ShapeError("matmul_tn: outer dims " + shape_str(a) + " vs " + shape_str(b));
  const int64_t m = a.rows, k = a.cols, n = b.cols;
  for (int64_t i = 0; i < m; ++i) {
    const double* __restrict ai = a.row(i);
    const double* __restrict bi = b.row(i);
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* __restrict cp = c.row(p);
      for (int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

inline double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

// FNV-1a over the raw little-endian bytes; used for content digests and
// frozen-weight checksums.
inline uint64_t fnv1a64(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xCBF29CE484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline uint64_t digest(const Mat& m) {
  return fnv1a64(m.a.data(), m.a.size() * sizeof(double));
}

}  // namespace coinlab
