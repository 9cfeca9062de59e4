#pragma once

// Dense double-precision matrices (row-major) plus the two numeric
// primitives everything else leans on: GEMM (via Eigen) and an SPD
// solve (own Cholesky, so factorization failures report the pivot).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pme {

class ShapeError : public std::logic_error {
 public:
  explicit ShapeError(const std::string& what) : std::logic_error(what) {}
};

class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(int pivot, double value)
      : std::runtime_error("matrix not positive definite at pivot " +
                           std::to_string(pivot) + " (value " +
                           std::to_string(value) + ")"),
        pivot_index(pivot) {}
  int pivot_index;
};

#define PME_CHECK(cond, msg)                  \
  do {                                        \
    if (!(cond)) throw ::pme::ShapeError(msg); \
  } while (0)

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMajor>;
using EigenConstMap = Eigen::Map<const EigenRowMajor>;

// Row-major matrix of doubles. Column-vector math convention throughout:
// a "vector" is a rows x 1 matrix, keys/values are stored as columns.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols) : rows_(rows), cols_(cols), data_(size_t(rows) * cols, 0.0) {
    PME_CHECK(rows >= 0 && cols >= 0, "negative matrix dimension");
  }

  // Construction from explicit data checks the finiteness invariant.
  static Matrix from(int rows, int cols, std::vector<double> values) {
    PME_CHECK(values.size() == size_t(rows) * cols, "data length != rows*cols");
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(values);
    for (double v : m.data_)
      PME_CHECK(std::isfinite(v), "non-finite entry in matrix construction");
    return m;
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int i, int j) { return data_[size_t(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[size_t(i) * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  std::span<double> row(int i) { return {data_.data() + size_t(i) * cols_, size_t(cols_)}; }
  std::span<const double> row(int i) const {
    return {data_.data() + size_t(i) * cols_, size_t(cols_)};
  }

  EigenMap map() { return EigenMap(data_.data(), rows_, cols_); }
  EigenConstMap map() const { return EigenConstMap(data_.data(), rows_, cols_); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(0.0); }

  // Reshape reusing the existing buffer where possible. Contents are
  // unspecified afterwards; callers overwrite every element.
  void resize(int r, int c) {
    PME_CHECK(r >= 0 && c >= 0, "negative matrix dimension");
    rows_ = r;
    cols_ = c;
    data_.resize(size_t(r) * c);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  PME_CHECK(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  c.map().noalias() = a.map() * b.map();
  return c;
}

// dst = A * B, reusing dst's buffer (hot path)
inline void matmul_into(Matrix& dst, const Matrix& a, const Matrix& b) {
  PME_CHECK(a.cols() == b.rows(), "matmul_into: inner dimensions differ");
  dst.resize(a.rows(), b.cols());
  dst.map().noalias() = a.map() * b.map();
}

// dst = A * B^T, reusing dst's buffer
inline void matmul_nt_into(Matrix& dst, const Matrix& a, const Matrix& b) {
  PME_CHECK(a.cols() == b.cols(), "matmul_nt_into: col counts differ");
  dst.resize(a.rows(), b.rows());
  dst.map().noalias() = a.map() * b.map().transpose();
}

// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  PME_CHECK(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Matrix c(a.cols(), b.cols());
  c.map().noalias() = a.map().transpose() * b.map();
  return c;
}

// C = A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  PME_CHECK(a.cols() == b.cols(), "matmul_nt: col counts differ");
  Matrix c(a.rows(), b.rows());
  c.map().noalias() = a.map() * b.map().transpose();
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  t.map() = a.map().transpose();
  return t;
}

inline void add_inplace(Matrix& a, const Matrix& b, double scale = 1.0) {
  PME_CHECK(a.same_shape(b), "add_inplace: shape mismatch");
  a.map() += scale * b.map();
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  PME_CHECK(a.same_shape(b), "subtract: shape mismatch");
  Matrix c(a.rows(), a.cols());
  c.map() = a.map() - b.map();
  return c;
}

inline void scale_inplace(Matrix& a, double s) { a.map() *= s; }

inline double frobenius_norm(const Matrix& a) { return a.map().norm(); }

inline double dot(std::span<const double> a, std::span<const double> b) {
  PME_CHECK(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct SpdSolveResult {
  Matrix solution;       // X with A * X ~= B
  double residual_norm;  // ||A*X - B||_F, computed post-hoc
};

// Solves A X = B for symmetric positive-definite A via an in-place
// Cholesky factorization (A = L L^T) and two triangular substitutions.
// Never forms an explicit inverse. Throws NotPositiveDefinite with the
// failing pivot index when a pivot is not strictly positive.
inline SpdSolveResult spd_solve(const Matrix& a, const Matrix& b) {
  const int n = a.rows();
  PME_CHECK(a.cols() == n, "spd_solve: A must be square");
  PME_CHECK(b.rows() == n, "spd_solve: B row count must match A");
  // symmetry tolerance from the construction contract
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      PME_CHECK(std::abs(a(i, j) - a(j, i)) <= 1e-10 * std::max(1.0, std::abs(a(i, j))),
                "spd_solve: A not symmetric within tolerance");

  Matrix l = a;  // factor in place, lower triangle
  for (int k = 0; k < n; ++k) {
    double pivot = l(k, k);
    for (int j = 0; j < k; ++j) pivot -= l(k, j) * l(k, j);
    if (!(pivot > 0.0) || !std::isfinite(pivot)) throw NotPositiveDefinite(k, pivot);
    const double lkk = std::sqrt(pivot);
    l(k, k) = lkk;
    for (int i = k + 1; i < n; ++i) {
      double s = l(i, k);
      for (int j = 0; j < k; ++j) s -= l(i, j) * l(k, j);
      l(i, k) = s / lkk;
    }
  }

  // L Y = B, then L^T X = Y; columns handled together row-wise.
  const int m = b.cols();
  Matrix x = b;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < m; ++c) {
      double s = x(i, c);
      for (int j = 0; j < i; ++j) s -= l(i, j) * x(j, c);
      x(i, c) = s / l(i, i);
    }
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int c = 0; c < m; ++c) {
      double s = x(i, c);
      for (int j = i + 1; j < n; ++j) s -= l(j, i) * x(j, c);
      x(i, c) = s / l(i, i);
    }
  }

  Matrix residual = matmul(a, x);
  residual.map() -= b.map();
  return {std::move(x), frobenius_norm(residual)};
}

// Compares an analytic (reverse-mode) gradient against central finite
// differences, coordinate by coordinate. Relative error uses the
// analytic magnitude as denominator; coordinates with |g_i| <= 1e-8
// fall back to absolute error.
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> x, const std::vector<double>& analytic_grad,
                         double h) {
  PME_CHECK(h > 0.0 && h <= 1e-2, "grad_check: h must be in (0, 1e-2]");
  PME_CHECK(x.size() == analytic_grad.size(), "grad_check: size mismatch");
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    const double fd = (fp - fm) / (2.0 * h);
    const double g = analytic_grad[i];
    const double err = std::abs(g - fd);
    worst = std::max(worst, std::abs(g) > 1e-8 ? err / std::abs(g) : err);
  }
  return worst;
}

}  // namespace pme
