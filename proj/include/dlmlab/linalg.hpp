#pragma once

// Dense row-major double matrices and the handful of factorizations the
// rank and curvature diagnostics need.
//
// Kronecker ordering is fixed library-wide: in a (x) b the FIRST factor
// varies slowest, result[i*q + j] = a[i]*b[j]. Gradient rows and the
// row-major flattening of weight matrices both rely on it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/errors.hpp"

namespace dlmlab {

class Matrix {
 public:
  /// Empty placeholder; every computed matrix has positive dimensions.
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(checked_size(rows, cols), fill) {
    if (!std::isfinite(fill)) throw NonFiniteError("Matrix: non-finite fill value");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != checked_size(rows, cols)) {
      throw DimensionError("Matrix: " + std::to_string(data_.size()) + " entries for shape " +
                           shape_string(rows, cols));
    }
    ensure_finite();
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix column_vector(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }

  static Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  /// Re-establishes the finite-entries invariant after in-place writes.
  void ensure_finite() const {
    for (std::size_t k = 0; k < data_.size(); ++k) {
      if (!std::isfinite(data_[k])) {
        throw NonFiniteError("Matrix " + shape() + ": non-finite entry at (" +
                             std::to_string(k / std::max<std::size_t>(cols_, 1)) + "," +
                             std::to_string(k % std::max<std::size_t>(cols_, 1)) + ")");
      }
    }
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  static std::size_t checked_size(std::size_t r, std::size_t c) {
    if (r == 0 || c == 0) throw DimensionError("Matrix: dimensions must be positive, got " +
                                               shape_string(r, c));
    return r * c;
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + a.shape() + " * " + b.shape() + ")");
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  c.ensure_finite();
  return c;
}

/// a^T * b without forming the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: row counts differ (" + a.shape() + "^T * " + b.shape() + ")");
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* arow = a.row(k).data();
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  c.ensure_finite();
  return c;
}

/// a * b^T without forming the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: column counts differ (" + a.shape() + " * " + b.shape() +
                         "^T)");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  c.ensure_finite();
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("hadamard: shapes differ (" + a.shape() + " vs " + b.shape() + ")");
  }
  Matrix c(a.rows(), a.cols());
  auto ad = a.data();
  auto bd = b.data();
  auto cd = c.data();
  for (std::size_t k = 0; k < cd.size(); ++k) cd[k] = ad[k] * bd[k];
  c.ensure_finite();
  return c;
}

inline std::vector<double> kronecker(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i * b.size() + j] = a[i] * b[j];
  return out;
}

/// Column-wise Kronecker product: column n is kronecker(B[:,n], C[:,n]).
inline Matrix khatri_rao(const Matrix& b, const Matrix& c) {
  if (b.cols() != c.cols()) {
    throw DimensionError("khatri_rao: column counts differ (" + b.shape() + " vs " + c.shape() +
                         ")");
  }
  Matrix out(b.rows() * c.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < b.rows(); ++i) {
    for (std::size_t j = 0; j < c.rows(); ++j) {
      double* orow = out.row(i * c.rows() + j).data();
      const double* brow = b.row(i).data();
      const double* crow = c.row(j).data();
      for (std::size_t col = 0; col < n; ++col) orow[col] = brow[col] * crow[col];
    }
  }
  out.ensure_finite();
  return out;
}

/// Stacks matrices with equal column counts on top of each other.
inline Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) throw DimensionError("vstack: no blocks");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) {
      throw DimensionError("vstack: column counts differ (" + parts.front().shape() + " vs " +
                           p.shape() + ")");
    }
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * parts.front().cols());
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Matrix(rows, parts.front().cols(), std::move(data));
}

inline Matrix select_columns(const Matrix& m, std::span<const std::size_t> cols) {
  Matrix out(m.rows(), cols.size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t k = 0; k < cols.size(); ++k) {
      if (cols[k] >= m.cols()) throw DimensionError("select_columns: index out of range");
      out(i, k) = m(i, cols[k]);
    }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) {
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x / scale) * (x / scale);
  return scale * std::sqrt(s);
}

inline double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

inline double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double x : m.data()) best = std::max(best, std::abs(x));
  return best;
}

inline double trace(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("trace: matrix is " + m.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, i);
  return s;
}

inline constexpr int kMaxJacobiSweeps = 100;

/// Singular values in descending order, via one-sided (Hestenes) Jacobi on
/// the orientation with fewer columns. Throws ConvergenceError after
/// kMaxJacobiSweeps sweeps.
inline std::vector<double> singular_values(const Matrix& m) {
  const bool transpose = m.cols() > m.rows();
  const std::size_t len = transpose ? m.cols() : m.rows();
  const std::size_t ncols = transpose ? m.rows() : m.cols();

  // Column-contiguous working copy.
  std::vector<double> work(len * ncols);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (transpose)
        work[i * len + j] = m(i, j);
      else
        work[j * len + i] = m(i, j);
    }
  auto col = [&](std::size_t k) { return work.data() + k * len; };

  // Pre-scale so squared norms cannot overflow or underflow.
  const double scale = max_abs(m);
  if (scale == 0.0) return std::vector<double>(ncols, 0.0);
  for (double& x : work) x /= scale;

  constexpr double tol = 8.0 * std::numeric_limits<double>::epsilon();
  bool converged = ncols < 2;
  for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < ncols; ++p) {
      for (std::size_t q = p + 1; q < ncols; ++q) {
        double* cp = col(p);
        double* cq = col(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < len; ++i) {
          const double x = cp[i];
          const double y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw ConvergenceError("singular_values: no convergence after " +
                           std::to_string(kMaxJacobiSweeps) + " sweeps on " + m.shape());
  }

  std::vector<double> sv(ncols);
  for (std::size_t k = 0; k < ncols; ++k) sv[k] = scale * norm2({col(k), len});
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

inline constexpr double kDefaultRankTol = 1e-8;

/// Number of singular values above rel_tol * sigma_max.
inline std::size_t rank_from_singular_values(std::span<const double> sv, double rel_tol) {
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = rel_tol * sv.front();
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [cut](double s) { return s > cut; }));
}

inline std::size_t numerical_rank(const Matrix& m, double rel_tol = kDefaultRankTol) {
  if (!(rel_tol > 0.0)) throw PreconditionError("numerical_rank: rel_tol must be positive");
  return rank_from_singular_values(singular_values(m), rel_tol);
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
/// The input is symmetrized as (H + H^T)/2 after checking
/// max|H - H^T| <= symmetry_tol * max|H|.
inline std::vector<double> sym_eigenvalues(const Matrix& h, double symmetry_tol = 1e-10) {
  if (h.rows() != h.cols()) throw DimensionError("sym_eigenvalues: matrix is " + h.shape());
  const std::size_t n = h.rows();
  const double scale = max_abs(h);
  double defect = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) defect = std::max(defect, std::abs(h(i, j) - h(j, i)));
  if (defect > symmetry_tol * scale) {
    std::ostringstream msg;
    msg << "sym_eigenvalues: asymmetry " << defect << " exceeds " << symmetry_tol << " * "
        << scale;
    throw PreconditionError(msg.str());
  }
  if (scale == 0.0) return std::vector<double>(n, 0.0);

  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (h(i, j) + h(j, i)) / scale;

  auto off_norm_sq = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return s;
  };
  const double total = std::inner_product(a.data().begin(), a.data().end(), a.data().begin(), 0.0);
  const double eps_n = static_cast<double>(n) * std::numeric_limits<double>::epsilon();
  const double stop = eps_n * eps_n * total;

  bool converged = n < 2 || off_norm_sq() <= stop;
  for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
    converged = off_norm_sq() <= stop;
  }
  if (!converged) {
    throw ConvergenceError("sym_eigenvalues: no convergence after " +
                           std::to_string(kMaxJacobiSweeps) + " sweeps on " + h.shape());
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = scale * a(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

}  // namespace dlmlab
