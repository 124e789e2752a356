#include "fednl/linalg.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fednl/errors.h"

namespace fednl {

namespace {

void require_square(const DenseMatrix& m, const char* op) {
  if (!m.square()) {
    throw std::invalid_argument(std::string(op) + ": matrix is not square");
  }
}

}  // namespace

DenseMatrix DenseMatrix::identity(std::size_t n, double scale) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = scale;
  return m;
}

void DenseMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::size_t upper_tri_index(std::size_t i, std::size_t j, std::size_t d) {
  if (i > j || j >= d) {
    throw std::out_of_range("upper_tri_index: need i <= j < d");
  }
  return j * (j + 1) / 2 + i;
}

std::pair<std::size_t, std::size_t> upper_tri_unpack(std::size_t t, std::size_t d) {
  if (t >= packed_size(d)) {
    throw std::out_of_range("upper_tri_unpack: packed index out of range");
  }
  auto j = static_cast<std::size_t>(
      (std::sqrt(8.0 * static_cast<double>(t) + 1.0) - 1.0) / 2.0);
  // Correct the floating-point estimate.
  while (j * (j + 1) / 2 > t) --j;
  while ((j + 1) * (j + 2) / 2 <= t) ++j;
  return {t - j * (j + 1) / 2, j};
}

DenseVector pack_upper(const DenseMatrix& m) {
  require_square(m, "pack_upper");
  const std::size_t d = m.rows();
  DenseVector out;
  out.reserve(packed_size(d));
  for (std::size_t j = 0; j < d; ++j) {
    auto c = m.col(j);
    out.insert(out.end(), c.begin(), c.begin() + static_cast<std::ptrdiff_t>(j + 1));
  }
  return out;
}

DenseMatrix unpack_symmetric(std::span<const double> packed, std::size_t d) {
  if (packed.size() != packed_size(d)) {
    throw std::invalid_argument("unpack_symmetric: packed length mismatch");
  }
  DenseMatrix m(d, d);
  std::size_t t = 0;
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i <= j; ++i, ++t) {
      m(i, j) = packed[t];
      m(j, i) = packed[t];
    }
  }
  return m;
}

DenseVector matvec(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.cols()) throw std::invalid_argument("matvec: dimension mismatch");
  DenseVector y(a.rows(), 0.0);
  for (std::size_t j = 0; j < a.cols(); ++j) axpy(x[j], a.col(j), y);
  return y;
}

DenseVector matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.rows()) {
    throw std::invalid_argument("matvec_transposed: dimension mismatch");
  }
  DenseVector y(a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) y[j] = dot(a.col(j), x);
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double c, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

void rank1_accumulate_upper(DenseMatrix& m, std::span<const double> v, double c) {
  require_square(m, "rank1_accumulate_upper");
  if (v.size() != m.rows()) {
    throw std::invalid_argument("rank1_accumulate_upper: dimension mismatch");
  }
  if (c == 0.0) return;
  const std::size_t d = v.size();
  for (std::size_t j = 0; j < d; ++j) {
    const double s = c * v[j];
    if (s == 0.0) continue;
    double* colj = m.col(j).data();
    for (std::size_t i = 0; i <= j; ++i) colj[i] += s * v[i];
  }
}

void symmetrize_from_upper(DenseMatrix& m) {
  require_square(m, "symmetrize_from_upper");
  const std::size_t d = m.rows();
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < j; ++i) m(j, i) = m(i, j);
  }
}

double frobenius_norm_symmetric(const DenseMatrix& m) {
  require_square(m, "frobenius_norm_symmetric");
  const std::size_t d = m.rows();
  double diag = 0.0;
  double off = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    auto c = m.col(j);
    for (std::size_t i = 0; i < j; ++i) off += c[i] * c[i];
    diag += c[j] * c[j];
  }
  return std::sqrt(diag + 2.0 * off);
}

void add_to_diagonal(DenseMatrix& m, double c) {
  require_square(m, "add_to_diagonal");
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += c;
}

// Cholesky-Banachiewicz: L is built row by row, each row only needing the
// rows above it.
DenseMatrix cholesky_factor(const DenseMatrix& a) {
  require_square(a, "cholesky_factor");
  const std::size_t d = a.rows();
  // Row-major scratch so that row dot products are contiguous.
  std::vector<double> l(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double* li = l.data() + i * d;
    for (std::size_t j = 0; j <= i; ++j) {
      const double* lj = l.data() + j * d;
      double s = 0.0;
      for (std::size_t p = 0; p < j; ++p) s += li[p] * lj[p];
      // Upper triangle of A: A(j, i) with j <= i.
      const double aij = a(j, i);
      if (i == j) {
        const double pivot = aij - s;
        if (!(pivot > 0.0)) throw NotPositiveDefinite(i);
        li[i] = std::sqrt(pivot);
      } else {
        li[j] = (aij - s) / lj[j];
      }
    }
  }
  DenseMatrix out(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) out(i, j) = l[i * d + j];
  }
  return out;
}

DenseVector cholesky_substitute(const DenseMatrix& lower, std::span<const double> b) {
  require_square(lower, "cholesky_substitute");
  const std::size_t d = lower.rows();
  if (b.size() != d) throw std::invalid_argument("cholesky_substitute: dimension mismatch");

  // L y = b, walking columns of L so the inner update is contiguous.
  DenseVector y(b.begin(), b.end());
  for (std::size_t j = 0; j < d; ++j) {
    auto c = lower.col(j);
    y[j] /= c[j];
    const double yj = y[j];
    for (std::size_t i = j + 1; i < d; ++i) y[i] -= c[i] * yj;
  }
  // L^T x = y; column j of L is row j of L^T.
  DenseVector& x = y;
  for (std::size_t j = d; j-- > 0;) {
    auto c = lower.col(j);
    double s = x[j];
    for (std::size_t i = j + 1; i < d; ++i) s -= c[i] * x[i];
    x[j] = s / c[j];
  }
  return x;
}

DenseVector cholesky_solve(const DenseMatrix& a, std::span<const double> b) {
  if (b.size() != a.rows()) throw std::invalid_argument("cholesky_solve: dimension mismatch");
  return cholesky_substitute(cholesky_factor(a), b);
}

SymmetricEigen jacobi_eigen(const DenseMatrix& input) {
  require_square(input, "jacobi_eigen");
  const std::size_t d = input.rows();
  DenseMatrix a = input;
  symmetrize_from_upper(a);
  SymmetricEigen out{DenseVector(d), DenseMatrix::identity(d), 0};
  DenseMatrix& v = out.vectors;

  const double scale = frobenius_norm_symmetric(a);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < j; ++i) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
  };

  const double threshold = kJacobiRelTol * scale;
  while (scale > 0.0 && off_norm() > threshold) {
    if (out.sweeps == kJacobiMaxSweeps) {
      throw NumericalError("jacobi_eigen: no convergence after " +
                           std::to_string(kJacobiMaxSweeps) + " sweeps");
    }
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        // A <- J^T A J with J the (p,q) rotation.
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;

        auto vp = v.col(p);
        auto vq = v.col(q);
        for (std::size_t k = 0; k < d; ++k) {
          const double x = vp[k];
          const double y = vq[k];
          vp[k] = c * x - s * y;
          vq[k] = s * x + c * y;
        }
      }
    }
  }
  for (std::size_t i = 0; i < d; ++i) out.values[i] = a(i, i);
  return out;
}

DenseMatrix eigen_clamp_min(const DenseMatrix& h, double mu) {
  require_square(h, "eigen_clamp_min");
  if (!(mu > 0.0)) throw std::invalid_argument("eigen_clamp_min: mu must be positive");
  const std::size_t d = h.rows();
  const SymmetricEigen eig = jacobi_eigen(h);

  if (std::all_of(eig.values.begin(), eig.values.end(),
                  [mu](double l) { return l >= mu; })) {
    DenseMatrix out = h;
    symmetrize_from_upper(out);
    return out;
  }

  DenseMatrix out(d, d);
  for (std::size_t k = 0; k < d; ++k) {
    rank1_accumulate_upper(out, eig.vectors.col(k), std::max(eig.values[k], mu));
  }
  symmetrize_from_upper(out);
  return out;
}

}  // namespace fednl
