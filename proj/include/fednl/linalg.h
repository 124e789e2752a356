#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace fednl {

using DenseVector = std::vector<double>;

// Column-major FP64 matrix.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n, double scale = 1.0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[j * rows_ + i]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[j * rows_ + i]; }

  std::span<double> col(std::size_t j) { return {data_.data() + j * rows_, rows_}; }
  std::span<const double> col(std::size_t j) const {
    return {data_.data() + j * rows_, rows_};
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void fill(double v);

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Column-wise packing of the upper triangle {(i,j): i <= j < d}:
// (0,0),(0,1),(1,1),(0,2),(1,2),(2,2),...
constexpr std::size_t packed_size(std::size_t d) { return d * (d + 1) / 2; }

std::size_t upper_tri_index(std::size_t i, std::size_t j, std::size_t d);
std::pair<std::size_t, std::size_t> upper_tri_unpack(std::size_t t, std::size_t d);

// Reads the upper triangle of a square matrix in packed order.
DenseVector pack_upper(const DenseMatrix& m);
DenseMatrix unpack_symmetric(std::span<const double> packed, std::size_t d);

DenseVector matvec(const DenseMatrix& a, std::span<const double> x);
// A^T x without forming the transpose.
DenseVector matvec_transposed(const DenseMatrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
// y += c * x
void axpy(double c, std::span<const double> x, std::span<double> y);

// M[i,j] += c * v[i] * v[j] for i <= j; strictly lower part untouched.
void rank1_accumulate_upper(DenseMatrix& m, std::span<const double> v, double c);
void symmetrize_from_upper(DenseMatrix& m);
// Reads only the upper triangle.
double frobenius_norm_symmetric(const DenseMatrix& m);
void add_to_diagonal(DenseMatrix& m, double c);

// Lower-triangular L with L L^T = A. Reads the upper triangle of A.
// Throws NotPositiveDefinite with the failing pivot index.
DenseMatrix cholesky_factor(const DenseMatrix& a);
DenseVector cholesky_substitute(const DenseMatrix& lower, std::span<const double> b);
DenseVector cholesky_solve(const DenseMatrix& a, std::span<const double> b);

struct SymmetricEigen {
  DenseVector values;  // unsorted, matches columns of vectors
  DenseMatrix vectors;
  int sweeps = 0;
};

inline constexpr int kJacobiMaxSweeps = 30;
inline constexpr double kJacobiRelTol = 1e-12;

// Cyclic Jacobi. Converged when the off-diagonal Frobenius mass drops below
// kJacobiRelTol * ||A||_F; throws NumericalError after kJacobiMaxSweeps.
SymmetricEigen jacobi_eigen(const DenseMatrix& a);

// Q diag(max(lambda_i, mu)) Q^T.
DenseMatrix eigen_clamp_min(const DenseMatrix& h, double mu);

}  // namespace fednl
