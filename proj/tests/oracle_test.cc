#include "fednl/oracle.h"

#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "test_support.h"

namespace fednl {
namespace {

struct Evaluated {
  double f;
  DenseVector g;
  DenseMatrix h;
};

Evaluated evaluate(const ClientShard& s, const DenseVector& x) {
  OracleScratch scratch;
  refresh_scratch(s, x, scratch);
  Evaluated e{f_value(s, x, scratch), DenseVector(s.dim()), DenseMatrix(s.dim(), s.dim())};
  gradient(s, x, scratch, e.g);
  hessian(s, x, scratch, e.h);
  return e;
}

TEST(Oracle, ClosedFormsAtOrigin) {
  Prg prg(1);
  for (int rep = 0; rep < 5; ++rep) {
    const auto shard = testing::random_shard(7, 13, prg, 0.01);
    const std::size_t d = shard->dim();
    const double n_i = static_cast<double>(shard->samples());
    const DenseVector x(d, 0.0);
    const Evaluated e = evaluate(*shard, x);
    EXPECT_NEAR(e.f, std::log(2.0), 1e-14);
    const DenseMatrix& b = shard->design();
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < b.cols(); ++j) s += b(i, j);
      EXPECT_NEAR(e.g[i], -s / (2.0 * n_i), 1e-14);
      for (std::size_t k = 0; k < d; ++k) {
        double bb = 0.0;
        for (std::size_t j = 0; j < b.cols(); ++j) bb += b(i, j) * b(k, j);
        EXPECT_NEAR(e.h(i, k), bb / (4.0 * n_i) + (i == k ? 0.01 : 0.0), 1e-14);
      }
    }
  }
}

TEST(Oracle, MatchesTextbookFormulas) {
  Prg prg(2);
  const auto shard = testing::random_shard(9, 40, prg);
  const DenseVector x = testing::random_vector(9, prg, 2.0);
  const Evaluated e = evaluate(*shard, x);
  EXPECT_NEAR(e.f, testing::naive_f(*shard, x), 1e-13);
  const DenseVector g = testing::naive_grad(*shard, x);
  const DenseMatrix h = testing::naive_hessian(*shard, x);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(e.g[i], g[i], 1e-14);
    for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(e.h(i, k), h(i, k), 1e-14);
  }
}

TEST(Oracle, HessianIsSymmetric) {
  Prg prg(3);
  const auto shard = testing::random_shard(11, 25, prg);
  const Evaluated e = evaluate(*shard, testing::random_vector(11, prg));
  for (std::size_t i = 0; i < 11; ++i) {
    for (std::size_t k = 0; k < 11; ++k) EXPECT_EQ(e.h(i, k), e.h(k, i));
  }
}

TEST(Oracle, FiniteDifferencesAgreeOnRandomShards) {
  Prg prg(4);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t d = 2 + prg.uniform_below(29);
    const auto shard = testing::random_shard(d, 5 + prg.uniform_below(60), prg);
    const FiniteDiffReport r = finite_diff_check(*shard, testing::random_vector(d, prg), 1e-5);
    EXPECT_FALSE(r.grad_nan);
    EXPECT_FALSE(r.hessian_nan);
    EXPECT_LE(r.grad_max_rel_error, 1e-6);
    EXPECT_LE(r.hessian_max_rel_error, 1e-5);
  }
}

TEST(Oracle, LargeMarginsStayFinite) {
  DenseMatrix b(1, 2);
  b(0, 0) = 1.0;
  b(0, 1) = -1.0;
  const ClientShard shard(std::move(b), 0.0);
  for (double t : {800.0, -800.0, 1e6}) {
    const DenseVector x{t};
    const Evaluated e = evaluate(shard, x);
    EXPECT_TRUE(std::isfinite(e.f));
    EXPECT_TRUE(std::isfinite(e.g[0]));
    EXPECT_TRUE(std::isfinite(e.h(0, 0)));
    // One sample has margin |t|, the other -|t|: f = (|t| + ~0) / 2.
    EXPECT_NEAR(e.f, std::abs(t) / 2.0, 1e-9 * std::abs(t));
  }
  EXPECT_NEAR(log1p_exp_neg(40.0), std::exp(-40.0), 1e-30);
  EXPECT_DOUBLE_EQ(log1p_exp_neg(-1000.0), 1000.0);
}

TEST(Oracle, StaleScratchIsRejected) {
  Prg prg(5);
  const auto shard = testing::random_shard(4, 6, prg);
  OracleScratch scratch;
  DenseVector x(4, 0.0);
  DenseVector g(4);
  EXPECT_THROW(f_value(*shard, x, scratch), std::logic_error);
  refresh_scratch(*shard, x, scratch);
  x[0] = 1.0;
  EXPECT_THROW(gradient(*shard, x, scratch, g), std::logic_error);
}

TEST(Oracle, ShardValidation) {
  EXPECT_THROW(ClientShard(DenseMatrix(3, 0), 1e-3), std::invalid_argument);
  EXPECT_THROW(ClientShard(DenseMatrix(3, 2), -1.0), std::invalid_argument);
}

}  // namespace
}  // namespace fednl
