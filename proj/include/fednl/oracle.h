#pragma once

#include <cstddef>
#include <cstdint>

#include "fednl/linalg.h"

namespace fednl {

// One client's L2-regularised logistic-regression problem. Column j of
// `design` is b_j * a_j: labels are folded into the samples at load time.
class ClientShard {
 public:
  ClientShard(DenseMatrix design, double lambda);

  std::size_t dim() const { return design_.rows(); }
  std::size_t samples() const { return design_.cols(); }
  double lambda() const { return lambda_; }
  const DenseMatrix& design() const { return design_; }

 private:
  DenseMatrix design_;
  double lambda_;
};

// Margins and sigmoids shared by f, grad and Hessian at one point x.
struct OracleScratch {
  DenseVector x;
  DenseVector margins;
  DenseVector sigmoids;
  std::uint64_t generation = 0;
};

void refresh_scratch(const ClientShard& shard, std::span<const double> x,
                     OracleScratch& scratch);

// Each oracle checks that `scratch` was refreshed for exactly this x and
// throws std::logic_error otherwise.
double f_value(const ClientShard& shard, std::span<const double> x,
               const OracleScratch& scratch);
void gradient(const ClientShard& shard, std::span<const double> x,
              const OracleScratch& scratch, std::span<double> out);
void hessian(const ClientShard& shard, std::span<const double> x,
             const OracleScratch& scratch, DenseMatrix& out);

// log(1 + exp(-m)) without overflow.
double log1p_exp_neg(double m);

struct FiniteDiffReport {
  double grad_max_rel_error = 0.0;
  double hessian_max_rel_error = 0.0;
  bool grad_nan = false;
  bool hessian_nan = false;
};

// Central differences of f against the gradient oracle and of the gradient
// against the Hessian oracle. Relative error per entry is
// |analytic - numeric| / max(1, |analytic|).
FiniteDiffReport finite_diff_check(const ClientShard& shard,
                                   std::span<const double> x, double step);

}  // namespace fednl
