#include "fednl/oracle.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fednl {

namespace {

void require_fresh(const OracleScratch& scratch, std::span<const double> x,
                   std::size_t n) {
  if (scratch.generation == 0 || scratch.margins.size() != n ||
      !std::equal(x.begin(), x.end(), scratch.x.begin(), scratch.x.end())) {
    throw std::logic_error("oracle scratch is stale for this point");
  }
}

}  // namespace

ClientShard::ClientShard(DenseMatrix design, double lambda)
    : design_(std::move(design)), lambda_(lambda) {
  if (design_.rows() == 0 || design_.cols() == 0) {
    throw std::invalid_argument("ClientShard: empty design matrix");
  }
  if (!(lambda_ >= 0.0)) throw std::invalid_argument("ClientShard: lambda must be >= 0");
  for (double v : design_.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("ClientShard: non-finite sample");
  }
}

double log1p_exp_neg(double m) {
  return m >= 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
}

void refresh_scratch(const ClientShard& shard, std::span<const double> x,
                     OracleScratch& scratch) {
  if (x.size() != shard.dim()) throw std::invalid_argument("refresh_scratch: dimension mismatch");
  scratch.x.assign(x.begin(), x.end());
  scratch.margins = matvec_transposed(shard.design(), x);
  scratch.sigmoids.resize(scratch.margins.size());
  for (std::size_t j = 0; j < scratch.margins.size(); ++j) {
    const double m = scratch.margins[j];
    scratch.sigmoids[j] = 1.0 / (1.0 + std::exp(-m));
  }
  ++scratch.generation;
}

double f_value(const ClientShard& shard, std::span<const double> x,
               const OracleScratch& scratch) {
  require_fresh(scratch, x, shard.samples());
  double loss = 0.0;
  for (double m : scratch.margins) loss += log1p_exp_neg(m);
  const double n = static_cast<double>(shard.samples());
  return loss / n + 0.5 * shard.lambda() * dot(x, x);
}

// sigma(-m) = 1 / (1 + exp(m)), evaluated from the cached sigma(m) without
// cancellation when sigma(m) is close to 1.
static double complement(double m, double sig) {
  return m > 0.0 ? sig * std::exp(-m) : 1.0 - sig;
}

void gradient(const ClientShard& shard, std::span<const double> x,
              const OracleScratch& scratch, std::span<double> out) {
  require_fresh(scratch, x, shard.samples());
  if (out.size() != shard.dim()) throw std::invalid_argument("gradient: dimension mismatch");
  const double inv_n = 1.0 / static_cast<double>(shard.samples());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = shard.lambda() * x[i];
  const DenseMatrix& b = shard.design();
  for (std::size_t j = 0; j < shard.samples(); ++j) {
    const double v = -inv_n * complement(scratch.margins[j], scratch.sigmoids[j]);
    axpy(v, b.col(j), out);
  }
}

void hessian(const ClientShard& shard, std::span<const double> x,
             const OracleScratch& scratch, DenseMatrix& out) {
  require_fresh(scratch, x, shard.samples());
  const std::size_t d = shard.dim();
  if (out.rows() != d || out.cols() != d) {
    throw std::invalid_argument("hessian: dimension mismatch");
  }
  out.fill(0.0);
  const double inv_n = 1.0 / static_cast<double>(shard.samples());
  const DenseMatrix& b = shard.design();
  for (std::size_t j = 0; j < shard.samples(); ++j) {
    const double s = scratch.sigmoids[j];
    const double h = inv_n * s * complement(scratch.margins[j], s);
    rank1_accumulate_upper(out, b.col(j), h);
  }
  add_to_diagonal(out, shard.lambda());
  symmetrize_from_upper(out);
}

FiniteDiffReport finite_diff_check(const ClientShard& shard,
                                   std::span<const double> x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  const std::size_t d = shard.dim();
  OracleScratch scratch;
  FiniteDiffReport report;

  refresh_scratch(shard, x, scratch);
  DenseVector g(d);
  gradient(shard, x, scratch, g);
  DenseMatrix h(d, d);
  hessian(shard, x, scratch, h);

  DenseVector probe(x.begin(), x.end());
  DenseVector g_plus(d);
  DenseVector g_minus(d);
  for (std::size_t k = 0; k < d; ++k) {
    const double orig = probe[k];

    probe[k] = orig + step;
    refresh_scratch(shard, probe, scratch);
    const double f_plus = f_value(shard, probe, scratch);
    gradient(shard, probe, scratch, g_plus);

    probe[k] = orig - step;
    refresh_scratch(shard, probe, scratch);
    const double f_minus = f_value(shard, probe, scratch);
    gradient(shard, probe, scratch, g_minus);

    probe[k] = orig;

    const double g_num = (f_plus - f_minus) / (2.0 * step);
    const double g_err = std::abs(g[k] - g_num) / std::max(1.0, std::abs(g[k]));
    if (std::isnan(g_err)) report.grad_nan = true;
    else report.grad_max_rel_error = std::max(report.grad_max_rel_error, g_err);

    for (std::size_t i = 0; i < d; ++i) {
      const double h_num = (g_plus[i] - g_minus[i]) / (2.0 * step);
      const double h_err = std::abs(h(i, k) - h_num) / std::max(1.0, std::abs(h(i, k)));
      if (std::isnan(h_err)) report.hessian_nan = true;
      else report.hessian_max_rel_error = std::max(report.hessian_max_rel_error, h_err);
    }
  }
  return report;
}

}  // namespace fednl
