#include "test_support.h"

#include <cmath>
#include <future>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "fednl/compressors.h"
#include "fednl/data.h"

namespace fednl::testing {

DenseMatrix random_matrix(std::size_t rows, std::size_t cols, Prg& prg, double scale) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = scale * (2.0 * prg.uniform01() - 1.0);
  return m;
}

DenseMatrix random_symmetric(std::size_t d, Prg& prg) {
  DenseMatrix m(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i <= j; ++i) {
      const double v = 2.0 * prg.uniform01() - 1.0;
      m(i, j) = v;
      m(j, i) = v;
    }
  }
  return m;
}

DenseMatrix random_spd(std::size_t d, Prg& prg, double shift) {
  const DenseMatrix g = random_matrix(d, d, prg);
  DenseMatrix a(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      long double s = 0;
      for (std::size_t t = 0; t < d; ++t) s += static_cast<long double>(g(i, t)) * g(j, t);
      a(i, j) = static_cast<double>(s) / static_cast<double>(d);
    }
    a(j, j) += shift;
  }
  return a;
}

DenseVector random_vector(std::size_t n, Prg& prg, double scale) {
  DenseVector v(n);
  for (double& x : v) x = scale * (2.0 * prg.uniform01() - 1.0);
  return v;
}

std::shared_ptr<const ClientShard> random_shard(std::size_t d, std::size_t n_i, Prg& prg,
                                                double lambda) {
  DenseMatrix design(d, n_i);
  for (std::size_t j = 0; j < n_i; ++j) {
    const double b = prg.uniform01() < 0.5 ? -1.0 : 1.0;
    for (std::size_t i = 0; i + 1 < d; ++i) design(i, j) = b * (2.0 * prg.uniform01() - 1.0);
    design(d - 1, j) = b;
  }
  return std::make_shared<const ClientShard>(std::move(design), lambda);
}

std::vector<std::shared_ptr<const ClientShard>> random_shards(std::size_t n, std::size_t d,
                                                              std::size_t n_i, std::uint64_t seed,
                                                              double lambda) {
  Prg prg(seed);
  std::vector<std::shared_ptr<const ClientShard>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_shard(d, n_i, prg, lambda));
  return out;
}

std::size_t count_eigenvalues_below(const DenseMatrix& a, double t) {
  const std::size_t n = a.rows();
  // Symmetric elimination on the lower triangle; a zero pivot is nudged,
  // which only matters when t hits an eigenvalue exactly.
  std::vector<long double> m(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) m[i * n + j] = a(i, j) - (i == j ? t : 0.0);
  }
  std::size_t negative = 0;
  for (std::size_t k = 0; k < n; ++k) {
    long double p = m[k * n + k];
    if (p == 0) p = 1e-300L;
    if (p < 0) ++negative;
    for (std::size_t i = k + 1; i < n; ++i) {
      const long double f = m[i * n + k] / p;
      if (f == 0) continue;
      for (std::size_t j = k + 1; j <= i; ++j) m[i * n + j] -= f * m[j * n + k];
    }
  }
  return negative;
}

double kth_eigenvalue(const DenseMatrix& a, std::size_t k, double tol) {
  double bound = 0.0;
  for (double v : a.data()) bound += v * v;
  bound = std::sqrt(bound) + 1.0;
  double lo = -bound;
  double hi = bound;
  while (hi - lo > tol * std::max(1.0, std::abs(lo) + std::abs(hi))) {
    const double mid = 0.5 * (lo + hi);
    if (count_eigenvalues_below(a, mid) > k) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return 0.5 * (lo + hi);
}

DenseVector gauss_solve(const DenseMatrix& a, const DenseVector& b) {
  const std::size_t n = a.rows();
  std::vector<std::vector<long double>> m(n, std::vector<long double>(n + 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a(i, j);
    m[i][n] = b[i];
  }
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(m[i][k]) > std::abs(m[piv][k])) piv = i;
    }
    std::swap(m[k], m[piv]);
    if (m[k][k] == 0) throw std::runtime_error("gauss_solve: singular");
    for (std::size_t i = k + 1; i < n; ++i) {
      const long double f = m[i][k] / m[k][k];
      for (std::size_t j = k; j <= n; ++j) m[i][j] -= f * m[k][j];
    }
  }
  DenseVector x(n);
  for (std::size_t i = n; i-- > 0;) {
    long double s = m[i][n];
    for (std::size_t j = i + 1; j < n; ++j) s -= m[i][j] * x[j];
    x[i] = static_cast<double>(s / m[i][i]);
  }
  return x;
}

namespace {

long double sigmoid_l(long double t) { return 1.0L / (1.0L + std::exp(-t)); }

long double margin(const ClientShard& s, const DenseVector& x, std::size_t j) {
  long double m = 0;
  for (std::size_t i = 0; i < s.dim(); ++i) m += static_cast<long double>(s.design()(i, j)) * x[i];
  return m;
}

}  // namespace

double naive_f(const ClientShard& s, const DenseVector& x) {
  long double sum = 0;
  for (std::size_t j = 0; j < s.samples(); ++j) sum += std::log1p(std::exp(-margin(s, x, j)));
  long double xx = 0;
  for (double v : x) xx += static_cast<long double>(v) * v;
  return static_cast<double>(sum / s.samples() + 0.5L * s.lambda() * xx);
}

DenseVector naive_grad(const ClientShard& s, const DenseVector& x) {
  const std::size_t d = s.dim();
  std::vector<long double> g(d, 0);
  for (std::size_t j = 0; j < s.samples(); ++j) {
    const long double w = -sigmoid_l(-margin(s, x, j)) / s.samples();
    for (std::size_t i = 0; i < d; ++i) g[i] += w * s.design()(i, j);
  }
  DenseVector out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<double>(g[i] + s.lambda() * x[i]);
  return out;
}

DenseMatrix naive_hessian(const ClientShard& s, const DenseVector& x) {
  const std::size_t d = s.dim();
  std::vector<long double> h(d * d, 0);
  for (std::size_t j = 0; j < s.samples(); ++j) {
    const long double p = sigmoid_l(margin(s, x, j));
    const long double w = p * (1 - p) / s.samples();
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        h[a * d + b] += w * s.design()(a, j) * s.design()(b, j);
      }
    }
  }
  DenseMatrix out(d, d);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) {
      out(a, b) = static_cast<double>(h[a * d + b] + (a == b ? s.lambda() : 0.0));
    }
  }
  return out;
}

double frobenius_full(const DenseMatrix& m) {
  long double s = 0;
  for (double v : m.data()) s += static_cast<long double>(v) * v;
  return static_cast<double>(std::sqrt(s));
}

namespace {

DenseMatrix minus(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out = a;
  for (std::size_t t = 0; t < out.data().size(); ++t) out.data()[t] -= b.data()[t];
  return out;
}

// S as a full symmetric matrix.
DenseMatrix dense_delta(const CompressedDelta& delta, std::size_t d) {
  DenseMatrix s(d, d);
  const DenseVector packed = decompress(delta);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i <= j; ++i) {
      const double v = packed[j * (j + 1) / 2 + i];
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

void add_scaled(DenseMatrix& a, const DenseMatrix& b, double c) {
  for (std::size_t t = 0; t < a.data().size(); ++t) a.data()[t] += c * b.data()[t];
}

DenseVector mean_grad(const std::vector<std::shared_ptr<const ClientShard>>& shards,
                      const DenseVector& x) {
  DenseVector g(x.size(), 0.0);
  for (const auto& s : shards) {
    const DenseVector gi = naive_grad(*s, x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gi[i] / static_cast<double>(shards.size());
  }
  return g;
}

double norm(const DenseVector& v) {
  long double s = 0;
  for (double x : v) s += static_cast<long double>(x) * x;
  return static_cast<double>(std::sqrt(s));
}

DenseMatrix initial_h(const RunConfig& cfg) {
  DenseMatrix h(cfg.dim, cfg.dim);
  if (cfg.h_init == HessianInit::kLambdaIdentity) {
    for (std::size_t i = 0; i < cfg.dim; ++i) h(i, i) = cfg.lambda;
  }
  if (cfg.h_init == HessianInit::kExact) throw std::invalid_argument("reference: exact init");
  return h;
}

}  // namespace

std::vector<double> reference_fednl(const RunConfig& cfg,
                                    const std::vector<std::shared_ptr<const ClientShard>>& shards) {
  const std::size_t d = cfg.dim;
  const std::size_t n = shards.size();
  const double alpha = cfg.resolved_alpha();
  std::vector<DenseMatrix> h_local(n, initial_h(cfg));
  DenseMatrix h = initial_h(cfg);
  DenseVector x(d, 0.0);
  std::vector<double> norms;

  for (std::uint32_t k = 0; k < cfg.rounds; ++k) {
    DenseVector g(d, 0.0);
    double l = 0.0;
    DenseMatrix h_next = h;
    for (std::size_t i = 0; i < n; ++i) {
      const DenseMatrix hess = naive_hessian(*shards[i], x);
      const DenseVector gi = naive_grad(*shards[i], x);
      for (std::size_t t = 0; t < d; ++t) g[t] += gi[t] / static_cast<double>(n);
      const DenseMatrix diff = minus(hess, h_local[i]);
      l += frobenius_full(diff) / static_cast<double>(n);
      Prg prg(round_seed(cfg.run_seed, static_cast<std::uint32_t>(i), k));
      const CompressedDelta c = compress(diff, cfg.compressor, prg);
      const DenseMatrix s = dense_delta(c, d);
      add_scaled(h_local[i], s, alpha);
      add_scaled(h_next, s, alpha / static_cast<double>(n));
    }
    norms.push_back(norm(g));
    DenseMatrix a = h;
    for (std::size_t t = 0; t < d; ++t) a(t, t) += l;
    const DenseVector p = gauss_solve(a, g);
    for (std::size_t t = 0; t < d; ++t) x[t] -= p[t];
    h = h_next;
  }
  norms.push_back(norm(mean_grad(shards, x)));
  return norms;
}

std::vector<double> reference_fednl_pp(
    const RunConfig& cfg, const std::vector<std::shared_ptr<const ClientShard>>& shards) {
  const std::size_t d = cfg.dim;
  const std::size_t n = shards.size();
  const double alpha = cfg.resolved_alpha();
  std::vector<DenseMatrix> h_local(n, initial_h(cfg));
  std::vector<double> l_local(n);
  std::vector<DenseVector> g_local(n);
  std::vector<DenseVector> w(n, DenseVector(d, 0.0));

  auto local_g = [&](std::size_t i) {
    const DenseVector gi = naive_grad(*shards[i], w[i]);
    DenseVector out(d, 0.0);
    for (std::size_t a = 0; a < d; ++a) {
      long double s = 0;
      for (std::size_t b = 0; b < d; ++b) s += static_cast<long double>(h_local[i](a, b)) * w[i][b];
      out[a] = static_cast<double>(s + l_local[i] * w[i][a] - gi[a]);
    }
    return out;
  };
  for (std::size_t i = 0; i < n; ++i) {
    l_local[i] = frobenius_full(minus(h_local[i], naive_hessian(*shards[i], w[i])));
    g_local[i] = local_g(i);
  }

  DenseVector x(d, 0.0);
  std::vector<double> norms;
  for (std::uint32_t k = 0; k < cfg.rounds; ++k) {
    norms.push_back(norm(mean_grad(shards, x)));
    DenseMatrix a(d, d);
    DenseVector g(d, 0.0);
    double l = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      add_scaled(a, h_local[i], 1.0 / static_cast<double>(n));
      for (std::size_t t = 0; t < d; ++t) g[t] += g_local[i][t] / static_cast<double>(n);
      l += l_local[i] / static_cast<double>(n);
    }
    for (std::size_t t = 0; t < d; ++t) a(t, t) += l;
    x = gauss_solve(a, g);

    // Same subset rule as the master: partial Fisher-Yates, then sorted.
    Prg sel(round_seed(cfg.run_seed, kMasterStreamTag, k));
    std::vector<std::uint32_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0u);
    for (std::uint32_t t = 0; t < cfg.tau; ++t) {
      const auto j = t + static_cast<std::uint32_t>(sel.uniform_below(n - t));
      std::swap(ids[t], ids[j]);
    }
    ids.resize(cfg.tau);
    for (std::uint32_t i : ids) {
      w[i] = x;
      const DenseMatrix hess = naive_hessian(*shards[i], w[i]);
      Prg prg(round_seed(cfg.run_seed, i, k));
      const CompressedDelta c = compress(minus(hess, h_local[i]), cfg.compressor, prg);
      add_scaled(h_local[i], dense_delta(c, d), alpha);
      l_local[i] = frobenius_full(minus(h_local[i], hess));
      g_local[i] = local_g(i);
    }
  }
  norms.push_back(norm(mean_grad(shards, x)));
  return norms;
}

LoopbackRun run_loopback(const RunConfig& cfg,
                         const std::vector<std::shared_ptr<const ClientShard>>& shards) {
  std::promise<std::uint16_t> port_promise;
  auto port_future = port_promise.get_future();
  MasterOptions opts;
  opts.bind = {"127.0.0.1", "0"};
  opts.on_listening = [&](std::uint16_t port) { port_promise.set_value(port); };

  auto master = std::async(std::launch::async, [&] { return run_master(cfg, opts); });
  if (port_future.wait_for(std::chrono::seconds(30)) != std::future_status::ready) {
    throw std::runtime_error("master did not start listening");
  }
  const std::string port = std::to_string(port_future.get());

  std::vector<std::future<ClientReport>> clients;
  for (std::uint32_t id = 0; id < shards.size(); ++id) {
    clients.push_back(std::async(std::launch::async, [&, id] {
      return run_client(cfg, Endpoint{"127.0.0.1", port}, id, shards[id]);
    }));
  }
  LoopbackRun out;
  std::exception_ptr failure;
  for (auto& c : clients) {
    try {
      out.clients.push_back(c.get());
    } catch (...) {
      if (!failure) failure = std::current_exception();
    }
  }
  try {
    out.master = master.get();
  } catch (...) {
    failure = std::current_exception();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<std::shared_ptr<const ClientShard>> synthetic_shards(std::size_t d, std::size_t m,
                                                                 std::uint32_t n,
                                                                 std::uint64_t seed,
                                                                 double lambda) {
  return augment_and_shard(generate_synthetic(d - 1, m, seed), n, seed, lambda);
}

std::vector<double> grad_norms(const RunResult& r) {
  std::vector<double> out;
  for (const auto& row : r.rows) out.push_back(row.grad_norm);
  return out;
}

}  // namespace fednl::testing
