#include "fednl/algorithms.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fednl/errors.h"
#include "fednl/prg.h"

namespace fednl {

namespace {

constexpr std::array<std::string_view, 3> kAlgorithmNames = {"fednl", "fednl-ls", "fednl-pp"};

DenseMatrix difference(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t t = 0; t < o.size(); ++t) o[t] -= bd[t];
  return out;
}

void require_finite(std::span<const double> x, std::uint32_t round) {
  for (double v : x) {
    if (!std::isfinite(v)) {
      throw NumericalError("iterate diverged (non-finite x) at round " + std::to_string(round));
    }
  }
}

void check_round_updates(std::span<const ClientUpdate> updates, std::uint32_t n,
                         std::uint32_t round) {
  if (updates.size() != n) {
    throw ProtocolError("expected " + std::to_string(n) + " client updates, got " +
                        std::to_string(updates.size()));
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    if (updates[i].client_id != i) {
      throw ProtocolError("missing or duplicate update for client " + std::to_string(i));
    }
    if (updates[i].round != round) {
      throw ProtocolError("update from client " + std::to_string(i) + " is for round " +
                          std::to_string(updates[i].round) + ", expected " +
                          std::to_string(round));
    }
  }
}

// (1/n) * sum of the update gradients, summed in client order.
DenseVector mean_gradient(std::span<const ClientUpdate> updates, std::size_t d) {
  DenseVector sum(d, 0.0);
  for (const auto& u : updates) {
    if (u.grad.size() != d) throw ProtocolError("gradient has wrong dimension");
    axpy(1.0, u.grad, sum);
  }
  const double inv_n = 1.0 / static_cast<double>(updates.size());
  for (double& v : sum) v *= inv_n;
  return sum;
}

void apply_all_deltas(MasterState& master, std::span<const ClientUpdate> updates,
                      double alpha, std::size_t n) {
  const double scale = alpha / static_cast<double>(n);
  for (const auto& u : updates) apply_delta(master.h, u.delta, scale);
}

DenseVector newton_direction(const MasterState& master, const RunConfig& cfg,
                             StepOption option, std::span<const double> grad) {
  if (option == StepOption::kA) {
    return cholesky_solve(eigen_clamp_min(master.h, cfg.mu), grad);
  }
  DenseMatrix a = master.h;
  add_to_diagonal(a, master.l);
  return cholesky_solve(a, grad);
}

}  // namespace

std::string_view to_string(Algorithm a) { return kAlgorithmNames.at(static_cast<std::size_t>(a)); }

Algorithm algorithm_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kAlgorithmNames.size(); ++i) {
    if (kAlgorithmNames[i] == name) return static_cast<Algorithm>(i);
  }
  throw std::invalid_argument("unknown algorithm: " + std::string(name));
}

double default_alpha(const CompressorSpec& spec, std::size_t w) {
  switch (spec.kind) {
    case CompressorKind::kIdentity:
      return 1.0;
    case CompressorKind::kTopK:
    case CompressorKind::kTopLEK:
      return 1.0 - std::sqrt(1.0 - spec.delta(w));
    case CompressorKind::kRandK:
    case CompressorKind::kRandSeqK:
    case CompressorKind::kNatural:
      return 1.0 / (spec.omega(w) + 1.0);
  }
  return 1.0;
}

double RunConfig::resolved_alpha() const {
  return alpha ? *alpha : default_alpha(compressor, packed_length());
}

void RunConfig::validate() const {
  if (dim == 0) throw ConfigError("dimension must be positive");
  if (clients == 0) throw ConfigError("at least one client is required");
  try {
    compressor.validate(packed_length());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (alpha && !(*alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(ls_c > 0.0 && ls_c <= 0.5)) throw ConfigError("line search c must lie in (0, 0.5]");
  if (!(ls_gamma > 0.0 && ls_gamma < 1.0)) throw ConfigError("line search gamma must lie in (0, 1)");
  const bool needs_mu = option == StepOption::kA || algorithm == Algorithm::kFedNLLS;
  if (needs_mu && !(mu > 0.0)) throw ConfigError("mu must be positive");
  if (algorithm == Algorithm::kFedNLPP && (tau < 1 || tau > clients)) {
    throw ConfigError("tau must lie in [1, n] for fednl-pp");
  }
  if (!(grad_tol >= 0.0)) throw ConfigError("grad_tol must be >= 0");
}

ClientState make_client(std::uint32_t id, std::shared_ptr<const ClientShard> shard,
                        const RunConfig& cfg) {
  if (!shard) throw std::invalid_argument("make_client: null shard");
  const std::size_t d = shard->dim();
  if (d != cfg.dim) throw ConfigError("client shard dimension does not match the run");

  ClientState s;
  s.id = id;
  s.shard = std::move(shard);
  const DenseVector x0(d, 0.0);

  switch (cfg.h_init) {
    case HessianInit::kZero:
      s.h = DenseMatrix(d, d);
      break;
    case HessianInit::kLambdaIdentity:
      s.h = DenseMatrix::identity(d, s.shard->lambda());
      break;
    case HessianInit::kExact:
      s.h = DenseMatrix(d, d);
      refresh_scratch(*s.shard, x0, s.scratch);
      hessian(*s.shard, x0, s.scratch, s.h);
      break;
  }

  if (cfg.algorithm == Algorithm::kFedNLPP) {
    s.w = x0;
    refresh_scratch(*s.shard, s.w, s.scratch);
    DenseMatrix hess(d, d);
    hessian(*s.shard, s.w, s.scratch, hess);
    DenseVector grad(d);
    gradient(*s.shard, s.w, s.scratch, grad);
    s.l = frobenius_norm_symmetric(difference(s.h, hess));
    s.g = matvec(s.h, s.w);
    for (std::size_t i = 0; i < d; ++i) s.g[i] += s.l * s.w[i] - grad[i];
  }
  return s;
}

InitReport client_init_report(ClientState& state, const RunConfig& cfg) {
  InitReport r;
  r.client_id = state.id;
  if (cfg.h_init == HessianInit::kExact) r.h0 = compress_identity(pack_upper(state.h),
                                                                  PackedLayout::symmetric(cfg.dim));
  if (cfg.algorithm == Algorithm::kFedNLPP) {
    r.l0 = state.l;
    r.g0 = state.g;
  }
  return r;
}

ClientUpdate client_round_fednl(ClientState& state, std::span<const double> x,
                                const RunConfig& cfg, std::uint32_t round) {
  const ClientShard& shard = *state.shard;
  const std::size_t d = shard.dim();
  if (x.size() != d) throw std::invalid_argument("client_round_fednl: dimension mismatch");

  ClientUpdate u;
  u.client_id = state.id;
  u.round = round;

  refresh_scratch(shard, x, state.scratch);
  u.grad.resize(d);
  gradient(shard, x, state.scratch, u.grad);
  DenseMatrix hess(d, d);
  hessian(shard, x, state.scratch, hess);
  if (cfg.algorithm == Algorithm::kFedNLLS) u.f = f_value(shard, x, state.scratch);

  const DenseMatrix diff = difference(hess, state.h);
  u.l = frobenius_norm_symmetric(diff);
  Prg prg(round_seed(cfg.run_seed, state.id, round));
  u.delta = compress(diff, cfg.compressor, prg);
  apply_delta(state.h, u.delta, cfg.resolved_alpha());
  return u;
}

ClientUpdate client_round_pp(ClientState& state, std::span<const double> x,
                             const RunConfig& cfg, std::uint32_t round) {
  const ClientShard& shard = *state.shard;
  const std::size_t d = shard.dim();
  if (x.size() != d) throw std::invalid_argument("client_round_pp: dimension mismatch");

  ClientUpdate u;
  u.client_id = state.id;
  u.round = round;

  state.w.assign(x.begin(), x.end());
  refresh_scratch(shard, state.w, state.scratch);
  DenseVector grad(d);
  gradient(shard, state.w, state.scratch, grad);
  DenseMatrix hess(d, d);
  hessian(shard, state.w, state.scratch, hess);

  Prg prg(round_seed(cfg.run_seed, state.id, round));
  u.delta = compress(difference(hess, state.h), cfg.compressor, prg);
  apply_delta(state.h, u.delta, cfg.resolved_alpha());

  // Local Hessian error is measured after the shift.
  const double l_next = frobenius_norm_symmetric(difference(state.h, hess));
  DenseVector g_next = matvec(state.h, state.w);
  for (std::size_t i = 0; i < d; ++i) g_next[i] += l_next * state.w[i] - grad[i];

  u.dl = l_next - state.l;
  u.dg.resize(d);
  for (std::size_t i = 0; i < d; ++i) u.dg[i] = g_next[i] - state.g[i];
  state.l = l_next;
  state.g = std::move(g_next);
  return u;
}

double client_eval_f(ClientState& state, std::span<const double> x) {
  refresh_scratch(*state.shard, x, state.scratch);
  return f_value(*state.shard, x, state.scratch);
}

LocalMetrics client_metrics(ClientState& state, std::span<const double> x) {
  LocalMetrics m;
  refresh_scratch(*state.shard, x, state.scratch);
  m.f = f_value(*state.shard, x, state.scratch);
  m.grad.resize(x.size());
  gradient(*state.shard, x, state.scratch, m.grad);
  return m;
}

double mean_ordered(std::span<const double> values, std::size_t n) {
  double s = 0.0;
  for (double v : values) s += v;
  return s * (1.0 / static_cast<double>(n));
}

MasterState master_init(const RunConfig& cfg, std::span<const InitReport> reports) {
  const std::size_t d = cfg.dim;
  const std::uint32_t n = cfg.clients;
  if (reports.size() != n) throw ProtocolError("init: expected one report per client");
  for (std::uint32_t i = 0; i < n; ++i) {
    if (reports[i].client_id != i) throw ProtocolError("init: reports out of order");
  }

  MasterState m;
  m.x.assign(d, 0.0);
  switch (cfg.h_init) {
    case HessianInit::kZero:
      m.h = DenseMatrix(d, d);
      break;
    case HessianInit::kLambdaIdentity:
      m.h = DenseMatrix::identity(d, cfg.lambda);
      break;
    case HessianInit::kExact:
      m.h = DenseMatrix(d, d);
      for (const auto& r : reports) {
        if (!r.h0) throw ProtocolError("init: missing initial Hessian");
        apply_delta(m.h, *r.h0, 1.0 / static_cast<double>(n));
      }
      break;
  }

  if (cfg.algorithm == Algorithm::kFedNLPP) {
    std::vector<double> ls;
    m.g.assign(d, 0.0);
    for (const auto& r : reports) {
      if (r.g0.size() != d) throw ProtocolError("init: g0 has wrong dimension");
      ls.push_back(r.l0);
      axpy(1.0, r.g0, m.g);
    }
    m.l = mean_ordered(ls, n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (double& v : m.g) v *= inv_n;
  }
  return m;
}

RoundOutcome master_round_fednl(MasterState& master, std::span<const ClientUpdate> updates,
                                const RunConfig& cfg) {
  check_round_updates(updates, cfg.clients, master.round);
  const DenseVector grad = mean_gradient(updates, cfg.dim);
  std::vector<double> ls;
  ls.reserve(updates.size());
  for (const auto& u : updates) ls.push_back(u.l);
  master.l = mean_ordered(ls, cfg.clients);

  RoundOutcome out;
  out.grad_norm = norm2(grad);

  // The step uses H^k; the deltas of this round only move H^{k+1}.
  const DenseVector p = newton_direction(master, cfg, cfg.option, grad);
  for (std::size_t i = 0; i < p.size(); ++i) master.x[i] -= p[i];
  require_finite(master.x, master.round);

  apply_all_deltas(master, updates, cfg.resolved_alpha(), cfg.clients);
  ++master.round;
  return out;
}

LineSearchResult line_search_step(std::span<const double> x, std::span<const double> dir,
                                  double f_x, std::span<const double> grad, double c,
                                  double gamma, const GlobalObjective& f_eval) {
  const double slope = dot(grad, dir);
  // Decreases below the rounding noise of f cannot be resolved; without this
  // slack the search backtracks to a vanishing step near the optimum.
  const double noise = kLineSearchNoiseUlps * std::numeric_limits<double>::epsilon() * std::abs(f_x);
  DenseVector trial(x.size());
  double t = 1.0;
  double last_f = f_x;
  for (std::uint32_t s = 0; s <= kMaxLineSearchSteps; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) trial[i] = x[i] + t * dir[i];
    last_f = f_eval(trial);
    if (std::isfinite(last_f) && last_f <= f_x + c * t * slope + noise) return {s, trial};
    t *= gamma;
  }
  throw NumericalError("line search failed after " + std::to_string(kMaxLineSearchSteps) +
                       " halvings (f(x)=" + std::to_string(f_x) +
                       ", last trial f=" + std::to_string(last_f) +
                       ", slope=" + std::to_string(slope) + ")");
}

RoundOutcome master_round_ls(MasterState& master, std::span<const ClientUpdate> updates,
                             const RunConfig& cfg, const GlobalObjective& f_eval) {
  check_round_updates(updates, cfg.clients, master.round);
  const DenseVector grad = mean_gradient(updates, cfg.dim);
  std::vector<double> fs;
  fs.reserve(updates.size());
  for (const auto& u : updates) fs.push_back(u.f);
  const double f_x = mean_ordered(fs, cfg.clients);
  if (!std::isfinite(f_x)) {
    throw NumericalError("objective is not finite at round " + std::to_string(master.round));
  }

  RoundOutcome out;
  out.grad_norm = norm2(grad);
  out.f = f_x;

  DenseVector dir = newton_direction(master, cfg, StepOption::kA, grad);
  for (double& v : dir) v = -v;
  auto found = line_search_step(master.x, dir, f_x, grad, cfg.ls_c, cfg.ls_gamma, f_eval);
  out.ls_steps = found.steps;
  master.x = std::move(found.x);
  require_finite(master.x, master.round);

  apply_all_deltas(master, updates, cfg.resolved_alpha(), cfg.clients);
  ++master.round;
  return out;
}

DenseVector master_pp_step(const MasterState& master) {
  DenseMatrix a = master.h;
  add_to_diagonal(a, master.l);
  DenseVector x = cholesky_solve(a, master.g);
  require_finite(x, master.round);
  return x;
}

std::vector<std::uint32_t> pp_select(const RunConfig& cfg, std::uint32_t round) {
  const std::uint32_t n = cfg.clients;
  if (cfg.tau < 1 || cfg.tau > n) throw ConfigError("tau must lie in [1, n]");
  Prg prg(round_seed(cfg.run_seed, kMasterStreamTag, round));
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  for (std::uint32_t i = 0; i < cfg.tau; ++i) {
    const auto j = i + static_cast<std::uint32_t>(prg.uniform_below(n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(cfg.tau);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void master_pp_apply(MasterState& master, std::span<const std::uint32_t> subset,
                     std::span<const ClientUpdate> updates, const RunConfig& cfg) {
  if (subset.size() != cfg.tau || updates.size() != subset.size()) {
    throw ProtocolError("fednl-pp: participant count does not match tau");
  }
  const std::size_t d = cfg.dim;
  DenseVector dg(d, 0.0);
  std::vector<double> dls;
  for (std::size_t m = 0; m < subset.size(); ++m) {
    const auto& u = updates[m];
    if (u.client_id != subset[m] || u.round != master.round) {
      throw ProtocolError("fednl-pp: unexpected update from client " +
                          std::to_string(u.client_id));
    }
    if (u.dg.size() != d) throw ProtocolError("fednl-pp: dg has wrong dimension");
    axpy(1.0, u.dg, dg);
    dls.push_back(u.dl);
  }
  const double inv_n = 1.0 / static_cast<double>(cfg.clients);
  for (std::size_t i = 0; i < d; ++i) master.g[i] += inv_n * dg[i];
  apply_all_deltas(master, updates, cfg.resolved_alpha(), cfg.clients);
  master.l += mean_ordered(dls, cfg.clients);
  ++master.round;
}

}  // namespace fednl
