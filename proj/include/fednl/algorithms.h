#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fednl/compressors.h"
#include "fednl/linalg.h"
#include "fednl/oracle.h"

namespace fednl {

enum class Algorithm : std::uint8_t { kFedNL = 0, kFedNLLS = 1, kFedNLPP = 2 };
// Option A: x - [H]_mu^{-1} grad.  Option B: x - (H + l I)^{-1} grad.
enum class StepOption : std::uint8_t { kA = 0, kB = 1 };
enum class HessianInit : std::uint8_t { kZero = 0, kLambdaIdentity = 1, kExact = 2 };

std::string_view to_string(Algorithm a);
Algorithm algorithm_from_string(std::string_view name);

struct RunConfig {
  Algorithm algorithm = Algorithm::kFedNL;
  StepOption option = StepOption::kB;
  std::size_t dim = 0;      // d, including the intercept
  std::uint32_t clients = 0;  // n
  std::uint32_t rounds = 1000;
  CompressorSpec compressor;
  IndexMode index_mode = IndexMode::kReconstruct;
  std::optional<double> alpha;  // unset: default_alpha(compressor)
  double mu = 1e-3;
  double lambda = 1e-3;
  double ls_c = 0.49;
  double ls_gamma = 0.5;
  std::uint32_t tau = 0;  // FedNL-PP participants per round
  std::uint64_t run_seed = 0;
  HessianInit h_init = HessianInit::kLambdaIdentity;
  // Stop once ||grad f(x^k)|| <= grad_tol. Zero disables early stopping.
  double grad_tol = 0.0;

  std::size_t packed_length() const { return packed_size(dim); }
  double resolved_alpha() const;
  // Throws ConfigError.
  void validate() const;
};

// Contractive kinds: 1 - sqrt(1 - k/w). Unbiased kinds: 1 / (omega + 1).
// Identity: 1.
double default_alpha(const CompressorSpec& spec, std::size_t w);

struct ClientState {
  std::uint32_t id = 0;
  std::shared_ptr<const ClientShard> shard;
  DenseMatrix h;  // H_i^k
  OracleScratch scratch;
  // FedNL-PP only.
  DenseVector w;
  double l = 0.0;
  DenseVector g;
};

// What a client contributes before round 0: its initial Hessian estimate
// when the master cannot derive it from the config, and the FedNL-PP
// quantities l_i^0 and g_i^0.
struct InitReport {
  std::uint32_t client_id = 0;
  std::optional<CompressedDelta> h0;  // Identity delta, exact init only
  double l0 = 0.0;
  DenseVector g0;  // empty unless FedNL-PP
};

struct ClientUpdate {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  CompressedDelta delta;
  // FedNL / FedNL-LS
  DenseVector grad;
  double l = 0.0;
  double f = std::numeric_limits<double>::quiet_NaN();  // FedNL-LS only
  // FedNL-PP: l_i^{k+1} - l_i^k and g_i^{k+1} - g_i^k
  double dl = 0.0;
  DenseVector dg;
};

struct LocalMetrics {
  double f = 0.0;
  DenseVector grad;
};

ClientState make_client(std::uint32_t id, std::shared_ptr<const ClientShard> shard,
                        const RunConfig& cfg);
InitReport client_init_report(ClientState& state, const RunConfig& cfg);

ClientUpdate client_round_fednl(ClientState& state, std::span<const double> x,
                                const RunConfig& cfg, std::uint32_t round);
ClientUpdate client_round_pp(ClientState& state, std::span<const double> x,
                             const RunConfig& cfg, std::uint32_t round);
double client_eval_f(ClientState& state, std::span<const double> x);
LocalMetrics client_metrics(ClientState& state, std::span<const double> x);

struct MasterState {
  DenseVector x;
  DenseMatrix h;
  double l = 0.0;
  DenseVector g;  // FedNL-PP
  std::uint32_t round = 0;
};

MasterState master_init(const RunConfig& cfg, std::span<const InitReport> reports);

struct RoundOutcome {
  double grad_norm = 0.0;
  double f = std::numeric_limits<double>::quiet_NaN();
  std::uint32_t ls_steps = 0;
};

// Aggregates one update per client (sorted by client id), steps x with the
// pre-update H^k and l^k, then applies the Hessian deltas.
RoundOutcome master_round_fednl(MasterState& master, std::span<const ClientUpdate> updates,
                                const RunConfig& cfg);

using GlobalObjective = std::function<double(std::span<const double>)>;

RoundOutcome master_round_ls(MasterState& master, std::span<const ClientUpdate> updates,
                             const RunConfig& cfg, const GlobalObjective& f_eval);

struct LineSearchResult {
  std::uint32_t steps = 0;
  DenseVector x;
};

inline constexpr std::uint32_t kMaxLineSearchSteps = 60;
inline constexpr double kLineSearchNoiseUlps = 8.0;

// Smallest s >= 0 with f(x + gamma^s dir) <= f(x) + c gamma^s <grad, dir> + e,
// where e = kLineSearchNoiseUlps * eps * |f(x)| absorbs rounding in f.
// `dir` must be a descent direction. Throws NumericalError past
// kMaxLineSearchSteps.
LineSearchResult line_search_step(std::span<const double> x, std::span<const double> dir,
                                  double f_x, std::span<const double> grad, double c,
                                  double gamma, const GlobalObjective& f_eval);

// FedNL-PP server step x^{k+1} = (H^k + l^k I)^{-1} g^k.
DenseVector master_pp_step(const MasterState& master);
// tau client ids drawn without replacement from the master stream, ascending.
std::vector<std::uint32_t> pp_select(const RunConfig& cfg, std::uint32_t round);
void master_pp_apply(MasterState& master, std::span<const std::uint32_t> subset,
                     std::span<const ClientUpdate> updates, const RunConfig& cfg);

// sum_i v_i / n with the sum taken in the given (ascending client) order.
double mean_ordered(std::span<const double> values, std::size_t n);

}  // namespace fednl
