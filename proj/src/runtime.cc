#include "fednl/runtime.h"

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <exception>
#include <istream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "fednl/errors.h"
#include "fednl/wire.h"

namespace fednl {

namespace {

using Clock = std::chrono::steady_clock;

DenseVector mean_of(std::span<const LocalMetrics> ms, std::size_t d) {
  DenseVector sum(d, 0.0);
  for (const auto& m : ms) axpy(1.0, m.grad, sum);
  const double inv_n = 1.0 / static_cast<double>(ms.size());
  for (double& v : sum) v *= inv_n;
  return sum;
}

DenseVector mean_of(std::span<const ClientUpdate> us, std::size_t d) {
  DenseVector sum(d, 0.0);
  for (const auto& u : us) axpy(1.0, u.grad, sum);
  const double inv_n = 1.0 / static_cast<double>(us.size());
  for (double& v : sum) v *= inv_n;
  return sum;
}

double mean_f(std::span<const LocalMetrics> ms) {
  std::vector<double> fs;
  fs.reserve(ms.size());
  for (const auto& m : ms) fs.push_back(m.f);
  return mean_ordered(fs, ms.size());
}

// Rethrows the in-flight library error with the round number prepended.
[[noreturn]] void rethrow_with_round(std::uint32_t k) {
  const std::string where = "round " + std::to_string(k) + ": ";
  try {
    throw;
  } catch (const NumericalError& e) {
    throw NumericalError(where + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(where + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  }
}

std::string_view option_name(StepOption o) { return o == StepOption::kA ? "a" : "b"; }

std::string_view h_init_name(HessianInit h) {
  switch (h) {
    case HessianInit::kZero: return "zero";
    case HessianInit::kLambdaIdentity: return "lambda";
    case HessianInit::kExact: return "exact";
  }
  return "?";
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Protocol

RunResult run_protocol(const RunConfig& cfg, ClientFleet& fleet) {
  cfg.validate();
  const std::uint32_t n = cfg.clients;
  const std::size_t d = cfg.dim;

  MasterState master = master_init(cfg, fleet.init());
  const auto start = Clock::now();
  RunResult result;

  auto push_row = [&](std::uint32_t k, double grad_norm, double f, std::uint32_t ls) {
    const Traffic t = fleet.traffic();
    MetricsRow row;
    row.round = k;
    row.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    row.grad_norm = grad_norm;
    row.f_value = f;
    row.bytes_up_cum = t.up;
    row.bytes_down_cum = t.down;
    row.ls_steps = ls;
    result.rows.push_back(row);
  };
  auto converged = [&](double g) { return cfg.grad_tol > 0.0 && g <= cfg.grad_tol; };

  std::vector<std::uint32_t> everyone(n);
  std::iota(everyone.begin(), everyone.end(), 0u);

  for (std::uint32_t k = 0;; ++k) {
    try {
      if (cfg.algorithm == Algorithm::kFedNLPP) {
        const auto ms = fleet.metrics(k, master.x);
        const double g = norm2(mean_of(ms, d));
        if (k == cfg.rounds || converged(g)) {
          push_row(k, g, mean_f(ms), 0);
          break;
        }
        DenseVector x_next = master_pp_step(master);
        const auto subset = pp_select(cfg, k);
        const auto updates = fleet.round(k, x_next, subset);
        master_pp_apply(master, subset, updates, cfg);
        master.x = std::move(x_next);
        push_row(k, g, mean_f(ms), 0);
        continue;
      }

      if (k == cfg.rounds) {
        const auto ms = fleet.metrics(k, master.x);
        push_row(k, norm2(mean_of(ms, d)), mean_f(ms), 0);
        break;
      }
      double f = 0.0;
      if (cfg.algorithm == Algorithm::kFedNL) f = mean_f(fleet.metrics(k, master.x));
      const auto updates = fleet.round(k, master.x, everyone);
      if (updates.size() == n) {
        const double g = norm2(mean_of(updates, d));
        if (converged(g)) {
          if (cfg.algorithm == Algorithm::kFedNLLS) {
            std::vector<double> fs;
            for (const auto& u : updates) fs.push_back(u.f);
            f = mean_ordered(fs, n);
          }
          push_row(k, g, f, 0);
          break;
        }
      }
      RoundOutcome out;
      if (cfg.algorithm == Algorithm::kFedNLLS) {
        const GlobalObjective f_eval = [&](std::span<const double> x) {
          return mean_ordered(fleet.eval_f(k, x), n);
        };
        out = master_round_ls(master, updates, cfg, f_eval);
        f = out.f;
      } else {
        out = master_round_fednl(master, updates, cfg);
      }
      push_row(k, out.grad_norm, f, out.ls_steps);
    } catch (const Error&) {
      rethrow_with_round(k);
    }
  }

  fleet.shutdown(master.x);
  result.x = master.x;
  return result;
}

std::uint64_t round_begin_frame_bytes(const RunConfig& cfg) {
  return kFrameHeaderBytes + 8 * cfg.dim;
}

std::uint64_t update_frame_bytes(const RunConfig& cfg, const CompressedDelta& delta) {
  return kFrameHeaderBytes + update_payload_bytes(cfg, wire_size_bytes(delta, cfg.index_mode));
}

std::uint64_t eval_request_frame_bytes(const RunConfig& cfg) {
  return kFrameHeaderBytes + 8 * cfg.dim;
}

std::uint64_t eval_response_frame_bytes() { return kFrameHeaderBytes + 8; }

// ---------------------------------------------------------------------------
// Worker pool

struct WorkerPool::Shared {
  std::mutex mu;
  std::condition_variable start_cv;
  std::condition_variable done_cv;
  const std::function<void(unsigned)>* task = nullptr;
  std::uint64_t generation = 0;
  unsigned pending = 0;
  bool stop = false;
  std::vector<std::exception_ptr> errors;
  std::vector<std::thread> threads;
};

WorkerPool::WorkerPool(unsigned workers)
    : workers_(std::max(1u, workers)), shared_(std::make_unique<Shared>()) {
  shared_->errors.resize(workers_);
  // Worker 0 is the calling thread.
  for (unsigned w = 1; w < workers_; ++w) {
    shared_->threads.emplace_back([s = shared_.get(), w] {
      std::uint64_t seen = 0;
      for (;;) {
        std::unique_lock lock(s->mu);
        s->start_cv.wait(lock, [&] { return s->stop || s->generation != seen; });
        if (s->stop) return;
        seen = s->generation;
        const auto* task = s->task;
        lock.unlock();
        try {
          (*task)(w);
        } catch (...) {
          s->errors[w] = std::current_exception();
        }
        lock.lock();
        if (--s->pending == 0) s->done_cv.notify_one();
      }
    });
  }
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(shared_->mu);
    shared_->stop = true;
  }
  shared_->start_cv.notify_all();
  for (auto& t : shared_->threads) t.join();
}

void WorkerPool::run(const std::function<void(unsigned)>& task) {
  auto& s = *shared_;
  {
    std::lock_guard lock(s.mu);
    s.task = &task;
    std::fill(s.errors.begin(), s.errors.end(), nullptr);
    s.pending = workers_ - 1;
    ++s.generation;
  }
  s.start_cv.notify_all();
  try {
    task(0);
  } catch (...) {
    s.errors[0] = std::current_exception();
  }
  {
    std::unique_lock lock(s.mu);
    s.done_cv.wait(lock, [&] { return s.pending == 0; });
    s.task = nullptr;
  }
  for (const auto& e : s.errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Simulator

SimulatedFleet::SimulatedFleet(const RunConfig& cfg,
                               std::vector<std::shared_ptr<const ClientShard>> shards,
                               unsigned workers)
    : cfg_(cfg), pool_(std::min<unsigned>(std::max(1u, workers), std::max(1u, cfg.clients))) {
  if (shards.size() != cfg.clients) {
    throw ConfigError("simulator: " + std::to_string(shards.size()) + " shards for " +
                      std::to_string(cfg.clients) + " clients");
  }
  clients_.resize(cfg.clients);
  all_ids_.resize(cfg.clients);
  std::iota(all_ids_.begin(), all_ids_.end(), 0u);
  for_clients(all_ids_, [&](std::size_t, std::uint32_t id) {
    clients_[id] = make_client(id, shards[id], cfg_);
  });
}

template <typename Fn>
void SimulatedFleet::for_clients(std::span<const std::uint32_t> ids, Fn&& fn) {
  const unsigned workers = pool_.size();
  pool_.run([&](unsigned w) {
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      if (ids[pos] % workers == w) fn(pos, ids[pos]);
    }
  });
}

std::vector<InitReport> SimulatedFleet::init() {
  std::vector<InitReport> out(clients_.size());
  for_clients(all_ids_, [&](std::size_t pos, std::uint32_t id) {
    out[pos] = client_init_report(clients_[id], cfg_);
  });
  return out;
}

std::vector<ClientUpdate> SimulatedFleet::round(std::uint32_t k, std::span<const double> x,
                                                std::span<const std::uint32_t> participants) {
  std::vector<ClientUpdate> out(participants.size());
  const bool pp = cfg_.algorithm == Algorithm::kFedNLPP;
  for_clients(participants, [&](std::size_t pos, std::uint32_t id) {
    out[pos] = pp ? client_round_pp(clients_[id], x, cfg_, k)
                  : client_round_fednl(clients_[id], x, cfg_, k);
  });
  for (const auto& u : out) {
    traffic_.down += round_begin_frame_bytes(cfg_);
    traffic_.up += update_frame_bytes(cfg_, u.delta);
  }
  return out;
}

std::vector<double> SimulatedFleet::eval_f(std::uint32_t, std::span<const double> x) {
  std::vector<double> out(clients_.size());
  for_clients(all_ids_, [&](std::size_t pos, std::uint32_t id) {
    out[pos] = client_eval_f(clients_[id], x);
  });
  traffic_.down += clients_.size() * eval_request_frame_bytes(cfg_);
  traffic_.up += clients_.size() * eval_response_frame_bytes();
  return out;
}

std::vector<LocalMetrics> SimulatedFleet::metrics(std::uint32_t, std::span<const double> x) {
  std::vector<LocalMetrics> out(clients_.size());
  for_clients(all_ids_, [&](std::size_t pos, std::uint32_t id) {
    out[pos] = client_metrics(clients_[id], x);
  });
  return out;
}

void SimulatedFleet::shutdown(std::span<const double>) {}

RunResult simulate(const RunConfig& cfg, std::vector<std::shared_ptr<const ClientShard>> shards,
                   unsigned workers) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  SimulatedFleet fleet(cfg, std::move(shards), workers);
  return run_protocol(cfg, fleet);
}

// ---------------------------------------------------------------------------
// Distributed master

NetworkFleet::NetworkFleet(const RunConfig& cfg, const MasterOptions& opts) : cfg_(cfg) {
  cfg_.validate();
  Listener listener(opts.bind);
  if (opts.on_listening) opts.on_listening(listener.port());
  accept_all(listener, opts.timeout);
}

void NetworkFleet::accept_all(Listener& listener, std::chrono::milliseconds timeout) {
  const std::uint32_t n = cfg_.clients;
  const std::uint64_t expected_hash = config_hash(cfg_);
  const bool needs_reconstruct =
      is_rand_family(cfg_.compressor.kind) && cfg_.index_mode == IndexMode::kReconstruct;
  sessions_.resize(n);

  const auto deadline = Clock::now() + timeout;
  std::uint32_t joined = 0;
  while (joined < n) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) {
      throw ProtocolError("timed out with " + std::to_string(joined) + " of " +
                          std::to_string(n) + " clients connected");
    }
    Connection conn = listener.accept(left);
    Frame hello;
    Hello h;
    try {
      hello = conn.recv();
      if (hello.type != MsgType::kHello) throw ProtocolError("expected HELLO");
      h = decode_hello(hello.payload);
    } catch (const ProtocolError&) {
      continue;  // not one of ours; drop it
    }
    const std::uint32_t id = hello.client_id;
    auto reject = [&](RejectCode code, const std::string& why) {
      conn.send({MsgType::kReject, id, 0, encode_reject({code, why})});
      return "client " + std::to_string(id) + " rejected: " + why;
    };
    if (id >= n) {
      reject(RejectCode::kBadClientId, "client id must be below " + std::to_string(n));
      continue;
    }
    if (sessions_[id].open()) {
      reject(RejectCode::kDuplicateClient, "client id already connected");
      continue;
    }
    if (h.run_seed != cfg_.run_seed) {
      throw ProtocolError(reject(RejectCode::kSeedMismatch, "run seed differs from the master's"));
    }
    if (h.dim != cfg_.dim) {
      throw ProtocolError(reject(RejectCode::kDimensionMismatch,
                                 "client has d=" + std::to_string(h.dim) + ", master expects d=" +
                                     std::to_string(cfg_.dim)));
    }
    if (h.config_hash != expected_hash) {
      throw ProtocolError(reject(RejectCode::kConfigMismatch,
                                 "configuration differs from the master's"));
    }
    if (needs_reconstruct && !(h.capabilities & kCapReconstruct)) {
      throw ProtocolError(reject(RejectCode::kMissingCapability,
                                 "client cannot reconstruct indices"));
    }
    sessions_[id] = std::move(conn);
    ++joined;
  }

  ByteWriter echo;
  echo.u64(cfg_.dim);
  echo.bytes(encode_config(cfg_));
  const Bytes welcome = echo.take();
  for (std::uint32_t id = 0; id < n; ++id) {
    sessions_[id].send({MsgType::kWelcome, id, 0, welcome});
  }
}

Frame NetworkFleet::receive(std::uint32_t id, MsgType type, std::uint32_t round) {
  Frame f;
  try {
    f = sessions_[id].expect(type);
  } catch (const ProtocolError& e) {
    throw ProtocolError("client " + std::to_string(id) + ": " + e.what());
  }
  if (f.client_id != id || f.round != round) {
    throw ProtocolError("client " + std::to_string(id) + ": frame tagged client " +
                        std::to_string(f.client_id) + " round " + std::to_string(f.round));
  }
  return f;
}

void NetworkFleet::send(std::uint32_t id, MsgType type, std::uint32_t round, Bytes payload) {
  try {
    sessions_[id].send({type, id, round, std::move(payload)});
  } catch (const ProtocolError& e) {
    throw ProtocolError("client " + std::to_string(id) + ": " + e.what());
  }
}

std::vector<InitReport> NetworkFleet::init() {
  std::vector<InitReport> out;
  for (std::uint32_t id = 0; id < cfg_.clients; ++id) {
    const Frame f = receive(id, MsgType::kInitReport, 0);
    out.push_back(decode_init_report(f.payload, cfg_, id));
  }
  return out;
}

std::vector<ClientUpdate> NetworkFleet::round(std::uint32_t k, std::span<const double> x,
                                              std::span<const std::uint32_t> participants) {
  const Bytes payload = encode_vector(x);
  for (std::uint32_t id : participants) {
    send(id, MsgType::kRoundBegin, k, payload);
    traffic_.down += kFrameHeaderBytes + payload.size();
  }
  std::vector<ClientUpdate> out;
  out.reserve(participants.size());
  for (std::uint32_t id : participants) {
    const Frame f = receive(id, MsgType::kClientUpdate, k);
    traffic_.up += f.wire_size();
    out.push_back(deserialize_update(f.payload, cfg_, id, k));
  }
  return out;
}

std::vector<double> NetworkFleet::eval_f(std::uint32_t k, std::span<const double> x) {
  const Bytes payload = encode_vector(x);
  for (std::uint32_t id = 0; id < cfg_.clients; ++id) {
    send(id, MsgType::kEvalFRequest, k, payload);
    traffic_.down += kFrameHeaderBytes + payload.size();
  }
  std::vector<double> out;
  for (std::uint32_t id = 0; id < cfg_.clients; ++id) {
    const Frame f = receive(id, MsgType::kEvalFResponse, k);
    traffic_.up += f.wire_size();
    out.push_back(decode_vector(f.payload, 1)[0]);
  }
  return out;
}

std::vector<LocalMetrics> NetworkFleet::metrics(std::uint32_t k, std::span<const double> x) {
  const Bytes payload = encode_vector(x);
  for (std::uint32_t id = 0; id < cfg_.clients; ++id) send(id, MsgType::kMetricsRequest, k, payload);
  std::vector<LocalMetrics> out;
  for (std::uint32_t id = 0; id < cfg_.clients; ++id) {
    const Frame f = receive(id, MsgType::kMetricsResponse, k);
    out.push_back(decode_metrics(f.payload, cfg_.dim));
  }
  return out;
}

void NetworkFleet::shutdown(std::span<const double> x) {
  const Bytes payload = encode_vector(x);
  for (std::uint32_t id = 0; id < cfg_.clients; ++id) send(id, MsgType::kShutdown, 0, payload);
}

RunResult run_master(const RunConfig& cfg, const MasterOptions& opts) {
  NetworkFleet fleet(cfg, opts);
  return run_protocol(cfg, fleet);
}

// ---------------------------------------------------------------------------
// Distributed client

ClientReport run_client(const RunConfig& cfg, Connection conn, std::uint32_t client_id,
                        std::shared_ptr<const ClientShard> shard) {
  if (!shard) throw std::invalid_argument("run_client: null shard");
  cfg.validate();
  const std::size_t d = shard->dim();

  Hello hello{config_hash(cfg), cfg.run_seed, d, kCapReconstruct};
  conn.send({MsgType::kHello, client_id, 0, encode_hello(hello)});
  const Frame welcome = conn.expect(MsgType::kWelcome);
  ByteReader r(welcome.payload);
  RunConfig echo = [&] {
    const std::uint64_t dim = r.u64();
    RunConfig c = decode_config(r.bytes(r.remaining()));
    c.dim = dim;
    return c;
  }();
  if (config_hash(echo) != config_hash(cfg)) {
    throw ProtocolError("WELCOME config echo does not match the local configuration");
  }

  ClientState state = make_client(client_id, std::move(shard), cfg);
  conn.send({MsgType::kInitReport, client_id, 0, encode_init_report(client_init_report(state, cfg), cfg)});

  ClientReport report;
  const bool pp = cfg.algorithm == Algorithm::kFedNLPP;
  for (;;) {
    const Frame f = conn.recv();
    switch (f.type) {
      case MsgType::kRoundBegin: {
        report.traffic.down += f.wire_size();
        const DenseVector x = decode_vector(f.payload, d);
        const ClientUpdate u = pp ? client_round_pp(state, x, cfg, f.round)
                                  : client_round_fednl(state, x, cfg, f.round);
        const Frame out{MsgType::kClientUpdate, client_id, f.round, serialize_update(u, cfg)};
        conn.send(out);
        report.traffic.up += out.wire_size();
        ++report.updates_sent;
        break;
      }
      case MsgType::kEvalFRequest: {
        report.traffic.down += f.wire_size();
        const DenseVector x = decode_vector(f.payload, d);
        const double fx = client_eval_f(state, x);
        const Frame out{MsgType::kEvalFResponse, client_id, f.round, encode_vector({&fx, 1})};
        conn.send(out);
        report.traffic.up += out.wire_size();
        break;
      }
      case MsgType::kMetricsRequest: {
        const DenseVector x = decode_vector(f.payload, d);
        conn.send({MsgType::kMetricsResponse, client_id, f.round,
                   encode_metrics(client_metrics(state, x))});
        break;
      }
      case MsgType::kShutdown:
        report.final_x = decode_vector(f.payload, f.payload.size() / 8);
        return report;
      default:
        throw ProtocolError("client " + std::to_string(client_id) + ": unexpected " +
                            std::string(to_string(f.type)));
    }
  }
}

ClientReport run_client(const RunConfig& cfg, const Endpoint& master, std::uint32_t client_id,
                        std::shared_ptr<const ClientShard> shard,
                        std::chrono::milliseconds timeout) {
  return run_client(cfg, connect_to(master, timeout), client_id, std::move(shard));
}

// ---------------------------------------------------------------------------
// Reporting

std::string describe_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "algorithm=" << to_string(cfg.algorithm) << " option=" << option_name(cfg.option)
     << " d=" << cfg.dim << " clients=" << cfg.clients << " rounds=" << cfg.rounds
     << " compressor=" << to_string(cfg.compressor.kind) << " k=" << cfg.compressor.k
     << " ranking=" << (cfg.compressor.ranking == TopRanking::kRaw ? "raw" : "weighted")
     << " reconstruct_indices=" << (cfg.index_mode == IndexMode::kReconstruct ? "on" : "off")
     << " alpha=" << (cfg.dim > 0 ? fmt17(cfg.resolved_alpha()) : "auto")
     << " mu=" << fmt17(cfg.mu) << " lambda=" << fmt17(cfg.lambda) << " c=" << fmt17(cfg.ls_c)
     << " gamma=" << fmt17(cfg.ls_gamma) << " tau=" << cfg.tau << " seed=" << cfg.run_seed
     << " h_init=" << h_init_name(cfg.h_init) << " tol=" << fmt17(cfg.grad_tol);
  return os.str();
}

void write_csv(std::ostream& os, std::span<const MetricsRow> rows, const std::string& comment) {
  if (!comment.empty()) os << "# " << comment << '\n';
  os << kCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.round << ',' << fmt17(r.wall_seconds) << ',' << fmt17(r.grad_norm) << ','
       << fmt17(r.f_value) << ',' << r.bytes_up_cum << ',' << r.bytes_down_cum << ','
       << r.ls_steps << '\n';
  }
  os.flush();
  if (!os) throw Error("failed to write CSV output");
}

std::vector<MetricsRow> read_csv(std::istream& is) {
  std::vector<MetricsRow> rows;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kCsvHeader) throw Error("unexpected CSV header: " + line);
      header = true;
      continue;
    }
    MetricsRow r;
    unsigned long long up = 0;
    unsigned long long down = 0;
    char rest = 0;
    if (std::sscanf(line.c_str(), "%u,%lf,%lf,%lf,%llu,%llu,%u%c", &r.round, &r.wall_seconds,
                    &r.grad_norm, &r.f_value, &up, &down, &r.ls_steps, &rest) != 7) {
      throw Error("malformed CSV row: " + line);
    }
    r.bytes_up_cum = up;
    r.bytes_down_cum = down;
    rows.push_back(r);
  }
  return rows;
}

TrafficEstimate traffic_model(const RunConfig& cfg) {
  const std::size_t w = cfg.packed_length();
  const CompressorKind kind = cfg.compressor.kind;
  const std::size_t entries = is_dense_kind(kind) ? w : cfg.compressor.k;
  const std::uint64_t participants =
      cfg.algorithm == Algorithm::kFedNLPP ? cfg.tau : cfg.clients;
  const std::uint64_t updates = participants * cfg.rounds;

  TrafficEstimate t;
  t.update_payload_bytes = update_payload_bytes(cfg, wire_size_bytes(kind, entries, cfg.index_mode));
  t.payload_total = updates * t.update_payload_bytes;
  t.up_total = updates * (kFrameHeaderBytes + t.update_payload_bytes);
  t.down_total = updates * round_begin_frame_bytes(cfg);
  return t;
}

}  // namespace fednl
