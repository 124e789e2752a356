#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fednl/algorithms.h"
#include "fednl/net.h"
#include "fednl/oracle.h"

namespace fednl {

struct MetricsRow {
  std::uint32_t round = 0;
  double wall_seconds = 0.0;
  double grad_norm = 0.0;
  double f_value = 0.0;
  std::uint64_t bytes_up_cum = 0;
  std::uint64_t bytes_down_cum = 0;
  std::uint32_t ls_steps = 0;
};

// Bytes of algorithm traffic, frame headers included: CLIENT_UPDATE and
// EVAL_F_RESPONSE upstream, ROUND_BEGIN and EVAL_F_REQUEST downstream.
// Handshake, init, metrics and shutdown frames are not counted.
struct Traffic {
  std::uint64_t up = 0;
  std::uint64_t down = 0;

  friend bool operator==(const Traffic&, const Traffic&) = default;
};

// The set of clients as seen from the master. Results always come back in
// ascending client-id order.
class ClientFleet {
 public:
  virtual ~ClientFleet() = default;

  virtual std::vector<InitReport> init() = 0;
  // Sends x to `participants` (ascending) and returns their updates.
  virtual std::vector<ClientUpdate> round(std::uint32_t k, std::span<const double> x,
                                          std::span<const std::uint32_t> participants) = 0;
  // Local objective values f_i(x) of every client.
  virtual std::vector<double> eval_f(std::uint32_t k, std::span<const double> x) = 0;
  // Out-of-band f_i and grad f_i for metrics; not counted as traffic.
  virtual std::vector<LocalMetrics> metrics(std::uint32_t k, std::span<const double> x) = 0;
  virtual void shutdown(std::span<const double> x) = 0;
  virtual Traffic traffic() const = 0;
};

struct RunResult {
  std::vector<MetricsRow> rows;
  DenseVector x;  // final iterate
};

// The master's state machine, shared by every driver. Row k describes x^k;
// the last row is the final iterate.
RunResult run_protocol(const RunConfig& cfg, ClientFleet& fleet);

// Frame sizes the simulator charges, identical to what the sockets carry.
std::uint64_t round_begin_frame_bytes(const RunConfig& cfg);
std::uint64_t update_frame_bytes(const RunConfig& cfg, const CompressedDelta& delta);
std::uint64_t eval_request_frame_bytes(const RunConfig& cfg);
std::uint64_t eval_response_frame_bytes();

// Fixed pool; worker w owns the clients with id % workers == w.
class WorkerPool {
 public:
  explicit WorkerPool(unsigned workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  unsigned size() const { return workers_; }
  // Runs task(w) for every worker and waits for all of them. The exception
  // of the lowest-numbered failing worker is rethrown.
  void run(const std::function<void(unsigned)>& task);

 private:
  struct Shared;
  unsigned workers_;
  std::unique_ptr<Shared> shared_;
};

// All clients in this process.
class SimulatedFleet final : public ClientFleet {
 public:
  SimulatedFleet(const RunConfig& cfg, std::vector<std::shared_ptr<const ClientShard>> shards,
                 unsigned workers);

  std::vector<InitReport> init() override;
  std::vector<ClientUpdate> round(std::uint32_t k, std::span<const double> x,
                                  std::span<const std::uint32_t> participants) override;
  std::vector<double> eval_f(std::uint32_t k, std::span<const double> x) override;
  std::vector<LocalMetrics> metrics(std::uint32_t k, std::span<const double> x) override;
  void shutdown(std::span<const double> x) override;
  Traffic traffic() const override { return traffic_; }

 private:
  template <typename Fn>
  void for_clients(std::span<const std::uint32_t> ids, Fn&& fn);

  RunConfig cfg_;
  std::vector<ClientState> clients_;
  std::vector<std::uint32_t> all_ids_;
  WorkerPool pool_;
  Traffic traffic_;
};

// 0 picks the hardware concurrency.
RunResult simulate(const RunConfig& cfg, std::vector<std::shared_ptr<const ClientShard>> shards,
                   unsigned workers = 1);

struct MasterOptions {
  Endpoint bind{"", "0"};
  std::chrono::milliseconds timeout = kDefaultNetTimeout;
  // Called once the socket is bound, e.g. to learn an ephemeral port.
  std::function<void(std::uint16_t)> on_listening;
};

// Master side of the distributed driver: one session per client.
class NetworkFleet final : public ClientFleet {
 public:
  NetworkFleet(const RunConfig& cfg, const MasterOptions& opts);

  std::vector<InitReport> init() override;
  std::vector<ClientUpdate> round(std::uint32_t k, std::span<const double> x,
                                  std::span<const std::uint32_t> participants) override;
  std::vector<double> eval_f(std::uint32_t k, std::span<const double> x) override;
  std::vector<LocalMetrics> metrics(std::uint32_t k, std::span<const double> x) override;
  void shutdown(std::span<const double> x) override;
  Traffic traffic() const override { return traffic_; }

 private:
  void accept_all(Listener& listener, std::chrono::milliseconds timeout);
  Frame receive(std::uint32_t id, MsgType type, std::uint32_t round);
  void send(std::uint32_t id, MsgType type, std::uint32_t round, Bytes payload);

  RunConfig cfg_;
  std::vector<Connection> sessions_;
  Traffic traffic_;
};

RunResult run_master(const RunConfig& cfg, const MasterOptions& opts);

struct ClientReport {
  Traffic traffic;  // same scope as the master's counters
  std::uint32_t updates_sent = 0;
  DenseVector final_x;
};

// Client side: handshake, then answer the master until SHUTDOWN.
ClientReport run_client(const RunConfig& cfg, Connection conn, std::uint32_t client_id,
                        std::shared_ptr<const ClientShard> shard);
ClientReport run_client(const RunConfig& cfg, const Endpoint& master, std::uint32_t client_id,
                        std::shared_ptr<const ClientShard> shard,
                        std::chrono::milliseconds timeout = kDefaultNetTimeout);

// One "key=value" line describing every resolved config field.
std::string describe_config(const RunConfig& cfg);

inline constexpr const char* kCsvHeader =
    "round,wall_seconds,grad_norm,f_value,bytes_up_cum,bytes_down_cum,ls_steps";

// Optional "# comment" line, the header, then one line per row. Doubles are
// printed with 17 significant digits. Throws Error on a failed write.
void write_csv(std::ostream& os, std::span<const MetricsRow> rows,
               const std::string& comment = {});
std::vector<MetricsRow> read_csv(std::istream& is);

struct TrafficEstimate {
  std::uint64_t update_payload_bytes = 0;  // one CLIENT_UPDATE payload
  std::uint64_t payload_total = 0;         // uplink payloads over the run
  std::uint64_t up_total = 0;              // uplink frames, headers included
  std::uint64_t down_total = 0;            // downlink frames, headers included

  static constexpr double kMiB = 1024.0 * 1024.0;
  double payload_mib() const { return static_cast<double>(payload_total) / kMiB; }
  double up_mib() const { return static_cast<double>(up_total) / kMiB; }
};

// Closed-form traffic of a full FedNL or FedNL-PP run (rounds * participants
// updates). TopLEK is charged at its upper bound of k entries.
TrafficEstimate traffic_model(const RunConfig& cfg);

}  // namespace fednl
