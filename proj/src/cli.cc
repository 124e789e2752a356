#include "fednl/cli.h"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "fednl/data.h"
#include "fednl/errors.h"
#include "fednl/net.h"
#include "fednl/prg.h"
#include "fednl/runtime.h"

namespace fednl {

namespace {

// Flags as typed, before conversion into CliConfig.
struct RawFlags {
  std::string algorithm = "fednl";
  std::string option = "b";
  std::string compressor = "topk";
  std::string ranking = "raw";
  std::string alpha = "auto";
  std::string threads = "1";
  std::string reconstruct = "on";
  std::string h_init = "lambda";
  std::string synthetic;
  std::size_t k = 0;
  double timeout_s = 30.0;
  std::size_t dim = 0;
};

struct Parsed {
  CLI::App* sub = nullptr;  // the subcommand that was given
};

const std::map<std::string, Subcommand> kCommands = {
    {"simulate", Subcommand::kSimulate},       {"master", Subcommand::kMaster},
    {"client", Subcommand::kClient},           {"gen-data", Subcommand::kGenData},
    {"split-data", Subcommand::kSplitData},    {"check-oracles", Subcommand::kCheckOracles},
    {"traffic-model", Subcommand::kTrafficModel},
};

std::pair<std::size_t, std::size_t> parse_synthetic(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError("--synthetic expects d,m");
  auto number = [&](std::string_view s) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || v == 0) {
      throw ConfigError("--synthetic expects two positive integers d,m");
    }
    return v;
  };
  const std::string_view sv(text);
  const std::size_t d = number(sv.substr(0, comma));
  const std::size_t m = number(sv.substr(comma + 1));
  if (d < 2) throw ConfigError("--synthetic d counts the intercept and must be >= 2");
  return {d, m};
}

void add_data_flags(CLI::App* app, CliConfig& cli, RawFlags& raw) {
  auto* ds = app->add_option("--dataset", cli.data.dataset, "LIBSVM file");
  auto* syn = app->add_option("--synthetic", raw.synthetic,
                              "Generated problem: d (intercept included), m samples");
  ds->excludes(syn);
  app->add_option("--margin-scale", cli.data.margin_scale, "Signal scale of --synthetic labels")
      ->capture_default_str();
}

void add_run_flags(CLI::App* app, CliConfig& cli, RawFlags& raw) {
  RunConfig& r = cli.run;
  app->add_option("--clients", r.clients, "Number of clients n")->required();
  app->add_option("--rounds", r.rounds, "Communication rounds")->capture_default_str();
  app->add_option("--algorithm", raw.algorithm, "fednl | fednl-ls | fednl-pp")
      ->check(CLI::IsMember({"fednl", "fednl-ls", "fednl-pp"}))
      ->capture_default_str();
  app->add_option("--option", raw.option, "Model step: a (projection) | b (l-shift)")
      ->check(CLI::IsMember({"a", "b"}))
      ->capture_default_str();
  app->add_option("--compressor", raw.compressor,
                  "identity | topk | toplek | randk | randseqk | natural")
      ->check(CLI::IsMember({"identity", "topk", "toplek", "randk", "randseqk", "natural"}))
      ->capture_default_str();
  app->add_option("--k-mult", cli.k_mult, "k = M * d for Top/Rand compressors")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--k", raw.k, "Explicit k, overrides --k-mult")->check(CLI::PositiveNumber);
  app->add_option("--ranking", raw.ranking, "Top-family ranking: raw | weighted")
      ->check(CLI::IsMember({"raw", "weighted"}))
      ->capture_default_str();
  app->add_option("--alpha", raw.alpha, "Hessian learning rate, or auto")->capture_default_str();
  app->add_option("--mu", r.mu, "Eigenvalue floor for option a and line search")
      ->capture_default_str();
  app->add_option("--lambda", r.lambda, "L2 regularisation")->capture_default_str();
  app->add_option("--c", r.ls_c, "Armijo constant")->capture_default_str();
  app->add_option("--gamma", r.ls_gamma, "Backtracking factor")->capture_default_str();
  app->add_option("--tau", r.tau, "Participants per round (fednl-pp)");
  app->add_option("--seed", r.run_seed, "Run seed")->capture_default_str();
  app->add_option("--h-init", raw.h_init, "Initial Hessian estimate: zero | lambda | exact")
      ->check(CLI::IsMember({"zero", "lambda", "exact"}))
      ->capture_default_str();
  app->add_option("--tol", r.grad_tol, "Stop once ||grad f|| <= tol (0: never)")
      ->capture_default_str();
  app->add_option("--reconstruct-indices", raw.reconstruct,
                  "Rebuild Rand-family indices from the seed: on | off")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
}

void finish_run_flags(CliConfig& cli, const RawFlags& raw, const Parsed& p) {
  RunConfig& r = cli.run;
  r.algorithm = algorithm_from_string(raw.algorithm);
  r.option = raw.option == "a" ? StepOption::kA : StepOption::kB;
  r.compressor.kind = compressor_from_string(raw.compressor);
  r.compressor.ranking = raw.ranking == "weighted" ? TopRanking::kWeighted : TopRanking::kRaw;
  r.index_mode = raw.reconstruct == "on" ? IndexMode::kReconstruct : IndexMode::kExplicit;
  r.h_init = raw.h_init == "zero"    ? HessianInit::kZero
             : raw.h_init == "exact" ? HessianInit::kExact
                                     : HessianInit::kLambdaIdentity;
  if (raw.alpha != "auto") {
    double a = 0.0;
    auto [ptr, ec] = std::from_chars(raw.alpha.data(), raw.alpha.data() + raw.alpha.size(), a);
    if (ec != std::errc() || ptr != raw.alpha.data() + raw.alpha.size()) {
      throw ConfigError("--alpha expects a number or 'auto'");
    }
    r.alpha = a;
  }
  if (p.sub->count("--k") > 0) cli.k = raw.k;
  if (r.algorithm == Algorithm::kFedNLPP && p.sub->count("--tau") == 0) {
    throw ConfigError("--algorithm fednl-pp requires --tau");
  }
  if (r.clients == 0) throw ConfigError("--clients must be positive");
}

RawDataset load_raw(const DataSource& src, std::uint64_t seed, std::ostream& err) {
  if (src.synthetic_dim) {
    return generate_synthetic(*src.synthetic_dim - 1, src.synthetic_samples, seed,
                              src.margin_scale);
  }
  if (src.dataset.empty()) throw ConfigError("one of --dataset or --synthetic is required");
  RawDataset ds = load_libsvm(src.dataset);
  const LabelMapping map = normalize_labels(ds);
  if (map.notice) {
    err << "note: labels " << map.negative << " / " << map.positive
        << " mapped to -1 / +1\n";
  }
  return ds;
}

void write_result(const CliConfig& cli, const RunResult& result, std::ostream& out) {
  if (!cli.out.empty()) {
    std::ofstream os(cli.out);
    if (!os) throw ConfigError("cannot open " + cli.out);
    write_csv(os, result.rows, "config " + describe_config(cli.run));
  }
  const MetricsRow& last = result.rows.back();
  out << "rounds " << last.round << "  grad_norm " << last.grad_norm << "  f " << last.f_value
      << "  bytes_up " << last.bytes_up_cum << "  bytes_down " << last.bytes_down_cum
      << "  seconds " << last.wall_seconds << '\n';
}

int cmd_simulate(CliConfig cli, std::ostream& out, std::ostream& err) {
  const RawDataset ds = load_raw(cli.data, cli.run.run_seed, err);
  auto shards = augment_and_shard(ds, cli.run.clients, cli.run.run_seed, cli.run.lambda);
  resolve_dimension(cli, ds.d_raw + 1);
  cli.run.validate();
  const RunResult result = simulate(cli.run, std::move(shards), cli.threads);
  write_result(cli, result, out);
  return 0;
}

int cmd_master(CliConfig cli, std::ostream& out, std::ostream& err) {
  std::size_t d = cli.run.dim;
  if (d == 0) {
    if (cli.data.empty()) throw ConfigError("master needs --dim, --dataset or --synthetic");
    d = load_raw(cli.data, cli.run.run_seed, err).d_raw + 1;
  }
  resolve_dimension(cli, d);
  cli.run.validate();
  MasterOptions opts;
  opts.bind = parse_endpoint(cli.listen);
  opts.timeout = cli.timeout;
  opts.on_listening = [&](std::uint16_t port) {
    out << "listening on port " << port << std::endl;
  };
  const RunResult result = run_master(cli.run, opts);
  write_result(cli, result, out);
  return 0;
}

int cmd_client(CliConfig cli, std::ostream& out, std::ostream& err) {
  const Endpoint master = parse_endpoint(cli.connect);
  // Connect while the data loads.
  auto pending = std::async(std::launch::async, [&] { return connect_to(master, cli.timeout); });

  std::shared_ptr<const ClientShard> shard;
  if (cli.data.pre_split) {
    if (cli.data.dataset.empty()) throw ConfigError("--pre-split needs --dataset");
    shard = make_shard(load_libsvm(cli.data.dataset), cli.run.lambda, cli.run.dim);
  } else {
    if (cli.client_id >= cli.run.clients) throw ConfigError("--client-id must be below --clients");
    const RawDataset ds = load_raw(cli.data, cli.run.run_seed, err);
    shard = augment_and_shard(ds, cli.run.clients, cli.run.run_seed, cli.run.lambda)[cli.client_id];
  }
  resolve_dimension(cli, shard->dim());
  cli.run.validate();
  const ClientReport report = run_client(cli.run, pending.get(), cli.client_id, shard);
  out << "client " << cli.client_id << " done: updates " << report.updates_sent << "  bytes_up "
      << report.traffic.up << "  bytes_down " << report.traffic.down << '\n';
  return 0;
}

int cmd_gen_data(const CliConfig& cli, std::ostream& out) {
  if (!cli.data.synthetic_dim) throw ConfigError("gen-data needs --synthetic d,m");
  const RawDataset ds = generate_synthetic(*cli.data.synthetic_dim - 1, cli.data.synthetic_samples,
                                           cli.run.run_seed, cli.data.margin_scale);
  save_libsvm(ds, cli.out);
  out << "wrote " << ds.size() << " samples with " << ds.d_raw << " features to " << cli.out
      << '\n';
  return 0;
}

int cmd_split_data(const CliConfig& cli, std::ostream& out, std::ostream& err) {
  const RawDataset ds = load_raw(cli.data, cli.run.run_seed, err);
  const auto parts = split_dataset(ds, cli.run.clients, cli.run.run_seed);
  const std::filesystem::path dir(cli.out);
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    save_libsvm(parts[i], dir / ("client_" + std::to_string(i) + ".libsvm"));
  }
  out << "split " << ds.size() << " samples into " << parts.size() << " shards of "
      << parts.front().size() << " (" << ds.size() - parts.size() * parts.front().size()
      << " dropped), d = " << ds.d_raw + 1 << '\n';
  return 0;
}

int cmd_check_oracles(const CliConfig& cli, std::ostream& out, std::ostream& err) {
  const RawDataset ds = load_raw(cli.data, cli.run.run_seed, err);
  const auto shards = augment_and_shard(ds, cli.run.clients, cli.run.run_seed, cli.run.lambda);
  Prg prg(round_seed(cli.run.run_seed, kMasterStreamTag, 0));
  double grad_err = 0.0;
  double hess_err = 0.0;
  bool nan = false;
  for (const auto& shard : shards) {
    DenseVector x(shard->dim(), 0.0);
    for (std::uint32_t p = 0; p < cli.oracle_points; ++p) {
      const FiniteDiffReport rep = finite_diff_check(*shard, x, 1e-5);
      grad_err = std::max(grad_err, rep.grad_max_rel_error);
      hess_err = std::max(hess_err, rep.hessian_max_rel_error);
      nan = nan || rep.grad_nan || rep.hessian_nan;
      for (double& v : x) v = prg.uniform01() - 0.5;
    }
  }
  const bool ok = !nan && grad_err <= 1e-6 && hess_err <= 1e-5;
  out << "shards " << shards.size() << "  points " << cli.oracle_points << "  gradient error "
      << grad_err << "  hessian error " << hess_err << (ok ? "  OK" : "  FAILED") << '\n';
  return ok ? 0 : static_cast<int>(ExitCode::kNumerical);
}

int cmd_traffic_model(CliConfig cli, std::ostream& out) {
  if (cli.run.dim == 0) throw ConfigError("traffic-model needs --dim");
  resolve_dimension(cli, cli.run.dim);
  cli.run.validate();
  const TrafficEstimate t = traffic_model(cli.run);
  out.setf(std::ios::fixed);
  out.precision(1);
  out << "compressor " << to_string(cli.run.compressor.kind);
  if (!is_dense_kind(cli.run.compressor.kind)) out << " k=" << cli.run.compressor.k;
  out << "  d=" << cli.run.dim << " n=" << cli.run.clients << " r=" << cli.run.rounds << '\n'
      << "update payload        " << t.update_payload_bytes << " bytes\n"
      << "uplink payloads       " << t.payload_total << " bytes = " << t.payload_mib()
      << " MiB\n"
      << "uplink with headers   " << t.up_total << " bytes = " << t.up_mib() << " MiB\n"
      << "downlink with headers " << t.down_total << " bytes = "
      << static_cast<double>(t.down_total) / TrafficEstimate::kMiB << " MiB\n";
  return 0;
}

}  // namespace

CliParse parse_cli(int argc, const char* const* argv) {
  CliParse result;
  CliConfig cli;
  RawFlags raw;
  Parsed p;

  CLI::App app{"FedNL: federated Newton learning for L2-regularised logistic regression", "fednl"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "Run all clients in this process");
  add_data_flags(sim, cli, raw);
  add_run_flags(sim, cli, raw);
  sim->add_option("--threads", raw.threads, "Worker threads, or auto")->capture_default_str();
  sim->add_option("--out", cli.out, "CSV metrics file");

  auto* master = app.add_subcommand("master", "Coordinate remote clients over TCP");
  add_data_flags(master, cli, raw);
  add_run_flags(master, cli, raw);
  master->add_option("--dim", raw.dim, "Model dimension d (else taken from the data)");
  master->add_option("--listen", cli.listen, "Bind address, host:port")->required();
  master->add_option("--timeout", raw.timeout_s, "Network timeout in seconds")
      ->capture_default_str();
  master->add_option("--out", cli.out, "CSV metrics file");

  auto* client = app.add_subcommand("client", "Serve one shard to a remote master");
  add_data_flags(client, cli, raw);
  add_run_flags(client, cli, raw);
  client->add_option("--dim", raw.dim, "Model dimension d for --pre-split shards");
  client->add_option("--connect", cli.connect, "Master address, host:port")->required();
  client->add_option("--client-id", cli.client_id, "This client's id")->required();
  client->add_flag("--pre-split", cli.data.pre_split, "--dataset is this client's shard file");
  client->add_option("--timeout", raw.timeout_s, "Network timeout in seconds")
      ->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic LIBSVM dataset");
  gen->add_option("--synthetic", raw.synthetic, "d (intercept included), m samples")->required();
  gen->add_option("--margin-scale", cli.data.margin_scale, "Signal scale")->capture_default_str();
  gen->add_option("--seed", cli.run.run_seed, "Seed")->capture_default_str();
  gen->add_option("--out", cli.out, "Output file")->required();

  auto* split = app.add_subcommand("split-data", "Write one LIBSVM file per client");
  split->add_option("--dataset", cli.data.dataset, "LIBSVM file")->required();
  split->add_option("--clients", cli.run.clients, "Number of clients")->required();
  split->add_option("--seed", cli.run.run_seed, "Shuffle seed")->capture_default_str();
  split->add_option("--out", cli.out, "Output directory")->required();

  auto* check = app.add_subcommand("check-oracles", "Finite-difference check of the oracles");
  add_data_flags(check, cli, raw);
  check->add_option("--clients", cli.run.clients, "Number of shards")->capture_default_str();
  check->add_option("--seed", cli.run.run_seed, "Seed")->capture_default_str();
  check->add_option("--lambda", cli.run.lambda, "L2 regularisation")->capture_default_str();
  check->add_option("--points", cli.oracle_points, "Points per shard")->capture_default_str();

  auto* traffic = app.add_subcommand("traffic-model", "Closed-form traffic of a run");
  traffic->add_option("--dim", raw.dim, "Model dimension d")->required();
  add_run_flags(traffic, cli, raw);

  cli.run.clients = 1;
  try {
    app.parse(argc, argv);
    for (const auto& [name, cmd] : kCommands) {
      if (app.got_subcommand(name)) {
        cli.command = cmd;
        p.sub = app.get_subcommand(name);
      }
    }
    if (!raw.synthetic.empty()) {
      const auto [d, m] = parse_synthetic(raw.synthetic);
      cli.data.synthetic_dim = d;
      cli.data.synthetic_samples = m;
    }
    cli.run.dim = raw.dim;
    cli.timeout = std::chrono::milliseconds(static_cast<long long>(raw.timeout_s * 1000.0));
    if (raw.timeout_s <= 0.0) throw ConfigError("--timeout must be positive");
    switch (cli.command) {
      case Subcommand::kSimulate:
      case Subcommand::kMaster:
      case Subcommand::kClient:
      case Subcommand::kTrafficModel:
        finish_run_flags(cli, raw, p);
        break;
      default:
        if (cli.run.clients == 0) throw ConfigError("--clients must be positive");
        break;
    }
    if (cli.command == Subcommand::kSimulate) {
      if (raw.threads == "auto") {
        cli.threads = 0;
      } else {
        unsigned t = 0;
        auto [ptr, ec] = std::from_chars(raw.threads.data(), raw.threads.data() + raw.threads.size(), t);
        if (ec != std::errc() || ptr != raw.threads.data() + raw.threads.size() || t == 0) {
          throw ConfigError("--threads expects a positive integer or 'auto'");
        }
        cli.threads = t;
      }
    }
    const bool needs_data = cli.command == Subcommand::kSimulate ||
                            cli.command == Subcommand::kCheckOracles ||
                            (cli.command == Subcommand::kClient);
    if (needs_data && cli.data.empty()) {
      throw ConfigError("one of --dataset or --synthetic is required");
    }
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      result.message = app.help(p.sub ? p.sub->get_name() : "");
      if (result.message.empty()) result.message = app.help();
      result.exit_code = 0;
    } else {
      result.message = std::string(e.what()) + "\nRun 'fednl --help' for usage.";
      result.exit_code = static_cast<int>(ExitCode::kConfig);
    }
    return result;
  } catch (const std::exception& e) {
    result.message = std::string(e.what()) + "\nRun 'fednl --help' for usage.";
    result.exit_code = static_cast<int>(ExitCode::kConfig);
    return result;
  }
  result.config = std::move(cli);
  return result;
}

void resolve_dimension(CliConfig& cli, std::size_t dim) {
  if (cli.run.dim != 0 && cli.run.dim != dim && !cli.data.pre_split) {
    throw ConfigError("--dim " + std::to_string(cli.run.dim) + " does not match the data (d=" +
                      std::to_string(dim) + ")");
  }
  cli.run.dim = dim;
  if (!is_dense_kind(cli.run.compressor.kind)) {
    const std::size_t w = packed_size(dim);
    const std::size_t k = cli.k ? *cli.k
                                : static_cast<std::size_t>(cli.k_mult * static_cast<double>(dim));
    cli.run.compressor.k = std::clamp<std::size_t>(k, 1, w);
  }
}

int run_command(const CliConfig& cli, std::ostream& out, std::ostream& err) {
  switch (cli.command) {
    case Subcommand::kSimulate: return cmd_simulate(cli, out, err);
    case Subcommand::kMaster: return cmd_master(cli, out, err);
    case Subcommand::kClient: return cmd_client(cli, out, err);
    case Subcommand::kGenData: return cmd_gen_data(cli, out);
    case Subcommand::kSplitData: return cmd_split_data(cli, out, err);
    case Subcommand::kCheckOracles: return cmd_check_oracles(cli, out, err);
    case Subcommand::kTrafficModel: return cmd_traffic_model(cli, out);
  }
  return static_cast<int>(ExitCode::kConfig);
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const CliParse parsed = parse_cli(argc, argv);
  if (!parsed.config) {
    (parsed.exit_code == 0 ? out : err) << parsed.message << '\n';
    return parsed.exit_code;
  }
  try {
    return run_command(*parsed.config, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kProtocol);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kNumerical);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace fednl
