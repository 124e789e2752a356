#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "fednl/algorithms.h"

namespace fednl {

enum class Subcommand {
  kSimulate,
  kMaster,
  kClient,
  kGenData,
  kSplitData,
  kCheckOracles,
  kTrafficModel,
};

struct DataSource {
  std::string dataset;                      // LIBSVM path
  std::optional<std::size_t> synthetic_dim; // d, intercept included
  std::size_t synthetic_samples = 0;
  double margin_scale = 1.0;
  bool pre_split = false;  // client: the file is already this client's shard

  bool empty() const { return dataset.empty() && !synthetic_dim; }
};

struct CliConfig {
  Subcommand command = Subcommand::kSimulate;
  RunConfig run;  // dim and compressor.k are resolved once d is known
  DataSource data;
  double k_mult = 8.0;
  std::optional<std::size_t> k;  // explicit --k overrides --k-mult
  unsigned threads = 1;          // 0: one per hardware thread
  std::string out;
  std::string listen;
  std::string connect;
  std::uint32_t client_id = 0;
  std::chrono::milliseconds timeout{30000};
  std::uint32_t oracle_points = 3;
};

// Either a config, or a message with the exit code to use (0 for --help).
struct CliParse {
  std::optional<CliConfig> config;
  std::string message;
  int exit_code = 0;
};

CliParse parse_cli(int argc, const char* const* argv);

// Fills dim and compressor.k: k = k_mult * d unless --k was given, capped
// at d(d+1)/2.
void resolve_dimension(CliConfig& cli, std::size_t dim);

// Runs the parsed command. Returns the process exit code.
int run_command(const CliConfig& cli, std::ostream& out, std::ostream& err);
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fednl
