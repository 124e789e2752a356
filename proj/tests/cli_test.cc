#include "fednl/cli.h"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fednl/data.h"
#include "fednl/errors.h"
#include "fednl/runtime.h"

namespace fednl {
namespace {

namespace fs = std::filesystem;

CliParse parse(std::vector<std::string> args) {
  args.insert(args.begin(), "fednl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return parse_cli(static_cast<int>(argv.size()), argv.data());
}

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "fednl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("fednl_cli_" + std::to_string(::getpid()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

TEST(Parse, DefaultsForSimulate) {
  const CliParse p = parse({"simulate", "--clients", "4", "--synthetic", "10,100"});
  ASSERT_TRUE(p.config) << p.message;
  const CliConfig& c = *p.config;
  EXPECT_EQ(c.command, Subcommand::kSimulate);
  EXPECT_EQ(c.run.clients, 4u);
  EXPECT_EQ(c.run.rounds, 1000u);
  EXPECT_EQ(c.run.algorithm, Algorithm::kFedNL);
  EXPECT_EQ(c.run.option, StepOption::kB);
  EXPECT_EQ(c.run.compressor.kind, CompressorKind::kTopK);
  EXPECT_EQ(c.run.index_mode, IndexMode::kReconstruct);
  EXPECT_FALSE(c.run.alpha.has_value());
  EXPECT_EQ(c.data.synthetic_dim, 10u);
  EXPECT_EQ(c.data.synthetic_samples, 100u);
  EXPECT_EQ(c.threads, 1u);
}

TEST(Parse, EveryRunFlag) {
  const CliParse p = parse({"simulate", "--clients", "6", "--synthetic", "5,60", "--rounds", "7",
                            "--algorithm", "fednl-pp", "--option", "a", "--compressor", "randseqk",
                            "--k", "3", "--alpha", "0.4", "--mu", "0.01", "--lambda", "0.002",
                            "--c", "0.3", "--gamma", "0.8", "--tau", "2", "--seed", "99",
                            "--h-init", "zero", "--tol", "1e-9", "--reconstruct-indices", "off",
                            "--threads", "3"});
  ASSERT_TRUE(p.config) << p.message;
  const RunConfig& r = p.config->run;
  EXPECT_EQ(r.rounds, 7u);
  EXPECT_EQ(r.algorithm, Algorithm::kFedNLPP);
  EXPECT_EQ(r.option, StepOption::kA);
  EXPECT_EQ(r.compressor.kind, CompressorKind::kRandSeqK);
  EXPECT_EQ(p.config->k, 3u);
  EXPECT_EQ(r.alpha, 0.4);
  EXPECT_EQ(r.mu, 0.01);
  EXPECT_EQ(r.lambda, 0.002);
  EXPECT_EQ(r.ls_c, 0.3);
  EXPECT_EQ(r.ls_gamma, 0.8);
  EXPECT_EQ(r.tau, 2u);
  EXPECT_EQ(r.run_seed, 99u);
  EXPECT_EQ(r.h_init, HessianInit::kZero);
  EXPECT_EQ(r.grad_tol, 1e-9);
  EXPECT_EQ(r.index_mode, IndexMode::kExplicit);
  EXPECT_EQ(p.config->threads, 3u);
}

TEST(Parse, UsageErrorsExitWithTwo) {
  EXPECT_EQ(parse({"simulate", "--synthetic", "5,60"}).exit_code, 2);  // no --clients
  EXPECT_EQ(parse({"simulate", "--clients", "2", "--synthetic", "5,60", "--algorithm",
                   "fednl-pp"}).exit_code, 2);  // pp without --tau
  EXPECT_EQ(parse({"simulate", "--clients", "2", "--compressor", "best"}).exit_code, 2);
  EXPECT_EQ(parse({"simulate", "--clients", "2", "--synthetic", "1,60"}).exit_code, 2);
  EXPECT_EQ(parse({"simulate", "--clients", "2", "--synthetic", "5"}).exit_code, 2);
  EXPECT_EQ(parse({"launch"}).exit_code, 2);
  EXPECT_EQ(parse({}).exit_code, 2);
}

TEST(Parse, HelpExitsWithZero) {
  const CliParse p = parse({"--help"});
  EXPECT_FALSE(p.config);
  EXPECT_EQ(p.exit_code, 0);
  EXPECT_NE(p.message.find("simulate"), std::string::npos);
}

TEST(ResolveDimension, KFollowsMultiplierAndIsCapped) {
  const CliConfig base = *parse({"simulate", "--clients", "2", "--synthetic", "5,60"}).config;
  CliConfig c = base;
  resolve_dimension(c, 69);
  EXPECT_EQ(c.run.dim, 69u);
  EXPECT_EQ(c.run.compressor.k, 8u * 69);
  c = base;
  resolve_dimension(c, 3);
  EXPECT_EQ(c.run.compressor.k, 6u);  // w = 6
  c = base;
  c.k = 4;
  resolve_dimension(c, 69);
  EXPECT_EQ(c.run.compressor.k, 4u);
  c = base;
  c.run.dim = 10;
  EXPECT_THROW(resolve_dimension(c, 69), ConfigError);
}

TEST(Commands, TrafficModelPrintsTheLargeProblem) {
  const Outcome o = run({"traffic-model", "--dim", "301", "--clients", "142", "--compressor",
                         "randk"});
  EXPECT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("21688 bytes"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("2937.0 MiB"), std::string::npos) << o.out;
}

TEST(Commands, GenerateSplitAndSimulate) {
  TempDir tmp;
  const std::string data = (tmp / "syn.libsvm").string();
  Outcome o = run({"gen-data", "--synthetic", "6,90", "--seed", "3", "--out", data});
  ASSERT_EQ(o.code, 0) << o.err;
  const RawDataset ds = load_libsvm(data);
  EXPECT_EQ(ds.size(), 90u);
  EXPECT_EQ(ds.d_raw, 5u);

  o = run({"split-data", "--dataset", data, "--clients", "4", "--out", (tmp / "parts").string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_TRUE(fs::exists(tmp / "parts/client_3.libsvm"));
  EXPECT_NE(o.out.find("2 dropped"), std::string::npos) << o.out;

  const std::string csv = (tmp / "run.csv").string();
  o = run({"simulate", "--clients", "4", "--dataset", data, "--rounds", "20", "--compressor",
           "identity", "--out", csv});
  ASSERT_EQ(o.code, 0) << o.err;
  std::ifstream is(csv);
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(first.rfind("# config algorithm=fednl", 0), 0u) << first;
  is.seekg(0);
  const auto rows = read_csv(is);
  ASSERT_EQ(rows.size(), 21u);
  EXPECT_LT(rows.back().grad_norm, 1e-12);
}

TEST(Commands, CheckOraclesPasses) {
  const Outcome o = run({"check-oracles", "--synthetic", "12,200", "--clients", "3"});
  EXPECT_EQ(o.code, 0) << o.out << o.err;
  EXPECT_NE(o.out.find("OK"), std::string::npos);
}

TEST(Commands, ErrorsMapToExitCodes) {
  EXPECT_EQ(run({"simulate", "--clients", "2", "--dataset", "/nonexistent.libsvm"}).code, 2);
  EXPECT_EQ(run({"simulate", "--clients", "2"}).code, 2);
  EXPECT_EQ(run({"simulate", "--clients", "500", "--synthetic", "4,100"}).code, 2);
  TempDir tmp;
  const std::string bad = (tmp / "bad.libsvm").string();
  std::ofstream(bad) << "1 1:1\n-1 2:oops\n";
  const Outcome o = run({"simulate", "--clients", "1", "--dataset", bad});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("line 2"), std::string::npos) << o.err;
}

}  // namespace
}  // namespace fednl
