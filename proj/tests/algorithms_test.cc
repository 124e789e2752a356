#include "fednl/algorithms.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "fednl/errors.h"
#include "fednl/runtime.h"
#include "test_support.h"

namespace fednl {
namespace {

RunConfig base_config(std::size_t d, std::uint32_t n, CompressorKind kind, std::size_t k) {
  RunConfig cfg;
  cfg.dim = d;
  cfg.clients = n;
  cfg.rounds = 15;
  cfg.compressor = {kind, k};
  cfg.run_seed = 2024;
  return cfg;
}

void expect_trajectories_close(const std::vector<double>& got, const std::vector<double>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t k = 0; k < got.size(); ++k) {
    EXPECT_NEAR(got[k], want[k], 1e-7 * want[k] + 1e-13) << "round " << k;
  }
}

TEST(Names, AlgorithmRoundTrip) {
  for (auto a : {Algorithm::kFedNL, Algorithm::kFedNLLS, Algorithm::kFedNLPP}) {
    EXPECT_EQ(algorithm_from_string(to_string(a)), a);
  }
  EXPECT_THROW(algorithm_from_string("newton"), std::invalid_argument);
}

TEST(DefaultAlpha, PerCompressorFamily) {
  const std::size_t w = 100;
  EXPECT_DOUBLE_EQ(default_alpha({CompressorKind::kIdentity}, w), 1.0);
  EXPECT_DOUBLE_EQ(default_alpha({CompressorKind::kTopK, 36}, w), 1.0 - std::sqrt(0.64));
  EXPECT_DOUBLE_EQ(default_alpha({CompressorKind::kTopLEK, 36}, w), 0.2);
  EXPECT_DOUBLE_EQ(default_alpha({CompressorKind::kRandK, 25}, w), 0.25);
  EXPECT_DOUBLE_EQ(default_alpha({CompressorKind::kRandSeqK, 50}, w), 0.5);
  EXPECT_DOUBLE_EQ(default_alpha({CompressorKind::kNatural}, w), 8.0 / 9.0);
  RunConfig cfg = base_config(4, 2, CompressorKind::kTopK, 3);
  cfg.alpha = 0.7;
  EXPECT_EQ(cfg.resolved_alpha(), 0.7);
}

TEST(Validate, RejectsInconsistentConfigs) {
  const RunConfig ok = base_config(4, 3, CompressorKind::kTopK, 10);
  EXPECT_NO_THROW(ok.validate());
  auto bad = [&](auto mutate) {
    RunConfig c = ok;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](RunConfig& c) { c.dim = 0; });
  bad([](RunConfig& c) { c.clients = 0; });
  bad([](RunConfig& c) { c.compressor.k = 11; });
  bad([](RunConfig& c) { c.compressor.k = 0; });
  bad([](RunConfig& c) { c.alpha = -0.1; });
  bad([](RunConfig& c) { c.ls_c = 0.6; });
  bad([](RunConfig& c) { c.ls_gamma = 1.0; });
  bad([](RunConfig& c) {
    c.option = StepOption::kA;
    c.mu = 0.0;
  });
  bad([](RunConfig& c) {
    c.algorithm = Algorithm::kFedNLPP;
    c.tau = 4;
  });
  bad([](RunConfig& c) {
    c.algorithm = Algorithm::kFedNLPP;
    c.tau = 0;
  });
  bad([](RunConfig& c) { c.grad_tol = -1.0; });
}

TEST(MeanOrdered, DividesBySizeNotCount) {
  const std::vector<double> v{1.0, 2.0, 3.0};
  EXPECT_DOUBLE_EQ(mean_ordered(v, 3), 2.0);
  EXPECT_DOUBLE_EQ(mean_ordered(v, 6), 1.0);
}

TEST(PpSelect, DistinctSortedAndDeterministic) {
  RunConfig cfg = base_config(3, 7, CompressorKind::kIdentity, 0);
  cfg.algorithm = Algorithm::kFedNLPP;
  cfg.tau = 3;
  std::map<std::uint32_t, int> hits;
  for (std::uint32_t k = 0; k < 7000; ++k) {
    const auto s = pp_select(cfg, k);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
    EXPECT_LT(s.back(), 7u);
    EXPECT_EQ(s, pp_select(cfg, k));
    for (auto i : s) hits[i]++;
  }
  // Each client participates with probability 3/7: 3000 of 7000 rounds.
  for (const auto& [i, c] : hits) EXPECT_NEAR(c, 3000, 200) << "client " << i;
}

TEST(LineSearch, FullStepAcceptedOnQuadratic) {
  // f(x) = x^2 / 2 at x = 1 with the Newton direction: s = 0.
  const GlobalObjective f = [](std::span<const double> x) { return 0.5 * x[0] * x[0]; };
  const std::vector<double> x{1.0};
  const std::vector<double> dir{-1.0};
  const std::vector<double> g{1.0};
  const LineSearchResult r = line_search_step(x, dir, 0.5, g, 0.49, 0.5, f);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_DOUBLE_EQ(r.x[0], 0.0);
}

TEST(LineSearch, BacktracksOnOvershoot) {
  // Direction 8x too long: t = 1, 1/2, 1/4 fail and t = 1/8 lands on 0.
  const GlobalObjective f = [](std::span<const double> x) { return 0.5 * x[0] * x[0]; };
  const std::vector<double> x{1.0};
  const std::vector<double> dir{-8.0};
  const std::vector<double> g{1.0};
  const LineSearchResult r = line_search_step(x, dir, 0.5, g, 0.49, 0.5, f);
  EXPECT_EQ(r.steps, 3u);
  EXPECT_DOUBLE_EQ(r.x[0], 0.0);
}

TEST(LineSearch, GivesUpAfterTheStepLimit) {
  // Every trial point is worse than x = 0, however short the step.
  const GlobalObjective f = [](std::span<const double> x) { return x[0] == 0.0 ? 0.0 : 1.0; };
  const std::vector<double> x{0.0};
  const std::vector<double> dir{1.0};
  const std::vector<double> g{-1.0};
  EXPECT_THROW(line_search_step(x, dir, 0.0, g, 0.49, 0.5, f), NumericalError);
}

class MatchesReference : public ::testing::TestWithParam<CompressorKind> {};

TEST_P(MatchesReference, FedNLOptionB) {
  const auto shards = testing::random_shards(4, 6, 30, 99);
  const RunConfig cfg = base_config(6, 4, GetParam(), 8);
  expect_trajectories_close(testing::grad_norms(simulate(cfg, shards)),
                            testing::reference_fednl(cfg, shards));
}

TEST_P(MatchesReference, FedNLPP) {
  const auto shards = testing::random_shards(5, 5, 30, 17);
  RunConfig cfg = base_config(5, 5, GetParam(), 6);
  cfg.algorithm = Algorithm::kFedNLPP;
  cfg.tau = 2;
  expect_trajectories_close(testing::grad_norms(simulate(cfg, shards)),
                            testing::reference_fednl_pp(cfg, shards));
}

INSTANTIATE_TEST_SUITE_P(AllCompressors, MatchesReference,
                         ::testing::Values(CompressorKind::kIdentity, CompressorKind::kTopK,
                                           CompressorKind::kTopLEK, CompressorKind::kRandK,
                                           CompressorKind::kRandSeqK, CompressorKind::kNatural),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(FedNL, ZeroInitAlsoMatchesReference) {
  const auto shards = testing::random_shards(3, 5, 25, 5);
  RunConfig cfg = base_config(5, 3, CompressorKind::kTopK, 5);
  cfg.h_init = HessianInit::kZero;
  expect_trajectories_close(testing::grad_norms(simulate(cfg, shards)),
                            testing::reference_fednl(cfg, shards));
}

TEST(FedNL, ExactInitConvergesFasterThanZero) {
  const auto shards = testing::random_shards(3, 6, 40, 6);
  RunConfig cfg = base_config(6, 3, CompressorKind::kTopK, 6);
  cfg.rounds = 8;
  cfg.h_init = HessianInit::kExact;
  const auto exact = testing::grad_norms(simulate(cfg, shards));
  cfg.h_init = HessianInit::kZero;
  const auto zero = testing::grad_norms(simulate(cfg, shards));
  EXPECT_LT(exact.back(), zero.back());
  EXPECT_LT(exact.back(), 1e-8);
}

TEST(FedNL, OptionAConverges) {
  const auto shards = testing::random_shards(4, 8, 50, 8);
  RunConfig cfg = base_config(8, 4, CompressorKind::kRandK, 8);
  // Option A is a local method: start from the exact Hessian.
  cfg.option = StepOption::kA;
  cfg.h_init = HessianInit::kExact;
  cfg.rounds = 100;
  const auto norms = testing::grad_norms(simulate(cfg, shards));
  EXPECT_LT(norms.back(), 1e-9 * norms.front());
}

TEST(FedNLLS, ObjectiveNeverIncreases) {
  const auto shards = testing::random_shards(4, 8, 50, 9);
  RunConfig cfg = base_config(8, 4, CompressorKind::kTopK, 8);
  cfg.algorithm = Algorithm::kFedNLLS;
  cfg.rounds = 40;
  const RunResult r = simulate(cfg, shards);
  for (std::size_t k = 1; k < r.rows.size(); ++k) {
    EXPECT_LE(r.rows[k].f_value, r.rows[k - 1].f_value * (1 + 1e-14)) << "round " << k;
  }
  EXPECT_LT(r.rows.back().grad_norm, 1e-10);
}

TEST(FedNL, GradTolStopsEarly) {
  const auto shards = testing::random_shards(2, 4, 30, 10);
  RunConfig cfg = base_config(4, 2, CompressorKind::kIdentity, 0);
  cfg.rounds = 100;
  cfg.grad_tol = 1e-6;
  const RunResult r = simulate(cfg, shards);
  EXPECT_LT(r.rows.size(), 20u);
  EXPECT_LE(r.rows.back().grad_norm, 1e-6);
  for (std::size_t k = 0; k + 1 < r.rows.size(); ++k) EXPECT_GT(r.rows[k].grad_norm, 1e-6);
}

TEST(MakeClient, RejectsDimensionMismatch) {
  Prg prg(1);
  const auto shard = testing::random_shard(5, 10, prg);
  RunConfig cfg = base_config(4, 1, CompressorKind::kIdentity, 0);
  EXPECT_THROW(make_client(0, shard, cfg), ConfigError);
}

}  // namespace
}  // namespace fednl
