#include "fednl/data.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fednl/errors.h"

namespace fednl {
namespace {

TEST(Libsvm, ParsesSparseRows) {
  const RawDataset ds = parse_libsvm("+1 1:0.5 3:-2\n-1 2:1e-3\n\n# comment\n1 4:7 # trailing\n");
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.d_raw, 4u);
  EXPECT_EQ(ds.labels, (std::vector<double>{1.0, -1.0, 1.0}));
  EXPECT_EQ(ds.rows[0], (std::vector<SparseEntry>{{1, 0.5}, {3, -2.0}}));
  EXPECT_EQ(ds.dense_row(1), (std::vector<double>{0.0, 1e-3, 0.0, 0.0}));
}

TEST(Libsvm, HandlesCrlfAndMissingFinalNewline) {
  const RawDataset ds = parse_libsvm("0 1:1\r\n1 2:2");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.rows[1], (std::vector<SparseEntry>{{2, 2.0}}));
}

void expect_parse_error(std::string_view text, std::size_t line) {
  try {
    parse_libsvm(text);
    FAIL() << "accepted: " << text;
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), line) << e.what();
  }
}

TEST(Libsvm, ReportsMalformedInputWithLine) {
  expect_parse_error("1 1:x\n", 1);
  expect_parse_error("1 1:1\n-1 0:1\n", 2);
  expect_parse_error("1 2:1 2:3\n", 1);
  expect_parse_error("1 3:1 2:3\n", 1);
  expect_parse_error("1 1:1\nfoo 1:1\n", 2);
  expect_parse_error("1 1\n", 1);
  expect_parse_error("1 1:1\n0 1:1\n2 1:1\n", 3);
}

TEST(Libsvm, WriterRoundTripsExactly) {
  RawDataset ds;
  ds.d_raw = 5;
  ds.rows = {{{1, 0.1}, {5, -1.0 / 3.0}}, {}, {{2, 6.02214076e23}}};
  ds.labels = {1.0, -1.0, 1.0};
  EXPECT_EQ(parse_libsvm(to_libsvm(ds)).rows, ds.rows);
  const auto path = std::filesystem::temp_directory_path() / "fednl_data_test.svm";
  save_libsvm(ds, path);
  const RawDataset back = load_libsvm(path);
  EXPECT_EQ(back.rows, ds.rows);
  EXPECT_EQ(back.labels, ds.labels);
  std::filesystem::remove(path);
}

TEST(Libsvm, MissingFileThrows) {
  EXPECT_THROW(load_libsvm("/nonexistent/fednl.svm"), Error);
}

TEST(Labels, ZeroOneMapsToPlusMinusOne) {
  RawDataset ds = parse_libsvm("0 1:1\n1 1:1\n0 1:2\n");
  const LabelMapping m = normalize_labels(ds);
  EXPECT_FALSE(m.notice);
  EXPECT_EQ(ds.labels, (std::vector<double>{-1.0, 1.0, -1.0}));
}

TEST(Labels, OtherPairsRaiseNotice) {
  RawDataset ds = parse_libsvm("2 1:1\n4 1:1\n");
  const LabelMapping m = normalize_labels(ds);
  EXPECT_TRUE(m.notice);
  EXPECT_EQ(m.negative, 2.0);
  EXPECT_EQ(m.positive, 4.0);
  EXPECT_EQ(ds.labels, (std::vector<double>{-1.0, 1.0}));
}

TEST(Labels, SingleClassIsRejected) {
  RawDataset ds = parse_libsvm("1 1:1\n1 1:2\n");
  EXPECT_THROW(normalize_labels(ds), ConfigError);
}

TEST(Sharding, PlanIsAPermutationWithRemainderDropped) {
  const ShardPlan p = plan_shards(103, 10, 5);
  EXPECT_EQ(p.per_client, 10u);
  EXPECT_EQ(p.dropped, 3u);
  std::vector<std::size_t> sorted = p.permutation;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(103);
  std::iota(iota.begin(), iota.end(), 0u);
  EXPECT_EQ(sorted, iota);
  EXPECT_EQ(plan_shards(103, 10, 5).permutation, p.permutation);
  EXPECT_NE(plan_shards(103, 10, 6).permutation, p.permutation);
}

TEST(Sharding, TooFewSamplesIsAConfigError) {
  EXPECT_THROW(plan_shards(3, 4, 0), ConfigError);
}

TEST(Sharding, ColumnsAreLabelledSamplesWithIntercept) {
  RawDataset ds = parse_libsvm("1 1:2 2:3\n-1 2:5\n1 1:-1\n-1 1:4 2:4\n");
  const auto shards = augment_and_shard(ds, 2, 11, 0.01);
  ASSERT_EQ(shards.size(), 2u);
  const ShardPlan plan = plan_shards(4, 2, 11);
  for (std::uint32_t c = 0; c < 2; ++c) {
    const DenseMatrix& b = shards[c]->design();
    ASSERT_EQ(b.rows(), 3u);
    ASSERT_EQ(b.cols(), 2u);
    EXPECT_EQ(shards[c]->lambda(), 0.01);
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t r = plan.permutation[c * 2 + j];
      const double y = ds.labels[r];
      const auto a = ds.dense_row(r);
      EXPECT_EQ(b(0, j), y * a[0]);
      EXPECT_EQ(b(1, j), y * a[1]);
      EXPECT_EQ(b(2, j), y);
    }
  }
}

TEST(Sharding, SplitFilesRebuildTheSameShards) {
  const RawDataset ds = generate_synthetic(6, 50, 3);
  const auto direct = augment_and_shard(ds, 4, 8, 1e-3);
  const auto files = split_dataset(ds, 4, 8);
  ASSERT_EQ(files.size(), 4u);
  for (std::size_t c = 0; c < 4; ++c) {
    const RawDataset reparsed = parse_libsvm(to_libsvm(files[c]));
    const auto shard = make_shard(reparsed, 1e-3, 7);
    EXPECT_EQ(shard->design(), direct[c]->design()) << "client " << c;
  }
}

TEST(Sharding, MakeShardPadsMissingFeatures) {
  const RawDataset ds = parse_libsvm("1 1:1\n-1 1:2\n");
  const auto shard = make_shard(ds, 0.0, 4);
  EXPECT_EQ(shard->dim(), 4u);
  EXPECT_EQ(shard->design()(3, 1), -1.0);
  EXPECT_EQ(shard->design()(1, 0), 0.0);
  EXPECT_THROW(make_shard(ds, 0.0, 1), ConfigError);
}

TEST(Synthetic, DeterministicBalancedAndInRange) {
  const RawDataset a = generate_synthetic(10, 2000, 42);
  EXPECT_EQ(a, generate_synthetic(10, 2000, 42));
  EXPECT_NE(a, generate_synthetic(10, 2000, 43));
  EXPECT_EQ(a.d_raw, 10u);
  std::size_t positive = 0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_TRUE(a.labels[r] == 1.0 || a.labels[r] == -1.0);
    positive += a.labels[r] > 0;
    for (double v : a.dense_row(r)) EXPECT_LE(std::abs(v), 1.0);
  }
  EXPECT_GT(positive, 400u);
  EXPECT_LT(positive, 1600u);
}

}  // namespace
}  // namespace fednl
