#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fednl/oracle.h"

namespace fednl {

struct SparseEntry {
  std::uint32_t index = 0;  // 1-based feature index
  double value = 0.0;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

struct RawDataset {
  std::size_t d_raw = 0;  // largest feature index seen
  std::vector<std::vector<SparseEntry>> rows;
  std::vector<double> labels;

  std::size_t size() const { return rows.size(); }
  // Zero-filled dense copy of one row, length d_raw.
  std::vector<double> dense_row(std::size_t r) const;

  friend bool operator==(const RawDataset&, const RawDataset&) = default;
};

// Parses LIBSVM text ("label idx:val idx:val ...", one sample per line).
// Works on any contiguous byte view, e.g. a memory-mapped file.
RawDataset parse_libsvm(std::string_view bytes);
RawDataset load_libsvm(const std::filesystem::path& path);
// Round-trippable writer: values printed with 17 significant digits.
std::string to_libsvm(const RawDataset& ds);
void save_libsvm(const RawDataset& ds, const std::filesystem::path& path);

struct LabelMapping {
  double negative = -1.0;  // raw label mapped to -1
  double positive = 1.0;   // raw label mapped to +1
  bool notice = false;     // true when the pair was neither {-1,1} nor {0,1}
};

// Maps the two distinct labels onto {-1, +1}. Throws ConfigError unless
// there are exactly two distinct labels.
LabelMapping normalize_labels(RawDataset& ds);

struct ShardPlan {
  std::uint32_t clients = 0;
  std::size_t per_client = 0;  // n_i = floor(m / n)
  std::size_t dropped = 0;     // m - n * n_i
  std::vector<std::size_t> permutation;
};

// Fisher-Yates permutation of the m samples with the seeded shuffle stream.
ShardPlan plan_shards(std::size_t m, std::uint32_t clients, std::uint64_t seed);

// Appends the intercept feature (last coordinate, value 1), folds the +-1
// labels into the columns, and splits the shuffled samples into `clients`
// equal shards; the remainder is dropped.
std::vector<std::shared_ptr<const ClientShard>> augment_and_shard(const RawDataset& ds,
                                                                  std::uint32_t clients,
                                                                  std::uint64_t seed,
                                                                  double lambda);

// One shard from an already split file, samples kept in file order. `dim`
// (intercept included) may exceed d_raw + 1 when the file happens not to
// mention the highest features; 0 means d_raw + 1.
std::shared_ptr<const ClientShard> make_shard(const RawDataset& ds, double lambda,
                                              std::size_t dim = 0);

// Raw per-client datasets following the same plan, for writing shard files.
std::vector<RawDataset> split_dataset(const RawDataset& ds, std::uint32_t clients,
                                      std::uint64_t seed);

// Features i.i.d. uniform in [-1, 1]; labels sign(margin_scale * a^T x* + N(0,1))
// with x* drawn once, uniform in [-1, 1]^d.
RawDataset generate_synthetic(std::size_t d, std::size_t m, std::uint64_t seed,
                              double margin_scale = 1.0);

}  // namespace fednl
