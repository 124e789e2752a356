#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "fednl/linalg.h"
#include "fednl/prg.h"

namespace fednl {

// Numeric values are part of the wire format.
enum class CompressorKind : std::uint8_t {
  kIdentity = 0,
  kTopK = 1,
  kTopLEK = 2,
  kRandK = 3,
  kRandSeqK = 4,
  kNatural = 5,
};

std::string_view to_string(CompressorKind kind);
CompressorKind compressor_from_string(std::string_view name);

bool is_top_family(CompressorKind kind);
bool is_rand_family(CompressorKind kind);
// Identity and Natural always carry all w coordinates.
bool is_dense_kind(CompressorKind kind);

// How TopK/TopLEK order candidates: raw |value|, or the symmetric-matrix
// energy weight * value^2 (off-diagonal packed entries count twice).
enum class TopRanking : std::uint8_t { kRaw = 0, kWeighted = 1 };

// Whether Rand-family indices travel on the wire or are rebuilt by the
// receiver from the shared per-round seed.
enum class IndexMode : std::uint8_t { kExplicit = 0, kReconstruct = 1 };

struct CompressorSpec {
  CompressorKind kind = CompressorKind::kIdentity;
  std::size_t k = 0;  // kept coordinates, Top/Rand families only
  TopRanking ranking = TopRanking::kRaw;

  // Throws std::invalid_argument unless 1 <= k <= w for Top/Rand kinds.
  void validate(std::size_t w) const;
  // Contraction parameter k/w (1 for Identity).
  double delta(std::size_t w) const;
  // Variance parameter: w/k - 1 for Rand kinds, 1/8 for Natural, 0 otherwise.
  double omega(std::size_t w) const;
};

// Coordinates a compressor sees. A packed symmetric matrix of order d has
// w = d(d+1)/2 coordinates whose energy weight is 1 on the diagonal and 2
// off it; a plain vector has unit weights.
struct PackedLayout {
  std::size_t length = 0;
  std::size_t order = 0;  // 0 for a plain vector

  static PackedLayout vector(std::size_t n) { return {n, 0}; }
  static PackedLayout symmetric(std::size_t d) { return {packed_size(d), d}; }

  std::vector<double> weights() const;
};

struct CompressedDelta {
  CompressorKind kind = CompressorKind::kIdentity;
  std::size_t length = 0;  // w
  std::size_t order = 0;   // d, or 0 for a plain vector
  // Strictly increasing packed indices. Empty for dense kinds, whose
  // `values` hold all w coordinates in packed order.
  std::vector<std::uint32_t> indices;
  std::vector<double> values;

  std::size_t entry_count() const { return values.size(); }

  friend bool operator==(const CompressedDelta&, const CompressedDelta&) = default;
};

CompressedDelta compress_identity(std::span<const double> x, PackedLayout layout);
CompressedDelta compress_topk(std::span<const double> x, PackedLayout layout, std::size_t k,
                              TopRanking ranking = TopRanking::kRaw);

// The two-outcome law of TopLEK: Top-`k_low` with probability `p_low`,
// otherwise Top-`k_high`.
struct TopLekPlan {
  std::size_t k_low = 0;
  std::size_t k_high = 0;
  double p_low = 1.0;
};
TopLekPlan toplek_plan(std::span<const double> x, PackedLayout layout, std::size_t k,
                       TopRanking ranking = TopRanking::kRaw);
CompressedDelta compress_toplek(std::span<const double> x, PackedLayout layout,
                                std::size_t k, Prg& prg,
                                TopRanking ranking = TopRanking::kRaw);

// Index sets drawn by the Rand family; the master calls these with the same
// seed to rebuild the client's selection. Results are sorted ascending.
std::vector<std::uint32_t> sample_randk_indices(std::size_t w, std::size_t k, Prg& prg);
std::vector<std::uint32_t> sample_randseqk_indices(std::size_t w, std::size_t k, Prg& prg);

CompressedDelta compress_randk(std::span<const double> x, PackedLayout layout,
                               std::size_t k, Prg& prg);
CompressedDelta compress_randseqk(std::span<const double> x, PackedLayout layout,
                                  std::size_t k, Prg& prg);

// Stochastic rounding of each coordinate to a neighbouring power of two.
CompressedDelta compress_natural(std::span<const double> x, PackedLayout layout, Prg& prg);
double natural_round(double t, Prg& prg);
// 12-bit sign + biased exponent code of a power of two (or zero).
std::uint16_t natural_encode(double v);
double natural_decode(std::uint16_t code);

CompressedDelta compress(std::span<const double> x, PackedLayout layout,
                         const CompressorSpec& spec, Prg& prg);
// Compresses the upper triangle of a symmetric matrix.
CompressedDelta compress(const DenseMatrix& diff, const CompressorSpec& spec, Prg& prg);

// Dense packed vector carried by the delta (zeros where nothing was kept).
DenseVector decompress(const CompressedDelta& delta);

// H[i,j] += alpha * v and H[j,i] += alpha * v for each carried entry.
void apply_delta(DenseMatrix& h, const CompressedDelta& delta, double alpha);

// Per-delta wire header: kind, mode, reserved u16, entry count u32.
inline constexpr std::size_t kDeltaHeaderBytes = 8;
std::size_t wire_size_bytes(const CompressedDelta& delta, IndexMode mode);
// Wire size of a delta with `entries` coordinates before it exists.
std::size_t wire_size_bytes(CompressorKind kind, std::size_t entries, IndexMode mode);

}  // namespace fednl
