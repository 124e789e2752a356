#include "fednl/compressors.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fednl/errors.h"

namespace fednl {

namespace {

constexpr std::array<std::string_view, 6> kNames = {
    "identity", "topk", "toplek", "randk", "randseqk", "natural"};

bool all_zero(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return v == 0.0; });
}

void require_k(std::size_t k, std::size_t w) {
  if (k < 1 || k > w) {
    throw std::invalid_argument("compressor: k=" + std::to_string(k) +
                                " outside [1, " + std::to_string(w) + "]");
  }
}

void require_layout(std::span<const double> x, PackedLayout layout) {
  if (x.size() != layout.length) {
    throw std::invalid_argument("compressor: input length does not match layout");
  }
}

CompressedDelta empty_delta(CompressorKind kind, PackedLayout layout) {
  CompressedDelta out;
  out.kind = kind;
  out.length = layout.length;
  out.order = layout.order;
  return out;
}

// Candidate ordering for the Top family: larger key first, then smaller
// index.
struct Candidate {
  double key;
  std::uint32_t index;
};

bool better(const Candidate& a, const Candidate& b) {
  return a.key > b.key || (a.key == b.key && a.index < b.index);
}

// The k best candidates, best first. A bounded min-heap keeps the k best
// seen so far; its root is the worst of them.
std::vector<Candidate> top_candidates(std::span<const double> x, PackedLayout layout,
                                      std::size_t k, TopRanking ranking) {
  const std::vector<double> weights =
      ranking == TopRanking::kWeighted ? layout.weights() : std::vector<double>{};
  auto key_of = [&](std::size_t t) {
    const double sq = x[t] * x[t];
    return ranking == TopRanking::kWeighted ? weights[t] * sq : sq;
  };

  std::vector<Candidate> heap;
  heap.reserve(k);
  for (std::size_t t = 0; t < x.size(); ++t) {
    const Candidate c{key_of(t), static_cast<std::uint32_t>(t)};
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end(), better);
    } else if (better(c, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), better);
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end(), better);
    }
  }
  std::sort(heap.begin(), heap.end(), better);
  return heap;
}

CompressedDelta take_prefix(std::span<const double> x, PackedLayout layout,
                            CompressorKind kind, std::span<const Candidate> ranked,
                            std::size_t count) {
  CompressedDelta out = empty_delta(kind, layout);
  out.indices.reserve(count);
  for (std::size_t m = 0; m < count; ++m) out.indices.push_back(ranked[m].index);
  std::sort(out.indices.begin(), out.indices.end());
  out.values.reserve(count);
  for (std::uint32_t t : out.indices) out.values.push_back(x[t]);
  return out;
}

CompressedDelta scaled_selection(std::span<const double> x, PackedLayout layout,
                                 CompressorKind kind, std::vector<std::uint32_t> indices) {
  CompressedDelta out = empty_delta(kind, layout);
  const double scale =
      static_cast<double>(layout.length) / static_cast<double>(indices.size());
  out.values.reserve(indices.size());
  for (std::uint32_t t : indices) out.values.push_back(scale * x[t]);
  out.indices = std::move(indices);
  return out;
}

}  // namespace

std::string_view to_string(CompressorKind kind) {
  return kNames.at(static_cast<std::size_t>(kind));
}

CompressorKind compressor_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<CompressorKind>(i);
  }
  throw std::invalid_argument("unknown compressor: " + std::string(name));
}

bool is_top_family(CompressorKind kind) {
  return kind == CompressorKind::kTopK || kind == CompressorKind::kTopLEK;
}

bool is_rand_family(CompressorKind kind) {
  return kind == CompressorKind::kRandK || kind == CompressorKind::kRandSeqK;
}

bool is_dense_kind(CompressorKind kind) {
  return kind == CompressorKind::kIdentity || kind == CompressorKind::kNatural;
}

void CompressorSpec::validate(std::size_t w) const {
  if (is_top_family(kind) || is_rand_family(kind)) require_k(k, w);
}

double CompressorSpec::delta(std::size_t w) const {
  if (is_top_family(kind) || is_rand_family(kind)) {
    return static_cast<double>(k) / static_cast<double>(w);
  }
  return 1.0;
}

double CompressorSpec::omega(std::size_t w) const {
  switch (kind) {
    case CompressorKind::kRandK:
    case CompressorKind::kRandSeqK:
      return static_cast<double>(w) / static_cast<double>(k) - 1.0;
    case CompressorKind::kNatural:
      return 1.0 / 8.0;
    default:
      return 0.0;
  }
}

std::vector<double> PackedLayout::weights() const {
  std::vector<double> w(length, 1.0);
  if (order == 0) return w;
  std::size_t t = 0;
  for (std::size_t j = 0; j < order; ++j) {
    for (std::size_t i = 0; i <= j; ++i, ++t) w[t] = (i == j) ? 1.0 : 2.0;
  }
  return w;
}

CompressedDelta compress_identity(std::span<const double> x, PackedLayout layout) {
  require_layout(x, layout);
  CompressedDelta out = empty_delta(CompressorKind::kIdentity, layout);
  out.values.assign(x.begin(), x.end());
  return out;
}

CompressedDelta compress_topk(std::span<const double> x, PackedLayout layout, std::size_t k,
                              TopRanking ranking) {
  require_layout(x, layout);
  require_k(k, layout.length);
  if (all_zero(x)) return empty_delta(CompressorKind::kTopK, layout);
  const auto ranked = top_candidates(x, layout, k, ranking);
  return take_prefix(x, layout, CompressorKind::kTopK, ranked, k);
}

namespace {

TopLekPlan plan_from_ranked(std::span<const double> x, PackedLayout layout, std::size_t k,
                            std::span<const Candidate> ranked) {
  const std::vector<double> weights = layout.weights();
  double total = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) total += weights[t] * x[t] * x[t];

  // kept[t] = fraction of the energy captured by the t best entries; the
  // residual ratio of Top-t is 1 - kept[t].
  std::vector<double> kept(k + 1, 0.0);
  double prefix = 0.0;
  for (std::size_t m = 0; m < k; ++m) {
    const std::uint32_t t = ranked[m].index;
    prefix += weights[t] * x[t] * x[t];
    kept[m + 1] = prefix / total;
  }

  const double target = static_cast<double>(k) / static_cast<double>(layout.length);
  // Walk K = k, k-1, ..., 0 and stop at the first K whose residual reaches
  // 1 - k/w. kept[0] = 0 guarantees termination.
  std::size_t lo = k;
  while (kept[lo] > target) --lo;
  if (lo == k) {
    // Either the residual matches exactly or no larger K is available.
    return {k, k, 1.0};
  }
  const std::size_t hi = lo + 1;
  const double p = (kept[hi] - target) / (kept[hi] - kept[lo]);
  return {lo, hi, std::clamp(p, 0.0, 1.0)};
}

}  // namespace

TopLekPlan toplek_plan(std::span<const double> x, PackedLayout layout, std::size_t k,
                       TopRanking ranking) {
  require_layout(x, layout);
  require_k(k, layout.length);
  if (all_zero(x)) return {0, 0, 1.0};
  const auto ranked = top_candidates(x, layout, k, ranking);
  return plan_from_ranked(x, layout, k, ranked);
}

CompressedDelta compress_toplek(std::span<const double> x, PackedLayout layout,
                                std::size_t k, Prg& prg, TopRanking ranking) {
  require_layout(x, layout);
  require_k(k, layout.length);
  if (all_zero(x)) return empty_delta(CompressorKind::kTopLEK, layout);
  const auto ranked = top_candidates(x, layout, k, ranking);
  const TopLekPlan plan = plan_from_ranked(x, layout, k, ranked);

  std::size_t count = plan.k_high;
  if (plan.p_low >= 1.0) {
    count = plan.k_low;
  } else if (plan.p_low > 0.0 && prg.uniform01() < plan.p_low) {
    count = plan.k_low;
  }
  return take_prefix(x, layout, CompressorKind::kTopLEK, ranked, count);
}

std::vector<std::uint32_t> sample_randk_indices(std::size_t w, std::size_t k, Prg& prg) {
  require_k(k, w);
  std::vector<std::uint32_t> pool(w);
  std::iota(pool.begin(), pool.end(), 0u);
  // Partial Fisher-Yates: the first k slots become a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(prg.uniform_below(w - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<std::uint32_t> sample_randseqk_indices(std::size_t w, std::size_t k, Prg& prg) {
  require_k(k, w);
  const auto start = static_cast<std::size_t>(prg.uniform_below(w));
  std::vector<std::uint32_t> out;
  out.reserve(k);
  // {s, s+1, ..., s+k-1} mod w in ascending order: the wrapped head first.
  const std::size_t tail_end = std::min(start + k, w);
  const std::size_t wrapped = start + k - tail_end;
  for (std::size_t t = 0; t < wrapped; ++t) out.push_back(static_cast<std::uint32_t>(t));
  for (std::size_t t = start; t < tail_end; ++t) out.push_back(static_cast<std::uint32_t>(t));
  return out;
}

CompressedDelta compress_randk(std::span<const double> x, PackedLayout layout,
                               std::size_t k, Prg& prg) {
  require_layout(x, layout);
  require_k(k, layout.length);
  if (all_zero(x)) return empty_delta(CompressorKind::kRandK, layout);
  return scaled_selection(x, layout, CompressorKind::kRandK,
                          sample_randk_indices(layout.length, k, prg));
}

CompressedDelta compress_randseqk(std::span<const double> x, PackedLayout layout,
                                  std::size_t k, Prg& prg) {
  require_layout(x, layout);
  require_k(k, layout.length);
  if (all_zero(x)) return empty_delta(CompressorKind::kRandSeqK, layout);
  return scaled_selection(x, layout, CompressorKind::kRandSeqK,
                          sample_randseqk_indices(layout.length, k, prg));
}

double natural_round(double t, Prg& prg) {
  if (!std::isfinite(t)) throw NumericalError("natural compressor: non-finite input");
  if (t == 0.0) return 0.0;
  const double mag = std::abs(t);
  int exp = 0;
  const double mant = std::frexp(mag, &exp);  // mag = mant * 2^exp, mant in [0.5, 1)
  double low = 0.0;
  double high = 0.0;
  if (exp - 1 < -1022) {
    // Subnormal input: round between 0 and the smallest normal power.
    high = std::ldexp(1.0, -1022);
  } else {
    low = std::ldexp(1.0, exp - 1);
    if (mant == 0.5) return t;
    if (exp - 1 == 1023) throw NumericalError("natural compressor: overflow");
    high = 2.0 * low;
  }
  const double p_up = (mag - low) / (high - low);
  const double out = prg.uniform01() < p_up ? high : low;
  if (out == 0.0) return 0.0;
  return t < 0.0 ? -out : out;
}

std::uint16_t natural_encode(double v) {
  if (v == 0.0) return 0;
  int exp = 0;
  const double mant = std::frexp(std::abs(v), &exp);
  const int biased = exp - 1 + 1023;
  if (mant != 0.5 || biased < 1 || biased > 2046) {
    throw std::invalid_argument("natural_encode: value is not a normal power of two");
  }
  const std::uint16_t sign = std::signbit(v) ? 1 : 0;
  return static_cast<std::uint16_t>((sign << 11) | static_cast<std::uint16_t>(biased));
}

double natural_decode(std::uint16_t code) {
  const int biased = code & 0x7FF;
  if (biased == 0) return 0.0;
  if (biased == 0x7FF) throw std::invalid_argument("natural_decode: reserved exponent");
  const double mag = std::ldexp(1.0, biased - 1023);
  return (code & 0x800) ? -mag : mag;
}

CompressedDelta compress_natural(std::span<const double> x, PackedLayout layout, Prg& prg) {
  require_layout(x, layout);
  CompressedDelta out = empty_delta(CompressorKind::kNatural, layout);
  out.values.resize(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) out.values[t] = natural_round(x[t], prg);
  return out;
}

CompressedDelta compress(std::span<const double> x, PackedLayout layout,
                         const CompressorSpec& spec, Prg& prg) {
  switch (spec.kind) {
    case CompressorKind::kIdentity:
      return compress_identity(x, layout);
    case CompressorKind::kTopK:
      return compress_topk(x, layout, spec.k, spec.ranking);
    case CompressorKind::kTopLEK:
      return compress_toplek(x, layout, spec.k, prg, spec.ranking);
    case CompressorKind::kRandK:
      return compress_randk(x, layout, spec.k, prg);
    case CompressorKind::kRandSeqK:
      return compress_randseqk(x, layout, spec.k, prg);
    case CompressorKind::kNatural:
      return compress_natural(x, layout, prg);
  }
  throw std::invalid_argument("compress: unknown compressor kind");
}

CompressedDelta compress(const DenseMatrix& diff, const CompressorSpec& spec, Prg& prg) {
  const DenseVector packed = pack_upper(diff);
  return compress(packed, PackedLayout::symmetric(diff.rows()), spec, prg);
}

DenseVector decompress(const CompressedDelta& delta) {
  if (is_dense_kind(delta.kind)) {
    if (delta.values.size() != delta.length) {
      throw std::invalid_argument("decompress: dense delta has wrong length");
    }
    return delta.values;
  }
  DenseVector out(delta.length, 0.0);
  for (std::size_t m = 0; m < delta.indices.size(); ++m) {
    if (delta.indices[m] >= delta.length) throw std::out_of_range("decompress: index >= w");
    out[delta.indices[m]] = delta.values[m];
  }
  return out;
}

void apply_delta(DenseMatrix& h, const CompressedDelta& delta, double alpha) {
  if (!h.square() || packed_size(h.rows()) != delta.length) {
    throw std::invalid_argument("apply_delta: delta does not match matrix order");
  }
  const std::size_t d = h.rows();
  if (is_dense_kind(delta.kind)) {
    if (delta.values.size() != delta.length) {
      throw std::invalid_argument("apply_delta: dense delta has wrong length");
    }
    std::size_t t = 0;
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i <= j; ++i, ++t) {
        const double v = alpha * delta.values[t];
        h(i, j) += v;
        if (i != j) h(j, i) += v;
      }
    }
    return;
  }
  if (delta.indices.size() != delta.values.size()) {
    throw std::invalid_argument("apply_delta: index/value count mismatch");
  }
  for (std::size_t m = 0; m < delta.indices.size(); ++m) {
    const std::size_t t = delta.indices[m];
    if (t >= delta.length) throw std::out_of_range("apply_delta: index >= w");
    const auto [i, j] = upper_tri_unpack(t, d);
    const double v = alpha * delta.values[m];
    h(i, j) += v;
    if (i != j) h(j, i) += v;
  }
}

std::size_t wire_size_bytes(CompressorKind kind, std::size_t entries, IndexMode mode) {
  std::size_t body = 0;
  switch (kind) {
    case CompressorKind::kIdentity:
      body = 8 * entries;
      break;
    case CompressorKind::kNatural:
      body = (12 * entries + 7) / 8;
      break;
    case CompressorKind::kTopK:
    case CompressorKind::kTopLEK:
      body = 12 * entries;
      break;
    case CompressorKind::kRandK:
    case CompressorKind::kRandSeqK:
      body = (mode == IndexMode::kReconstruct ? 8 : 12) * entries;
      break;
  }
  return kDeltaHeaderBytes + body;
}

std::size_t wire_size_bytes(const CompressedDelta& delta, IndexMode mode) {
  return wire_size_bytes(delta.kind, delta.entry_count(), mode);
}

}  // namespace fednl
