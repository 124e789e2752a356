#pragma once

#include <cstdint>

namespace fednl {

// SplitMix64 finaliser, also used to derive stream seeds.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// SplitMix64 generator. Bit-identical output on every platform; both ends of
// a connection rebuild the same stream from a shared seed.
class Prg {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit constexpr Prg(std::uint64_t seed) : state_(seed) {}

  constexpr std::uint64_t next_u64() {
    state_ += kGamma;
    return splitmix64_mix(state_);
  }

  // Uniform integer in [0, bound) by rejection; bound must be > 0.
  constexpr std::uint64_t uniform_below(std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;  // 2^64 mod bound
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  // Uniform double in [0, 1) from the top 53 bits.
  constexpr double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  constexpr std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Seed of the compressor stream for one client in one round: the first
// output of a generator seeded with run_seed XOR (client_id * 2^32 + round).
constexpr std::uint64_t round_seed(std::uint64_t run_seed, std::uint32_t client_id,
                                   std::uint32_t round) {
  return Prg(run_seed ^ ((static_cast<std::uint64_t>(client_id) << 32) | round))
      .next_u64();
}

// Streams that do not belong to a client use reserved tags in the client-id
// slot so they never collide with a client's stream.
inline constexpr std::uint32_t kMasterStreamTag = 0xFFFFFFFFu;
inline constexpr std::uint32_t kShuffleStreamTag = 0xFFFFFFFEu;
inline constexpr std::uint32_t kSyntheticStreamTag = 0xFFFFFFFDu;

}  // namespace fednl
