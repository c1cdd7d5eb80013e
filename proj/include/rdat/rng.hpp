#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace rdat {

using Rng = std::mt19937_64;

// Mixes a base seed with a path of integer tags (epoch, batch, purpose, ...)
// into an independent stream seed. Every random draw in the library flows
// from the experiment seed through this function.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

// Uniform on the open interval (0, 1), built from the top 53 bits.
double uniform_open(Rng& rng);
// Uniform on the open interval (lo, hi).
double uniform_open(Rng& rng, double lo, double hi);
double standard_normal(Rng& rng);
// Uniform integer in [0, bound).
std::size_t uniform_index(Rng& rng, std::size_t bound);

// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t k);

// Purpose tags for derive_seed, kept distinct so streams never collide.
namespace stream {
inline constexpr std::uint64_t kSynthGraph = 0x11;
inline constexpr std::uint64_t kSynthSeries = 0x12;
inline constexpr std::uint64_t kModelInit = 0x21;
inline constexpr std::uint64_t kShuffle = 0x22;
inline constexpr std::uint64_t kPgdInit = 0x31;
inline constexpr std::uint64_t kSelection = 0x32;
inline constexpr std::uint64_t kPolicyInit = 0x41;
inline constexpr std::uint64_t kPolicySample = 0x42;
inline constexpr std::uint64_t kRewardDelta = 0x43;
inline constexpr std::uint64_t kBaseline = 0x44;
inline constexpr std::uint64_t kDefense = 0x51;
inline constexpr std::uint64_t kEvaluation = 0x61;
}  // namespace stream

}  // namespace rdat
