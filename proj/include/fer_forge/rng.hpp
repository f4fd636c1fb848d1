#pragma once

#include <cstdint>

namespace fer {

// Counter-based seed splitting. Every random stream in the toolkit is derived
// from one root seed plus a (stream, counter) pair, so results never depend on
// the order in which streams are consumed.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class SeedStream : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kDropout = 3,
  kTree = 4,
  kSplit = 5,
  kGradcheck = 6,
  kSynthetic = 7,
};

inline constexpr std::uint64_t derive_seed(std::uint64_t root, SeedStream stream,
                                           std::uint64_t counter = 0) noexcept {
  return splitmix64(splitmix64(root ^ splitmix64(static_cast<std::uint64_t>(stream))) + counter);
}

inline constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t counter) noexcept {
  return splitmix64(parent + splitmix64(counter + 0x632BE59BD9B4E019ULL));
}

// Uniform double in [0, 1) for element `index` of the stream named by `seed`.
inline constexpr double counter_uniform(std::uint64_t seed, std::uint64_t index) noexcept {
  return static_cast<double>(splitmix64(seed ^ splitmix64(index)) >> 11) * 0x1.0p-53;
}

}  // namespace fer
