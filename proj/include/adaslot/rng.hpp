#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace adaslot::rng {

// Counter-based deterministic RNG.  Every draw is a pure function of
// (seed, stream, index), so independent consumers never interact and any
// draw can be replayed without holding state.  The mixer is the SplitMix64
// finalizer applied to a combined 64-bit counter.

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derive a stream id from a label, e.g. stream("gumbel") or stream("init.mu").
inline constexpr std::uint64_t stream(std::string_view label) {
  // FNV-1a, then one extra mix round for avalanche.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

// Combine sub-counters into one stream (e.g. per-step, per-image draws).
inline constexpr std::uint64_t substream(std::uint64_t base, std::uint64_t a,
                                         std::uint64_t b = 0) {
  return mix64(base ^ mix64(a ^ 0x9e3779b97f4a7c15ULL) ^
               mix64(mix64(b) + 0x632be59bd9b4e019ULL));
}

// Raw 64 uniform bits for (seed, stream, index).
inline constexpr std::uint64_t bits(std::uint64_t seed, std::uint64_t strm,
                                    std::uint64_t index) {
  return mix64(mix64(seed ^ 0x5851f42d4c957f2dULL) ^ mix64(strm) ^
               mix64(index + 0x14057b7ef767814fULL));
}

// Uniform double in [0, 1).  53 mantissa bits.
inline double uniform(std::uint64_t seed, std::uint64_t strm,
                      std::uint64_t index) {
  return static_cast<double>(bits(seed, strm, index) >> 11) * 0x1.0p-53;
}

// Uniform double in [lo, hi).
inline double uniform(std::uint64_t seed, std::uint64_t strm,
                      std::uint64_t index, double lo, double hi) {
  return lo + (hi - lo) * uniform(seed, strm, index);
}

// Uniform integer in [0, n).  n must be > 0.  Uses 64-bit multiply-shift;
// bias is < 2^-53 for the small n used here.
inline std::uint64_t below(std::uint64_t seed, std::uint64_t strm,
                           std::uint64_t index, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform(seed, strm, index) *
                                    static_cast<double>(n));
}

// Standard normal via Box-Muller.  Draw i consumes uniforms (2i, 2i+1) of
// the stream, so consecutive indices are independent.
inline double normal(std::uint64_t seed, std::uint64_t strm,
                     std::uint64_t index) {
  double u1 = uniform(seed, strm, 2 * index);
  double u2 = uniform(seed, strm, 2 * index + 1);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Standard Gumbel(0,1) noise: -log(-log(u)), u clamped away from {0,1}.
inline double gumbel(std::uint64_t seed, std::uint64_t strm,
                     std::uint64_t index) {
  double u = uniform(seed, strm, index);
  if (u < 1e-12) u = 1e-12;
  if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
  return -std::log(-std::log(u));
}

}  // namespace adaslot::rng
