#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace disco {

// Counter-based generator: the i-th output is a pure function of (seed, i),
// so streams can be split into independent substreams without sharing state.
// Output mixing is the splitmix64 finalizer; normals use Box-Muller on two
// consecutive uniforms. Integer-only state makes the uniform sequence exact
// on every platform.
struct Rng {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  static constexpr std::uint64_t golden = 0x9e3779b97f4a7c15ull;

  static constexpr std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

  explicit Rng(std::uint64_t s = 0) : seed(s) {}

  std::uint64_t next_u64() { return mix(seed + golden * ++counter); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [lo, hi] inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + std::int64_t(next_u64() % std::uint64_t(hi - lo + 1));
  }

  // standard normal: sqrt(-2 log(1-u1)) * cos(2 pi u2)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Independent child stream; does not advance this stream.
  Rng split(std::uint64_t salt) const {
    Rng child(mix(seed ^ mix(salt + golden)));
    return child;
  }

  Rng split(std::string_view label) const { return split(hash(label)); }

  // FNV-1a, used for label-based stream splitting and content hashes
  static constexpr std::uint64_t hash(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
      h ^= std::uint64_t(static_cast<unsigned char>(c));
      h *= 0x100000001b3ull;
    }
    return h;
  }
};

} // namespace disco
