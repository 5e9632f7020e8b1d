#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace cbnn {

// Streams that consume randomness. Part of the key, so two groups never share draws.
enum class Stream : std::uint64_t {
  init = 1,
  weight_noise = 2,
  bias_noise = 3,
  weight_stabilize = 4,
  bias_stabilize = 5,
  dropout = 6,
  shuffle = 7,
  synthetic = 8,
  verify = 9,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based generator: the state is a hash of (seed, layer, stream, step) plus a
// running counter. The sequence for a key does not depend on what other keys were
// consumed before, so evaluation order cannot change any draw.
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, std::uint64_t layer, Stream stream, std::uint64_t step)
      : key_(splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ layer) ^
                                   static_cast<std::uint64_t>(stream)) ^
                        step)) {}

  explicit KeyedRng(std::uint64_t seed) : key_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return splitmix64(key_ + 0xd1b54a32d192ed03ULL * counter_++); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool coin() { return (next_u64() >> 63) != 0; }

  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    // Lemire's multiply-shift; the bias is < 2^-64 * bound which is irrelevant here.
    __extension__ using u128 = unsigned __int128;
    return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * bound) >> 64);
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cbnn
