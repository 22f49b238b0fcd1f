#pragma once

#include <cmath>
#include <cstdint>

#include "zssl/common.hpp"

namespace zssl {

// Deterministic splitmix64 stream. Self-contained so results are identical
// across platforms and standard-library versions; std:: distributions are
// implementation-defined and would break run reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // Murmur-style combine, good enough to decorrelate derived streams.
    a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
    return a;
  }

  // Independent stream for (seed, tag, indices...). Used to pin per-sample
  // and per-step randomness regardless of execution order.
  template <typename... Ids>
  static Rng stream(std::uint64_t seed, std::uint64_t tag, Ids... ids) {
    std::uint64_t s = mix(seed, tag);
    ((s = mix(s, static_cast<std::uint64_t>(ids))), ...);
    return Rng(s);
  }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [0,n).
  int uniform_int(int n) {
    if (n <= 0) throw ConfigError("Rng::uniform_int: n must be positive");
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stream tags; keep values stable, they pin reproducibility of saved runs.
namespace rng_tag {
inline constexpr std::uint64_t kDataGen = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kWeakAug = 3;
inline constexpr std::uint64_t kStrongAug = 4;
inline constexpr std::uint64_t kCutMix = 5;
inline constexpr std::uint64_t kDropout = 6;
inline constexpr std::uint64_t kShuffle = 7;
inline constexpr std::uint64_t kReset = 8;
inline constexpr std::uint64_t kEmbed = 9;
inline constexpr std::uint64_t kProbe = 10;
}  // namespace rng_tag

}  // namespace zssl
