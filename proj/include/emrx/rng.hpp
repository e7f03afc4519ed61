#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace emrx {

// Deterministic random source built on splitmix64. Every consumer derives a
// named substream from (master seed, label), so the same seed reproduces the
// same initialization, dropout masks, and shuffles regardless of how many
// other streams were consumed in between.
class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t state) : state_(state) {}

  // Substream derivation: hash the master seed, then absorb the label bytes
  // one at a time through the same mixer. Distinct labels give unrelated
  // states.
  static Rng stream(std::uint64_t master_seed, std::string_view label) {
    std::uint64_t h = mix(master_seed + kGamma);
    for (unsigned char c : label) {
      h = mix(h + kGamma + c);
    }
    return Rng(h);
  }

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t state() const { return state_; }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace emrx
