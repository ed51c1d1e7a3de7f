#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>

namespace fcpo {

// xoshiro256** seeded through splitmix64. The generator is fully specified
// here (no standard-library distributions) so that every stream is
// bit-reproducible across platforms and its state serializes as four words.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  // Derives an independent stream from (seed, name). All randomness in the
  // pipeline flows from one root seed through named substreams.
  static Rng substream(uint64_t seed, std::string_view name) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return Rng(seed ^ h);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    // Rejection sampling over the top bits keeps the draw unbiased.
    const uint64_t bound = ~uint64_t{0} - (~uint64_t{0} % static_cast<uint64_t>(n));
    uint64_t u;
    do {
      u = next_u64();
    } while (u >= bound);
    return static_cast<int>(u % static_cast<uint64_t>(n));
  }

  // Standard normal via the polar method. Stateless between calls, so the
  // serialized state below is the complete generator state.
  double normal() {
    while (true) {
      const double a = 2.0 * uniform() - 1.0;
      const double b = 2.0 * uniform() - 1.0;
      const double q = a * a + b * b;
      if (q > 0.0 && q < 1.0) return a * std::sqrt(-2.0 * std::log(q) / q);
    }
  }

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::array<uint64_t, 4> s_{};
};

}  // namespace fcpo
