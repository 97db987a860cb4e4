#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace glossrec {

// Counter-based generator (splitmix64 applied to seed + counter). Stateless
// apart from the counter, so streams are reproducible across platforms and
// easy to key by (seed, tag, index).
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Deterministic key derivation for sub-streams.
  static uint64_t combine(uint64_t a, uint64_t b) {
    return mix(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
  }

  uint64_t next_u64() { return mix(seed_ + 0x2545f4914f6cdd1dULL * ++counter_); }

  // Uniform in [0, 1).
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  uint64_t seed() const { return seed_; }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      auto j = static_cast<decltype(i)>(next_below(uint64_t(i + 1)));
      std::swap(first[i], first[j]);
    }
  }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;
};

// He-uniform draw bound for a layer with the given fan-in.
inline double he_uniform_limit(int fan_in) { return std::sqrt(6.0 / double(fan_in)); }

}  // namespace glossrec
