#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace metaloop {

/// Seeded random stream with fixed value mappings. std::mt19937_64 supplies
/// the bits; the uniform and normal transforms are spelled out here so the
/// produced doubles do not depend on the standard library's distribution
/// implementations, which keeps runs reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t below(std::uint64_t n) { return n ? gen_() % n : 0; }

  /// Independent stream for a sub-task; mixes the label into the state.
  Rng fork(std::uint64_t label) {
    std::uint64_t x = gen_() ^ (label * 0x9e3779b97f4a7c15ull);
    // splitmix64 finalizer
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return Rng(x);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace metaloop
