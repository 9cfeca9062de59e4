#pragma once

// Deterministic RNG helpers. std::mt19937_64 sequences are pinned by the
// standard, but the <random> distributions are not, so everything that
// must regenerate byte-identically uses the raw engine plus these
// fixed-formula draws.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace pme {

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform integer in [lo, hi], inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(engine_() % span);
  }

  // uniform double in [0, 1)
  double uniform() { return double(engine_() >> 11) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (one value per call; the pair's twin is
  // discarded to keep the draw count predictable)
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[size_t(uniform_int(0, int64_t(v.size()) - 1))];
  }

  // Fisher-Yates over indices; fixed order of draws
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = int(uniform_int(0, i));
      std::swap(p[i], p[j]);
    }
    return p;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pme
