#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sonoseg {

// All randomness in a run derives from one root seed via named sub-streams,
// so e.g. "init" draws stay identical when only "data" usage changes and
// ablation arms stay paired.
class Rng {
 public:
  Rng(uint64_t root_seed, const std::string& stream, uint64_t index = 0)
      : eng_(mix(root_seed, fnv1a(stream), index)) {}

  explicit Rng(uint64_t raw_seed) : eng_(raw_seed) {}

  uint64_t next_u64() { return eng_(); }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }

  // Inclusive bounds.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }

  // Rejection-sampled at +-2 sigma; the usual init scheme.
  double trunc_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (std::abs(v) <= 2.0 * stddev) return v;
    }
  }

  double rayleigh(double sigma) {
    double u = uniform(1e-12, 1.0);
    return sigma * std::sqrt(-2.0 * std::log(u));
  }

  bool bernoulli(double p) { return uniform(0.0, 1.0) < p; }

  // Fisher-Yates with explicit draws; stable across standard library versions,
  // unlike std::shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return eng_; }

  static uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  static uint64_t mix(uint64_t a, uint64_t b, uint64_t c) {
    // splitmix64 over the combined words
    uint64_t x = a;
    for (uint64_t w : {b, c}) {
      x += 0x9e3779b97f4a7c15ull + w;
      x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
      x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
      x = x ^ (x >> 31);
    }
    return x;
  }

  std::mt19937_64 eng_;
};

}  // namespace sonoseg
