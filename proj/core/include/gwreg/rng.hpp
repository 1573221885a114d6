#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "gwreg/tensor.hpp"

namespace gwreg {

/// Seeded RNG with explicit distribution algorithms.
///
/// std::normal_distribution is implementation-defined, so normals are drawn
/// with Box-Muller on top of mt19937_64: streams are reproducible across
/// standard libraries, not just across runs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
  }
  void fill_uniform(Tensor& t, double lo, double hi) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed plus a tag, so that
/// parallel consumers (per-group generation, per-epoch noise, ...) get
/// schedule-independent streams. splitmix64-style mixing.
inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index = 0) {
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace gwreg
