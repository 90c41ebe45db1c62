#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace sinklab {

// Counter-based generator: the SplitMix64 finalizer applied to
// key + counter * golden-ratio increment. Output i depends only on
// (key, i), so streams can be replayed from any position and split into
// statistically independent child streams by re-keying. One stream per
// parameter tensor / per training step keeps initialization and batch
// order reproducible without carrying mutable state through checkpoints.
class CounterRng {
 public:
  explicit CounterRng(uint64_t key) : key_(key) {}

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  // Child stream keyed by an integer label.
  CounterRng fork(uint64_t label) const {
    return CounterRng(mix(key_ ^ mix(label + 0x632BE59BD9B4E019ull)));
  }

  // Child stream keyed by a string label (FNV-1a over the bytes).
  CounterRng fork(std::string_view label) const {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : label) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return fork(h);
  }

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  uint64_t uniform_int(uint64_t n) {
    uint64_t threshold = (0ull - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Box-Muller; the spare draw is cached so consecutive calls consume
  // the stream deterministically.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void fill_normal(T* out, int64_t n, double mean = 0.0, double stddev = 1.0) {
    for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(normal(mean, stddev));
  }

  template <typename T>
  void fill_uniform(T* out, int64_t n, double lo, double hi) {
    for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(uniform(lo, hi));
  }

  uint64_t key() const { return key_; }

 private:
  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  uint64_t key_;
  uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sinklab
