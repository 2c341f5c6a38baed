#pragma once

// Counter-based random streams. Every stream is identified by a 64-bit key;
// draws are pure functions of (key, counter), so forking a stream per
// (seed, sequence index) gives reproducible data no matter how work is
// scheduled across threads.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace coinlab {

namespace detail {

// SplitMix64 finalizer; bijective on 64-bit words.
inline uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : key_(detail::mix64(seed)) {}

  // Child stream; independent of the parent's counter position.
  RandomStream fork(uint64_t label) const {
    RandomStream child(0);
    child.key_ = detail::mix64(key_ ^ detail::mix64(label + 0xA0761D6478BD642Full));
    return child;
  }

  uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log argument.
  double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, std^2) with draws beyond two standard deviations rejected.
  double truncated_normal(double std_dev) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= 2.0) return z * std_dev;
    }
  }

  // Marsaglia-Tsang; boosted for shape < 1.
  double gamma(double shape) {
    if (shape < 1.0) {
      double u = uniform_pos();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform_pos();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double beta(double alpha, double beta_param) {
    double ga = gamma(alpha);
    double gb = gamma(beta_param);
    return ga / (ga + gb);
  }

  // Index drawn proportionally to non-negative weights.
  size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace coinlab
