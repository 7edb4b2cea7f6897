#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace amortenc {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Counter-based generator: the i-th draw is a pure function of (key, i), so
// streams are reproducible across platforms and can be forked by name.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : key_(splitmix64(seed)) {}

  // Independent child stream; same (seed, stream) always yields the same draws.
  CounterRng fork(std::uint64_t stream) const {
    CounterRng child(0);
    child.key_ = splitmix64(key_ ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
    return child;
  }

  std::uint64_t next_u64() { return splitmix64(key_ + 0xD1B54A32D192ED03ULL * counter_++); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    const unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::size_t>(wide >> 64);
  }

  bool coin(double p_true = 0.5) { return uniform() < p_true; }

  // Box-Muller; one normal per pair of uniforms keeps the draw count fixed.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace amortenc
