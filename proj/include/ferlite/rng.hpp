#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ferlite {

// Counter-free splitmix64 stream. One u64 of state, so it serializes into
// checkpoints trivially and behaves identically on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed ^ kGolden)) {}

  static Rng from_state(std::uint64_t raw) {
    Rng r(0);
    r.state_ = raw;
    return r;
  }
  std::uint64_t state() const { return state_; }

  // Derive an independent stream from (seed, path...). Used to key dropout,
  // shuffling, augmentation and init streams so worker count and call order
  // outside the op never change the draws.
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix(seed ^ kGolden);
    for (std::uint64_t p : path) s = mix(s ^ mix(p + kGolden));
    return from_state(s);
  }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix_final(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call. The sine branch is discarded to keep the
  // stream position independent of call parity.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) { return n ? next_u64() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static std::uint64_t mix_final(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t mix(std::uint64_t z) { return mix_final(z + kGolden); }

  std::uint64_t state_;
};

}  // namespace ferlite
