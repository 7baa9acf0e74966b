#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

namespace hapnet {

// Deterministic generator with portable uniform/normal draws (the standard
// distributions are implementation-defined, the raw engine is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

// Independent stream derived from a base seed and a stream tag.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(seed ^ splitmix64(stream + 0x9E3779B97F4A7C15ull)));
}

// Root of all run randomness: parameter initialization and data order are
// pure functions of the seed passed here.
struct SeedBundle {
  std::uint64_t seed = 0;
  Rng params() const { return derive_rng(seed, 1); }
  Rng data(std::uint64_t epoch) const { return derive_rng(seed, 1000 + epoch); }
  Rng augment(std::uint64_t step) const { return derive_rng(seed, (1ull << 40) + step); }
};

inline SeedBundle seed_all(std::uint64_t seed) { return SeedBundle{seed}; }

}  // namespace hapnet
