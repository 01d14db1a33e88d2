#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace halluc {

// Seeded generator whose derived distributions are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01();

  double normal(double mean, double stddev);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Stable per-item seed: the same (seed, item) always yields the same value,
// regardless of scheduling order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t item);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace halluc
