// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "hyperdec/tensor.hpp"

namespace hyperdec {

/// Seeded generator. Independent streams are derived by name so that adding
/// a consumer of randomness does not shift any other stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// A generator for stream `name` of `seed`; stable across runs.
  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

  float uniform(float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(engine_); }
  float normal(float mean, float stddev) { return std::normal_distribution<float>(mean, stddev)(engine_); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  /// Uniform integer in [lo, hi].
  std::size_t between(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  double unit() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

Tensor uniform_tensor(Shape shape, float bound, Rng& rng, bool requires_grad = false);
Tensor normal_tensor(Shape shape, float stddev, Rng& rng, bool requires_grad = false);

}  // namespace hyperdec
