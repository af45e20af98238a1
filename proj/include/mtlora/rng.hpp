// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace mtlora {

// Counter-based generator: the i-th draw of a stream is a pure function of
// (seed, stream, i), so independent consumers can fork their own streams by
// name and stay reproducible regardless of construction order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal (Box-Muller, two draws per call).
  double normal();
  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n);

  Rng fork(std::string_view label) const;
  Rng fork(std::uint64_t id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// 64-bit FNV-1a; used to turn names into stream ids.
std::uint64_t hash_name(std::string_view name);

}  // namespace mtlora
