#pragma once

// Deterministic random numbers. Every consumer derives a named substream from
// one root seed, so the full pipeline (data, masks, init, probe) replays
// bit-identically from a single integer. std distributions are avoided on
// purpose: their output is implementation-defined, ours is pinned.

#include <array>
#include <cstdint>
#include <random>
#include <string_view>

namespace salt {

class Rng {
 public:
  explicit Rng(uint64_t seed);

  // Derive an independent child stream. The child depends only on this
  // stream's seed, the label, and the index, never on draw position.
  Rng fork(std::string_view label, uint64_t index = 0) const;

  uint64_t bits();                       // 64 raw bits
  double uniform();                      // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);  // [lo, hi)
  int64_t uniform_int(int64_t n);        // {0, ..., n-1}, n >= 1
  double normal();                       // standard normal (Box-Muller)
  // Normal scaled by `stddev` and redrawn until inside [lo, hi].
  double trunc_normal(double stddev, double lo, double hi);

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace salt
