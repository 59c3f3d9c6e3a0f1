#include "salt/rng.hpp"

#include <cmath>
#include <numbers>

#include "salt/common.hpp"

namespace salt {

namespace {
// splitmix64: seed scrambler with good avalanche, used only for stream derivation.
uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

Rng Rng::fork(std::string_view label, uint64_t index) const {
  uint64_t child = splitmix64(seed_ ^ fnv1a64(label));
  child = splitmix64(child + 0x9e3779b97f4a7c15ull * (index + 1));
  return Rng(child);
}

uint64_t Rng::bits() { return gen_(); }

double Rng::uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::uniform_int(int64_t n) {
  check(n >= 1, ErrorKind::Contract, "uniform_int: n must be positive, got ", n);
  // Multiply-shift map of 64 random bits onto {0..n-1}; bias is O(n / 2^64).
  return static_cast<int64_t>((static_cast<__uint128_t>(gen_()) * static_cast<__uint128_t>(n)) >> 64);
}

double Rng::normal() {
  // Box-Muller; u is kept away from zero so the log stays finite.
  double u = 0.0;
  do {
    u = uniform();
  } while (u <= 0.0);
  const double v = uniform();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

double Rng::trunc_normal(double stddev, double lo, double hi) {
  check(lo < hi, ErrorKind::Contract, "trunc_normal: empty interval");
  for (int attempt = 0; attempt < 1024; ++attempt) {
    const double x = normal() * stddev;
    if (x >= lo && x <= hi) return x;
  }
  fail(ErrorKind::Contract, "trunc_normal: rejection failed; interval [", lo, ", ", hi,
       "] is far outside N(0, ", stddev, ")");
}

}  // namespace salt
