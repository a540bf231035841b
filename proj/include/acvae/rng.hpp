#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "acvae/errors.hpp"

namespace acvae {

// Counter-derived RNG streams. Every consumer of randomness keys its stream by
// (run seed, purpose, epoch, iteration), so a resumed run replays the exact
// sample sequence without serializing generator state.
enum class RngStream : uint64_t {
  init = 1,
  shuffle = 2,
  epsilon = 3,
  prior = 4,
  derange = 5,
  eval = 6,
  synth = 7,
  toy = 8,
};

class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1), 53-bit resolution
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) {
    // multiply-shift; bias is negligible for n << 2^64
    return uint64_t((__uint128_t(next_u64()) * n) >> 64);
  }

 private:
  uint64_t state_;
};

inline uint64_t mix_key(uint64_t seed, RngStream stream, uint64_t a = 0, uint64_t b = 0) {
  SplitMix64 h(seed ^ 0x6a09e667f3bcc909ull);
  uint64_t k = h.next_u64() ^ (uint64_t(stream) * 0x9e3779b97f4a7c15ull);
  SplitMix64 h2(k + a * 0xd6e8feb86659fd93ull + b * 0xca9b0c7ebd1ec619ull);
  return h2.next_u64();
}

inline SplitMix64 make_stream(uint64_t seed, RngStream stream, uint64_t a = 0, uint64_t b = 0) {
  return SplitMix64(mix_key(seed, stream, a, b));
}

// Box-Muller; pairs are always consumed together so the sequence depends only
// on the number of values requested.
template <class S>
void fill_gaussian(SplitMix64& rng, std::span<S> out) {
  size_t i = 0;
  while (i < out.size()) {
    double u1 = rng.next_double();
    double u2 = rng.next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    out[i++] = S(r * std::cos(a));
    if (i < out.size()) out[i++] = S(r * std::sin(a));
  }
}

inline double gaussian(SplitMix64& rng) {
  double v[2];
  fill_gaussian<double>(rng, std::span<double>(v, 2));
  return v[0];
}

template <class T>
void shuffle(SplitMix64& rng, std::vector<T>& v) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = size_t(rng.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

// Uniform random permutation with no fixed points. For n == 2 the swap is the
// only derangement; for n > 2, rejection-samples uniform permutations.
inline std::vector<int32_t> derangement(SplitMix64& rng, int32_t n) {
  if (n < 2) throw ShapeError("contrastive loss requires batch >= 2");
  std::vector<int32_t> p(n);
  for (;;) {
    for (int32_t i = 0; i < n; ++i) p[i] = i;
    for (int32_t i = n; i > 1; --i) {
      int32_t j = int32_t(rng.next_below(uint64_t(i)));
      std::swap(p[i - 1], p[j]);
    }
    bool ok = true;
    for (int32_t i = 0; i < n; ++i) {
      if (p[i] == i) { ok = false; break; }
    }
    if (ok) return p;
  }
}

}  // namespace acvae
