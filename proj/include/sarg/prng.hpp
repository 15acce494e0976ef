#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace sarg {

// SplitMix64 (Steele, Lea, Flood 2014). Fixed constants, so a seed produces
// the same stream on every machine; all corpus generation and shuffling
// randomness flows through this generator.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Unbiased-enough bounded draw via 128-bit multiply-shift (Lemire).
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Inclusive integer range.
  int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1))); }

  // Uniform double in [0, 1), 53 mantissa bits.
  double real() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Symmetric uniform in [-bound, bound].
  double uniform(double bound) { return (2.0 * real() - 1.0) * bound; }

  // Derive an independent substream; the child seed is the next output of
  // this stream, so split order is part of the documented layout.
  SplitMix64 split() { return SplitMix64(next()); }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

template <typename T>
void shuffle(std::vector<T>& items, SplitMix64& rng) {
  for (size_t i = items.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace sarg
