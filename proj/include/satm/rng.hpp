#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

// All randomness in the project flows from a single 64-bit root seed through
// derive_seed(root, purpose, salt): FNV-1a over the purpose string folded
// with the root and salt through splitmix64 rounds. Every consumer names its
// purpose, so two modules never share a stream by accident and any draw can
// be reproduced in isolation.
//
// Distributions are implemented explicitly on top of std::mt19937_64 (whose
// output is pinned by the standard), so results are bit-identical across
// platforms and library versions.

namespace satm {

uint64_t splitmix64(uint64_t& state);

uint64_t derive_seed(uint64_t root, std::string_view purpose, uint64_t salt = 0);

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random mantissa bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (two uniforms per draw, no caching).
  double normal();

  /// Unbiased integer in [0, bound) by rejection.
  uint64_t below(uint64_t bound);

  std::vector<uint32_t> permutation(std::size_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace satm
