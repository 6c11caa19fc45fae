#include "satm/rng.hpp"

#include <cmath>
#include <numbers>

namespace satm {

uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t derive_seed(uint64_t root, std::string_view purpose, uint64_t salt) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a 64
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  uint64_t state = root;
  uint64_t mixed = splitmix64(state) ^ h;
  state = mixed;
  mixed = splitmix64(state) ^ salt;
  state = mixed;
  return splitmix64(state);
}

double Rng::normal() {
  // u1 in (0, 1]: guard against log(0).
  const double u1 = 1.0 - uniform01();
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t Rng::below(uint64_t bound) {
  if (bound <= 1) return 0;
  const uint64_t limit = bound * (~uint64_t{0} / bound);
  uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % bound;
}

std::vector<uint32_t> Rng::permutation(std::size_t n) {
  std::vector<uint32_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<uint32_t>(i);
  shuffle(p);
  return p;
}

}  // namespace satm
