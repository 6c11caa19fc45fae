#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "satm/rng.hpp"

using namespace satm;

TEST_CASE("derive_seed separates purposes and salts") {
  const uint64_t root = 42;
  CHECK(derive_seed(root, "a") == derive_seed(root, "a"));
  CHECK(derive_seed(root, "a") != derive_seed(root, "b"));
  CHECK(derive_seed(root, "a", 0) != derive_seed(root, "a", 1));
  CHECK(derive_seed(root, "a") != derive_seed(root + 1, "a"));
}

TEST_CASE("streams are deterministic") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform01 stays in [0,1)") {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("below is within bounds and covers small ranges") {
  Rng rng(2);
  bool seen[5] = {};
  for (int i = 0; i < 1000; ++i) {
    const uint64_t v = rng.below(5);
    CHECK(v < 5);
    seen[v] = true;
  }
  for (bool s : seen) CHECK(s);
}

TEST_CASE("permutation really permutes") {
  Rng rng(3);
  auto p = rng.permutation(257);
  auto sorted = p;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("normal has roughly standard moments") {
  Rng rng(4);
  const int n = 50000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sum2 += z * z;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}
