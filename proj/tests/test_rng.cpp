#include <doctest.h>

#include <cmath>
#include <vector>

#include "pairdiff/rng.hpp"

using pairdiff::Rng;

TEST_CASE("same seed reproduces the stream") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds differ") {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
  CHECK(same == 0);
}

TEST_CASE("split is stable and independent of parent draws") {
  Rng parent(99);
  Rng c1 = parent.split(7);
  parent.next_u64();
  parent.next_u64();
  Rng c2 = parent.split(7);  // same label, same child stream
  for (int i = 0; i < 20; ++i) CHECK(c1.next_u64() == c2.next_u64());

  Rng other = parent.split(8);
  Rng again = parent.split(7);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += other.next_u64() == again.next_u64();
  CHECK(same == 0);
}

TEST_CASE("string labels hash to distinct streams") {
  Rng parent(5);
  Rng a = parent.split("sampler");
  Rng b = parent.split("guidance");
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
  CHECK(same == 0);
}

TEST_CASE("unit draws stay in [0,1)") {
  Rng r(42);
  for (int i = 0; i < 10000; ++i) {
    double u = r.next_unit();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("gaussian moments") {
  Rng r(2024);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double g = r.next_gauss();
    s += g;
    s2 += g * g;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.02);
}
