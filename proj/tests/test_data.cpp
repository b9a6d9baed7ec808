#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "pairdiff/data.hpp"
#include "pairdiff/tensor_io.hpp"

using namespace pairdiff;

namespace {

bool same_bytes(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

bool same_mask(const MaskGrid& a, const MaskGrid& b) {
  return a.height == b.height && a.width == b.width && a.values == b.values;
}

// A symmetric disc on an odd grid, so the central row/column are unambiguous.
MaskGrid disc_mask(int n, double radius) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  const double c = (n - 1) / 2.0;
  for (int r = 0; r < n; ++r)
    for (int cc = 0; cc < n; ++cc)
      if ((r - c) * (r - c) + (cc - c) * (cc - c) <= radius * radius)
        v[static_cast<std::size_t>(r) * n + cc] = 1.0;
  return make_mask_grid(n, n, v);
}

DegradationSpec spec_of(DegradationKind kind, int k = 0, double frac = 0.0,
                        std::uint64_t seed = 0) {
  DegradationSpec s;
  s.kind = kind;
  s.k = k;
  s.frac = frac;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("toy pair generation is seed-deterministic") {
  auto a = gen_toy_pairs(12, 32, 99);
  auto b = gen_toy_pairs(12, 32, 99);
  auto c = gen_toy_pairs(12, 32, 100);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same_bytes(a[i].x, b[i].x));
    CHECK(same_mask(a[i].y, b[i].y));
  }
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_bytes(a[i].x, c[i].x)) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("toy pairs respect the value and size contracts") {
  auto pairs = gen_toy_pairs(200, 32, 7);
  for (const ToyPair& p : pairs) {
    CHECK(p.x.shape() == Shape{1, 32, 32});
    CHECK(p.y.height == 32);
    CHECK(p.y.width == 32);
    CHECK(p.y.foreground() >= 16.0);
    for (double v : p.x.data()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    for (double v : p.y.values) CHECK((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("toy foreground fraction sits in a sane band") {
  auto pairs = gen_toy_pairs(1000, 32, 123);
  double sum = 0.0;
  for (const ToyPair& p : pairs) sum += p.y.fraction();
  const double mean = sum / 1000.0;
  // measured 0.165 at this seed; the band is loose on purpose
  CHECK(mean > 0.05);
  CHECK(mean < 0.4);
}

TEST_CASE("spaced rows: spec example and edge cases") {
  CHECK(spaced_rows(32, 8) == std::vector<int>{2, 6, 10, 14, 18, 22, 26, 30});
  CHECK(spaced_rows(32, 32).size() == 32);
  CHECK(spaced_rows(32, 32).front() == 0);
  CHECK(spaced_rows(32, 32).back() == 31);
  CHECK(spaced_rows(5, 1) == std::vector<int>{2});
}

TEST_CASE("keep_rows keeps exactly the spaced rows, bitwise") {
  Rng rng(41);
  Tensor x = Tensor::zeros({1, 32, 32});
  rng.fill_gauss(x.mutable_data());

  Degraded d = degrade(x, spec_of(DegradationKind::keep_rows, 8));
  const std::vector<int> rows = spaced_rows(32, 8);
  std::set<int> kept(rows.begin(), rows.end());
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * 32 + c;
      if (kept.count(r)) {
        CHECK(d.omega.at(r, c) == 1.0);
        CHECK(d.x.data()[i] == x.data()[i]);
      } else {
        CHECK(d.omega.at(r, c) == 0.0);
        CHECK(d.x.data()[i] == 0.0);
      }
    }

  SUBCASE("k equal to the height is the identity") {
    Degraded full = degrade(x, spec_of(DegradationKind::keep_rows, 32));
    CHECK(same_bytes(full.x, x));
    CHECK(full.omega.foreground() == 32.0 * 32.0);
  }
  SUBCASE("k above the height is rejected") {
    CHECK_THROWS_AS(degrade(x, spec_of(DegradationKind::keep_rows, 33)), std::runtime_error);
    CHECK_THROWS_AS(degrade(x, spec_of(DegradationKind::keep_rows, 0)), std::runtime_error);
  }
}

TEST_CASE("missing_middle_rows removes the centered band") {
  Tensor x = Tensor::full({1, 64, 64}, 1.0);
  Degraded d = degrade(x, spec_of(DegradationKind::missing_middle_rows, 16));
  for (int r = 0; r < 64; ++r) {
    const bool gone = r >= 24 && r <= 39;
    for (int c = 0; c < 64; ++c) {
      CHECK(d.omega.at(r, c) == (gone ? 0.0 : 1.0));
      CHECK(d.x.data()[static_cast<std::size_t>(r) * 64 + c] == (gone ? 0.0 : 1.0));
    }
  }
}

TEST_CASE("broken removes an exact count of cells inside the foreground bbox") {
  // image with a foreground block in rows 8..23, cols 4..27 (cells > 0)
  std::vector<double> v(32 * 32, -0.5);
  for (int r = 8; r < 24; ++r)
    for (int c = 4; c < 28; ++c) v[static_cast<std::size_t>(r) * 32 + c] = 0.7;
  Tensor x = Tensor::from_data({1, 32, 32}, v);

  const double bbox_area = 16.0 * 24.0;
  DegradationSpec sp = spec_of(DegradationKind::broken, 0, 0.3, 5);
  Degraded d = degrade(x, sp);
  double removed = 32.0 * 32.0 - d.omega.foreground();
  CHECK(removed == std::floor(0.3 * bbox_area));
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c)
      if (d.omega.at(r, c) == 0.0) {
        CHECK(r >= 8);
        CHECK(r <= 23);
        CHECK(c >= 4);
        CHECK(c <= 27);
      }

  SUBCASE("same seed reproduces the same holes") {
    Degraded d2 = degrade(x, sp);
    CHECK(same_mask(d.omega, d2.omega));
  }
  SUBCASE("zero fraction removes nothing") {
    Degraded none = degrade(x, spec_of(DegradationKind::broken, 0, 0.0, 5));
    CHECK(none.omega.foreground() == 32.0 * 32.0);
    CHECK(same_bytes(none.x, x));
  }
  SUBCASE("fraction outside [0,1] is rejected") {
    CHECK_THROWS_AS(degrade(x, spec_of(DegradationKind::broken, 0, 1.5, 5)),
                    std::runtime_error);
  }
}

TEST_CASE("downsample emits the block mean at low resolution") {
  Rng rng(17);
  Tensor x = Tensor::zeros({1, 32, 32});
  rng.fill_gauss(x.mutable_data());

  Degraded d = degrade(x, spec_of(DegradationKind::downsample, 4));
  REQUIRE(d.x.shape() == Shape{1, 8, 8});
  CHECK(d.omega.height == 8);
  CHECK(d.omega.foreground() == 64.0);
  for (int br = 0; br < 8; ++br)
    for (int bc = 0; bc < 8; ++bc) {
      double s = 0.0;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
          s += x.data()[static_cast<std::size_t>(br * 4 + r) * 32 + bc * 4 + c];
      CHECK(d.x.data()[static_cast<std::size_t>(br) * 8 + bc] ==
            doctest::Approx(s / 16.0).epsilon(1e-12));
    }

  CHECK_THROWS_AS(degrade(x, spec_of(DegradationKind::downsample, 5)), std::runtime_error);
  CHECK_THROWS_AS(degrade(x, spec_of(DegradationKind::downsample, 1)), std::runtime_error);
}

TEST_CASE("degradations never touch the retained cells") {
  Rng rng(23);
  Tensor x = Tensor::zeros({1, 32, 32});
  rng.fill_gauss(x.mutable_data());
  std::vector<DegradationSpec> specs = {
      spec_of(DegradationKind::keep_rows, 5),
      spec_of(DegradationKind::missing_middle_rows, 10),
      spec_of(DegradationKind::broken, 0, 0.4, 3),
      spec_of(DegradationKind::oneplane),
      spec_of(DegradationKind::triplane),
      spec_of(DegradationKind::multiplane, 3),
      spec_of(DegradationKind::random_combo, 6, 0.2, 77),
  };
  for (const DegradationSpec& sp : specs) {
    CAPTURE(to_string(sp.kind));
    Degraded d = degrade(x, sp);
    REQUIRE(d.x.shape() == x.shape());
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * 32 + c;
        if (d.omega.at(r, c) == 1.0)
          CHECK(d.x.data()[i] == x.data()[i]);
        else
          CHECK(d.x.data()[i] == 0.0);
      }
    Degraded again = degrade(x, sp);
    CHECK(same_mask(d.omega, again.omega));
    CHECK(same_bytes(d.x, again.x));
  }
}

TEST_CASE("plane prompts on a centered disc") {
  MaskGrid m = disc_mask(33, 10.0);
  REQUIRE(m.components == 1);

  SUBCASE("oneplane keeps the central row only") {
    PromptResult p = plane_prompts(m, spec_of(DegradationKind::oneplane));
    for (int r = 0; r < 33; ++r)
      for (int c = 0; c < 33; ++c) {
        CHECK(p.omega.at(r, c) == (r == 16 ? 1.0 : 0.0));
        CHECK(p.partial.at(r, c) == (r == 16 ? m.at(r, c) : 0.0));
      }
  }
  SUBCASE("triplane keeps row, column, and diagonal") {
    PromptResult p = plane_prompts(m, spec_of(DegradationKind::triplane));
    for (int r = 0; r < 33; ++r)
      for (int c = 0; c < 33; ++c) {
        const bool keep = r == 16 || c == 16 || c == r;
        CHECK(p.omega.at(r, c) == (keep ? 1.0 : 0.0));
      }
  }
  SUBCASE("multiplane k rows") {
    PromptResult p = plane_prompts(m, spec_of(DegradationKind::multiplane, 3));
    const std::vector<int> rows = spaced_rows(33, 3);
    std::set<int> kept(rows.begin(), rows.end());
    for (int r = 0; r < 33; ++r)
      CHECK(p.omega.at(r, 0) == (kept.count(r) ? 1.0 : 0.0));
  }
  SUBCASE("empty mask is rejected") {
    MaskGrid empty = make_mask_grid(8, 8, std::vector<double>(64, 0.0));
    CHECK_THROWS_AS(plane_prompts(empty, spec_of(DegradationKind::oneplane)),
                    std::runtime_error);
  }
  SUBCASE("non-prompt kinds are rejected") {
    CHECK_THROWS_AS(plane_prompts(m, spec_of(DegradationKind::downsample, 4)),
                    std::runtime_error);
    CHECK_THROWS_AS(plane_prompts(m, spec_of(DegradationKind::keep_rows, 4)),
                    std::runtime_error);
  }
}

TEST_CASE("random_combo draws each prompt kind at a fair rate") {
  // On a fully foreground 16x16 grid the four prompt kinds leave distinct
  // observed-cell counts: oneplane 16, triplane 46 (row+col+diag share one
  // cell), multiplane(4) 64, broken(0.2) 256 - 51 = 205.
  Tensor x = Tensor::full({1, 16, 16}, 0.5);
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < 10000; ++i) {
    Degraded d = degrade(x, spec_of(DegradationKind::random_combo, 4, 0.2,
                                    static_cast<std::uint64_t>(i)));
    const double obs = d.omega.foreground();
    if (obs == 16.0)
      counts[0]++;
    else if (obs == 46.0)
      counts[1]++;
    else if (obs == 64.0)
      counts[2]++;
    else if (obs == 205.0)
      counts[3]++;
    else
      FAIL("unexpected observed count " << obs);
  }
  // each kind ~2500; 3 sigma of Binomial(1e4, 1/4) is ~130
  for (int k = 0; k < 4; ++k) {
    CAPTURE(k);
    CHECK(counts[k] > 2500 - 160);
    CHECK(counts[k] < 2500 + 160);
  }
}

TEST_CASE("mask and signal conversions round trip") {
  std::vector<double> v(8 * 8, 0.0);
  // two separate 4-connected blobs
  v[1 * 8 + 1] = 1.0;
  v[1 * 8 + 2] = 1.0;
  v[5 * 8 + 5] = 1.0;
  MaskGrid m = make_mask_grid(8, 8, v);
  CHECK(m.components == 2);
  CHECK(m.foreground() == 3.0);

  Tensor t = mask_to_tensor(m);
  CHECK(t.shape() == Shape{1, 8, 8});
  CHECK(same_mask(tensor_to_mask(t, 0.5), m));

  Tensor s = mask_to_signal(m);
  for (std::size_t i = 0; i < s.size(); ++i)
    CHECK(s.data()[i] == (m.values[i] == 1.0 ? 1.0 : -1.0));
  CHECK(same_mask(signal_to_mask(s), m));

  SUBCASE("a ring is one component") {
    std::vector<double> ring(7 * 7, 0.0);
    for (int r = 1; r <= 5; ++r)
      for (int c = 1; c <= 5; ++c)
        if (r == 1 || r == 5 || c == 1 || c == 5) ring[static_cast<std::size_t>(r) * 7 + c] = 1.0;
    CHECK(make_mask_grid(7, 7, ring).components == 1);
  }
  SUBCASE("non-binary values are rejected") {
    std::vector<double> bad(4, 0.5);
    CHECK_THROWS_AS(make_mask_grid(2, 2, bad), std::runtime_error);
  }
  SUBCASE("strict threshold") {
    Tensor edge = Tensor::full({1, 1, 1}, 0.5);
    CHECK(tensor_to_mask(edge, 0.5).foreground() == 0.0);
  }
}

TEST_CASE("dataset save/load round trips through a directory") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pairdiff_test_dataset";
  fs::remove_all(dir);

  auto pairs = gen_toy_pairs(5, 16, 2024);
  save_dataset(dir.string(), pairs, 16, 2024);
  auto loaded = load_dataset(dir.string());
  REQUIRE(loaded.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(same_bytes(loaded[i].x, pairs[i].x));
    CHECK(same_mask(loaded[i].y, pairs[i].y));
  }

  CHECK_THROWS_AS(load_dataset((dir / "nope").string()), std::runtime_error);
  fs::remove_all(dir);
}
