#include "pairdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace pairdiff {

namespace {

double dist2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  const double dr = a[0] - b[0], dc = a[1] - b[1];
  return dr * dr + dc * dc;
}

// Uniform bucket grid over a point set for nearest-neighbour queries. Square
// cells sized so the grid holds roughly one point per cell; queries walk
// outward ring by ring and stop once the ring's closest possible point can
// no longer beat the best distance found.
class BucketGrid {
 public:
  explicit BucketGrid(const std::vector<std::array<double, 2>>& pts) : pts_(pts) {
    if (pts_.empty()) throw std::runtime_error("BucketGrid: empty point set");
    lo_ = hi_ = pts_[0];
    for (const auto& p : pts_) {
      lo_[0] = std::min(lo_[0], p[0]);
      lo_[1] = std::min(lo_[1], p[1]);
      hi_[0] = std::max(hi_[0], p[0]);
      hi_[1] = std::max(hi_[1], p[1]);
    }
    const double extent = std::max(hi_[0] - lo_[0], hi_[1] - lo_[1]);
    const int k = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(pts_.size()))));
    h_ = extent > 0.0 ? extent / k : 1.0;
    n0_ = cell_count(hi_[0] - lo_[0]);
    n1_ = cell_count(hi_[1] - lo_[1]);
    buckets_.assign(static_cast<std::size_t>(n0_) * n1_, {});
    for (std::size_t i = 0; i < pts_.size(); ++i)
      buckets_[bucket_of(clamp_idx(raw_idx(pts_[i][0], lo_[0]), n0_),
                         clamp_idx(raw_idx(pts_[i][1], lo_[1]), n1_))]
          .push_back(i);
  }

  // squared distance from q to the nearest stored point; q need not lie
  // inside the grid (its cell index may fall outside the stored range)
  double nearest2(const std::array<double, 2>& q) const {
    const int q0 = raw_idx(q[0], lo_[0]);
    const int q1 = raw_idx(q[1], lo_[1]);
    double best = std::numeric_limits<double>::infinity();
    const int max_ring = std::max({q0, n0_ - 1 - q0, q1, n1_ - 1 - q1, 0});
    for (int d = 0; d <= max_ring; ++d) {
      // points in cells beyond ring d are at least (d * h) away in one axis
      if (d > 0 && best <= (d - 1) * h_ * ((d - 1) * h_)) break;
      scan_ring(q, q0, q1, d, best);
    }
    return best;
  }

 private:
  int cell_count(double extent) const {
    return std::max(1, static_cast<int>(std::floor(extent / h_)) + 1);
  }
  int raw_idx(double v, double lo) const { return static_cast<int>(std::floor((v - lo) / h_)); }
  int clamp_idx(int i, int n) const { return std::clamp(i, 0, n - 1); }
  std::size_t bucket_of(int i0, int i1) const {
    return static_cast<std::size_t>(i0) * n1_ + i1;
  }

  void scan_cell(const std::array<double, 2>& q, int i0, int i1, double& best) const {
    if (i0 < 0 || i0 >= n0_ || i1 < 0 || i1 >= n1_) return;
    for (std::size_t idx : buckets_[bucket_of(i0, i1)])
      best = std::min(best, dist2(q, pts_[idx]));
  }

  void scan_ring(const std::array<double, 2>& q, int q0, int q1, int d, double& best) const {
    if (d == 0) {
      scan_cell(q, q0, q1, best);
      return;
    }
    for (int i = -d; i <= d; ++i) {
      scan_cell(q, q0 - d, q1 + i, best);
      scan_cell(q, q0 + d, q1 + i, best);
    }
    for (int i = -d + 1; i <= d - 1; ++i) {
      scan_cell(q, q0 + i, q1 - d, best);
      scan_cell(q, q0 + i, q1 + d, best);
    }
  }

  const std::vector<std::array<double, 2>>& pts_;
  std::array<double, 2> lo_{}, hi_{};
  double h_ = 1.0;
  int n0_ = 1, n1_ = 1;
  std::vector<std::vector<std::size_t>> buckets_;
};

void check_same_grid(const MaskGrid& a, const MaskGrid& b, const char* who) {
  if (a.height != b.height || a.width != b.width)
    throw std::runtime_error(std::string(who) + ": resolution mismatch " +
                             std::to_string(a.height) + "x" + std::to_string(a.width) +
                             " vs " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
}

}  // namespace

SurfaceSet surface_from_mask(const MaskGrid& m) {
  SurfaceSet s;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      if (m.at(r, c) != 1.0) continue;
      const bool boundary = r == 0 || r == m.height - 1 || c == 0 || c == m.width - 1 ||
                            m.at(r - 1, c) == 0.0 || m.at(r + 1, c) == 0.0 ||
                            m.at(r, c - 1) == 0.0 || m.at(r, c + 1) == 0.0;
      if (boundary) s.pts.push_back({static_cast<double>(r), static_cast<double>(c)});
    }
  return s;
}

double dice(const MaskGrid& a, const MaskGrid& b) {
  check_same_grid(a, b, "dice");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    inter += a.values[i] * b.values[i];
    total += a.values[i] + b.values[i];
  }
  if (total == 0.0) return 1.0;
  return 2.0 * inter / total;
}

double nsd(const MaskGrid& a, const MaskGrid& b, double tau) {
  check_same_grid(a, b, "nsd");
  if (tau <= 0.0) throw std::runtime_error("nsd: tau must be positive");
  SurfaceSet sa = surface_from_mask(a);
  SurfaceSet sb = surface_from_mask(b);
  if (sa.empty() && sb.empty()) return 1.0;
  if (sa.empty() || sb.empty())
    throw std::runtime_error("nsd: one mask is empty, the other is not");
  const double tau2 = tau * tau;
  BucketGrid ga(sa.pts), gb(sb.pts);
  double close = 0.0;
  for (const auto& p : sa.pts) close += gb.nearest2(p) <= tau2 ? 1.0 : 0.0;
  for (const auto& p : sb.pts) close += ga.nearest2(p) <= tau2 ? 1.0 : 0.0;
  return close / static_cast<double>(sa.size() + sb.size());
}

double chamfer(const SurfaceSet& a, const SurfaceSet& b) {
  if (a.empty() || b.empty()) throw std::runtime_error("chamfer: empty surface set");
  BucketGrid ga(a.pts), gb(b.pts);
  double ab = 0.0, ba = 0.0;
  for (const auto& p : a.pts) ab += std::sqrt(gb.nearest2(p));
  for (const auto& p : b.pts) ba += std::sqrt(ga.nearest2(p));
  return 0.5 * (ab / static_cast<double>(a.size()) + ba / static_cast<double>(b.size()));
}

double uhd(const SurfaceSet& a, const SurfaceSet& b) {
  if (a.empty()) throw std::runtime_error("uhd: empty query set");
  if (b.empty()) throw std::runtime_error("uhd: empty target set");
  BucketGrid gb(b.pts);
  double worst = 0.0;
  for (const auto& p : a.pts) worst = std::max(worst, gb.nearest2(p));
  return std::sqrt(worst);
}

GenSuiteResult gen_suite(const std::vector<SurfaceSet>& generated,
                         const std::vector<SurfaceSet>& reference) {
  if (generated.empty() || reference.empty())
    throw std::runtime_error("gen_suite: empty shape list");

  const std::size_t ng = generated.size(), nr = reference.size(), n = ng + nr;
  auto shape = [&](std::size_t i) -> const SurfaceSet& {
    return i < ng ? generated[i] : reference[i - ng];
  };

  // pooled pairwise chamfer matrix (chamfer is symmetric)
  std::vector<double> dm(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = chamfer(shape(i), shape(j));
      dm[i * n + j] = d;
      dm[j * n + i] = d;
    }

  GenSuiteResult out;

  double mmd_sum = 0.0;
  for (std::size_t r = 0; r < nr; ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < ng; ++g) best = std::min(best, dm[(ng + r) * n + g]);
    mmd_sum += best;
  }
  out.mmd = mmd_sum / static_cast<double>(nr);

  std::vector<char> claimed(nr, 0);
  for (std::size_t g = 0; g < ng; ++g) {
    std::size_t best_r = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < nr; ++r) {
      const double d = dm[g * n + (ng + r)];
      if (d < best) {
        best = d;
        best_r = r;
      }
    }
    claimed[best_r] = 1;
  }
  double covered = 0.0;
  for (char c : claimed) covered += c;
  out.cov = covered / static_cast<double>(nr);

  double correct = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best_j = n;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = dm[i * n + j];
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    if (best == 0.0) continue;  // duplicate neighbour: counted as misclassified
    const bool same_side = (i < ng) == (best_j < ng);
    if (same_side) correct += 1.0;
  }
  out.one_nn = correct / static_cast<double>(n);

  return out;
}

}  // namespace pairdiff
