#pragma once

// Segmentation and shape metrics: overlap (dice), surface agreement (nsd),
// point-set distances (chamfer, uhd), and the distributional triple
// mmd/cov/one_nn over sets of shapes.

#include <array>
#include <vector>

#include "pairdiff/data.hpp"

namespace pairdiff {

// Boundary cell centers of a mask, row-major order, (row, col) coordinates.
// A foreground cell is boundary when any 4-neighbour is background or off
// the grid. Nonempty masks always produce nonempty surfaces.
struct SurfaceSet {
  std::vector<std::array<double, 2>> pts;

  bool empty() const { return pts.empty(); }
  std::size_t size() const { return pts.size(); }
};

SurfaceSet surface_from_mask(const MaskGrid& m);

// 2|A∩B| / (|A|+|B|); two empty masks count as identical (1).
double dice(const MaskGrid& a, const MaskGrid& b);

// Fraction of boundary cells lying within tau of the other mask's boundary,
// pooled over both surfaces. tau is in cell units and has no canonical
// default upstream; callers should report it next to the value.
double nsd(const MaskGrid& a, const MaskGrid& b, double tau = 1.0);

// Symmetric mean nearest-neighbour distance: the a->b and b->a means,
// averaged. Euclidean, in cell units.
double chamfer(const SurfaceSet& a, const SurfaceSet& b);

// Directed worst case: max over a of the distance to the nearest point of b.
// Not symmetric.
double uhd(const SurfaceSet& a, const SurfaceSet& b);

struct GenSuiteResult {
  double mmd = 0.0;     // mean over reference of min chamfer to generated
  double cov = 0.0;     // fraction of reference claimed as some generated's nearest
  double one_nn = 0.0;  // leave-one-out 1-NN accuracy on the pooled set; 0.5 is ideal
};

// Distribution-level comparison of generated shapes against a reference set,
// with chamfer as the base distance. Ties go to the lower index; a nearest
// neighbour at distance exactly 0 (a duplicate) counts as misclassified in
// one_nn so degenerate copying cannot look ideal.
GenSuiteResult gen_suite(const std::vector<SurfaceSet>& generated,
                         const std::vector<SurfaceSet>& reference);

}  // namespace pairdiff
