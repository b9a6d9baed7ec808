#pragma once

// Synthetic paired datasets (intensity image + exact segmentation mask) and
// the degradation / partial-shape prompt menu used by the guided experiments.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pairdiff/rng.hpp"
#include "pairdiff/tensor.hpp"

namespace pairdiff {

struct MaskGrid {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, entries exactly 0 or 1
  int components = 0;          // 4-connected foreground components

  double at(int r, int c) const {
    return values[static_cast<std::size_t>(r) * width + c];
  }
  double foreground() const;  // cell count
  double fraction() const;    // foreground / (H*W)
};

// validates binary values and fills in the component count
MaskGrid make_mask_grid(int height, int width, std::vector<double> values);

Tensor mask_to_tensor(const MaskGrid& m);                    // [1,H,W] in {0,1}
MaskGrid tensor_to_mask(const Tensor& t, double threshold);  // strict >
Tensor mask_to_signal(const MaskGrid& m);                    // [1,H,W] in {-1,+1}
MaskGrid signal_to_mask(const Tensor& t);                    // threshold at 0

struct ToyPair {
  Tensor x;    // [1,H,W] intensity in [-1,1]
  MaskGrid y;  // exact interior mask
};

// Random "organ" blobs: 2-4 overlapping ellipses with random pose, rendered
// as intensities with additive texture noise. Resamples until the mask has at
// least 16 foreground cells.
std::vector<ToyPair> gen_toy_pairs(int n, int resolution, std::uint64_t seed);

enum class DegradationKind {
  downsample,            // k = block factor; observation lives at low res
  missing_middle_rows,   // k middle rows deleted
  keep_rows,             // k evenly spaced rows kept ("slices only")
  broken,                // frac of the foreground bbox deleted in blobs
  oneplane,              // central row kept
  triplane,              // central row + central column + main diagonal
  multiplane,            // k evenly spaced rows kept
  random_combo,          // uniform choice among the four prompt kinds
};
std::string to_string(DegradationKind k);

struct DegradationSpec {
  DegradationKind kind = DegradationKind::keep_rows;
  int k = 0;            // rows / block factor, per kind
  double frac = 0.0;    // broken fraction
  std::uint64_t seed = 0;

  void validate(int height, int width) const;
};

// rows kept by keep_rows/multiplane: k evenly spaced, centered in each band
std::vector<int> spaced_rows(int height, int k);

struct Degraded {
  Tensor x;        // same grid as the input, except downsample (low res)
  MaskGrid omega;  // 1 = observed; lives at low res for downsample
};

// Deletes (never distorts) cells of x outside omega; the downsample kind
// instead emits the block-mean image at resolution H/k with an all-ones omega.
Degraded degrade(const Tensor& x, const DegradationSpec& spec);

struct PromptResult {
  MaskGrid partial;  // mask restricted to the retained cells
  MaskGrid omega;
};

// Partial-shape prompts on a mask: oneplane / triplane / multiplane(k) /
// broken(frac), or random_combo drawing uniformly among those four.
PromptResult plane_prompts(const MaskGrid& mask, const DegradationSpec& spec);

// Directory of PDT1 tensors plus a JSON index (ids, resolution, seed).
void save_dataset(const std::string& dir, const std::vector<ToyPair>& pairs,
                  int resolution, std::uint64_t seed);
std::vector<ToyPair> load_dataset(const std::string& dir);

}  // namespace pairdiff
