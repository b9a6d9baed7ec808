#pragma once

// Shape fields and the latent route: exact signed distance transforms,
// mask canonicalization, a convolutional shape codec, and the decoded-output
// guidance loss that steers latent-space sampling with explicit-space
// observations.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pairdiff/data.hpp"
#include "pairdiff/denoiser.hpp"
#include "pairdiff/guidance.hpp"
#include "pairdiff/sampler.hpp"
#include "pairdiff/tensor.hpp"

namespace pairdiff {

struct SdfGrid {
  int height = 0;
  int width = 0;
  double spacing = 1.0;  // cell units
  Tensor values = Tensor::zeros({1});  // [1,H,W]; negative inside, never 0
};

// Exact Euclidean distance to the nearest cell of the opposite class, signed
// negative inside. Off-grid cells count as background, so a full-grid mask
// gets a proper interior field instead of blowing up. No cell center lands
// exactly on the zero level set (minimum magnitude is one cell).
SdfGrid sdf_from_mask(const MaskGrid& m);

// values <= 0, so exact zeros (which sdf_from_mask never produces but
// decoded fields can) fall inside.
MaskGrid mask_from_sdf(const SdfGrid& sdf);

// Codec-facing view of a field: clamp(values / trunc, -1, 1). Distances
// beyond trunc cells carry no shape information worth spending capacity on.
Tensor sdf_field(const SdfGrid& sdf, double trunc = 8.0);

struct CodecConfig {
  int height = 32;
  int width = 32;  // both divisible by 4
  int base_width = 12;
  int latent_channels = 4;
  std::uint64_t seed = 0;
};

// Convolutional autoencoder over truncated SDF fields. The latent is
// latent_channels x (H/4) x (W/4): a fixed 4x compression at the default
// channel count.
struct ShapeCodec {
  CodecConfig cfg;
  std::map<std::string, Tensor> params;

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::vector<Tensor> parameter_list();
  std::size_t parameter_count() const;

  Shape latent_shape() const {
    return {cfg.latent_channels, cfg.height / 4, cfg.width / 4};
  }
};

ShapeCodec make_codec(const CodecConfig& cfg);

// Both are pure functions of (params, input) and differentiable.
Tensor encode(const ShapeCodec& codec, const Tensor& field);
Tensor decode(const ShapeCodec& codec, const Tensor& latent);

// One entangled latent carrying both halves of a pair state. The split is a
// bookkeeping convention (the first split_channels channels play the X role
// in the sampler); the codec mixes all channels, so neither half decodes on
// its own.
struct LatentPair {
  Tensor l = Tensor::zeros({1});
  int split_channels = 0;

  std::pair<Tensor, Tensor> halves() const;
};

LatentPair join_latent(const Tensor& x_half, const Tensor& y_half);

// Reconstruction training (L1/L2 per cfg.loss) on normalized fields.
// Aborts on non-finite loss like the denoiser trainer.
TrainResult train_codec(ShapeCodec& codec, const std::vector<Tensor>& fields,
                        const TrainConfig& cfg);

void save_codec(const std::string& dir, const ShapeCodec& codec);
ShapeCodec load_codec(const std::string& dir);

// Similarity transform between an input grid and the canonical frame where
// the foreground centroid sits at the grid center and the bounding radius is
// 0.4 of the half-extent. translation is the input centroid's offset from
// the grid center; scale is input radius over canonical radius.
struct CanonicalTransform {
  std::array<double, 2> translation{0.0, 0.0};
  double scale = 1.0;
};

std::array<double, 2> to_canonical(const std::array<double, 2>& p,
                                   const CanonicalTransform& xf, int height, int width);
std::array<double, 2> from_canonical(const std::array<double, 2>& q,
                                     const CanonicalTransform& xf, int height, int width);

// Nearest-neighbour resampling into / out of the canonical frame.
std::pair<MaskGrid, CanonicalTransform> canonicalize(const MaskGrid& m);
MaskGrid uncanonicalize(const MaskGrid& canon, const CanonicalTransform& xf);

struct LatentLossConfig {
  int budget = 20;  // hard cap on rollout transitions (memory guard)
  int bptt = 0;     // 0: differentiate the predictor at every step;
                    // k > 0: only in the last k transitions (the rest
                    // contribute through the linear step algebra only)
};

// Guidance loss for latent-space sampling: from the leaf latents at t, run
// the remaining ddim plan to t=0 differentiably, decode the rejoined latent,
// and return the squared error to obs.x_star over obs.omega. The observation
// lives in explicit space; omega is what restricts the decoded field to its
// observed (X) region. Intermediate latents are never decoded; only the t=0
// endpoint is.
LatentLossFn make_latent_loss(const ShapeCodec& codec, const StepPlan& plan,
                              const Observation& obs, LatentLossConfig lcfg = {});

}  // namespace pairdiff
