#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pairdiff/schedule.hpp"
#include "pairdiff/tensor.hpp"

namespace pairdiff {

struct DenoiserConfig {
  int cx = 1;  // channels of the X half
  int cy = 1;  // channels of the Y half
  int height = 32;
  int width = 32;       // both must be divisible by 4 (two 2x poolings)
  int base_width = 10;  // level widths are base_width * {1, 2, 4}
  int emb_dim = 16;     // sinusoidal timestep features
  std::uint64_t seed = 0;
};

// Noise-prediction net over channel-stacked (X, Y) grids: a 3-level
// convolutional encoder-decoder with skip connections and SiLU, conditioned
// on t through a learned per-channel bias after the first conv of each block.
// The final 1x1 conv is zero-initialized, so a fresh model predicts zero.
struct PairDenoiser {
  DenoiserConfig cfg;
  NoiseSchedule sched;  // the schedule the model was built and trained for
  std::map<std::string, Tensor> params;

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::vector<Tensor> parameter_list();  // map order, for the optimizer
  std::size_t parameter_count() const;
};

PairDenoiser make_denoiser(const DenoiserConfig& cfg, const NoiseSchedule& sched);

// Sinusoidal features of an integer timestep, shape [dim, 1].
Tensor timestep_embedding(int t, int dim);

// Predict the noise in both halves of a stacked pair state.
// Differentiable w.r.t. x_t and y_t (and the parameters).
std::pair<Tensor, Tensor> predict_eps(const PairDenoiser& model, const Tensor& x_t,
                                      const Tensor& y_t, int t);

enum class LossKind { L1, L2 };
std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  LossKind loss = LossKind::L1;
  int batch = 8;
  int steps = 1;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // one entry per step (batch mean)
};

// One draw of the joint-noising procedure: a single t for the pair,
// independent noise per channel. Split out so tests can instrument it.
struct TrainDraw {
  std::size_t index;  // dataset row
  int t;
  Tensor eps_x, eps_y;
};
TrainDraw draw_train_sample(class Rng& rng, std::size_t dataset_size,
                            const NoiseSchedule& sched, int cx, int cy, int height,
                            int width);

using PairDataset = std::vector<std::pair<Tensor, Tensor>>;

TrainResult train_pair(PairDenoiser& model, const PairDataset& dataset,
                       const NoiseSchedule& sched, const TrainConfig& cfg);

// Checkpoints: <dir>/manifest.json (geometry, channel split, schedule kind/T,
// ordered parameter table) plus <dir>/params.pdt with the tensors concatenated
// in manifest order.
void save_denoiser(const std::string& dir, const PairDenoiser& model);
PairDenoiser load_denoiser(const std::string& dir);

}  // namespace pairdiff
