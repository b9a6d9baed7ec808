#pragma once

#include <string>
#include <vector>

#include "pairdiff/tensor.hpp"

namespace pairdiff {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

// Timesteps are 1-indexed: betas/alphas/alpha_bars are valid for t in [1,T]
// and alpha_bar(0) == 1 denotes the clean state.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 0;
  double beta_min = 0.0;           // construction bounds, kept for serialization
  double beta_max = 0.0;           // (cosine ignores them but records them too)
  std::vector<double> betas;       // [T+1], index 0 unused (0.0)
  std::vector<double> alphas;      // [T+1], alphas[t] = 1 - betas[t]
  std::vector<double> alpha_bars;  // [T+1], alpha_bars[0] = 1

  double beta(int t) const {
    check_t(t, 1, "beta");
    return betas[static_cast<std::size_t>(t)];
  }
  double alpha(int t) const {
    check_t(t, 1, "alpha");
    return alphas[static_cast<std::size_t>(t)];
  }
  double alpha_bar(int t) const {
    check_t(t, 0, "alpha_bar");
    return alpha_bars[static_cast<std::size_t>(t)];
  }
  void check_t(int t, int lo, const char* who) const;
};

// linear: betas evenly spaced in [beta_min, beta_max].
// cosine: squared-cosine alpha_bar with offset s=0.008; beta bounds ignored.
NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min = 1e-4,
                            double beta_max = 0.02);

// X_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

}  // namespace pairdiff
