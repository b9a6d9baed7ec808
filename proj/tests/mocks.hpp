#pragma once

// Small hand-rolled noise predictors for sampler/guidance tests.

#include <utility>

#include "pairdiff/sampler.hpp"

namespace mocks {

using namespace pairdiff;

// eps = 0, but built through the graph so guidance losses stay differentiable.
struct ZeroEps : NoisePredictor {
  NoiseSchedule s;
  explicit ZeroEps(NoiseSchedule sched) : s(std::move(sched)) {}
  std::pair<Tensor, Tensor> predict_eps(const Tensor& x, const Tensor& y,
                                        int) const override {
    return {scale(x, 0.0), scale(y, 0.0)};
  }
  const NoiseSchedule& schedule() const override { return s; }
};

// Smooth channel-coupled linear map: eps_x = ax*x + c*y, eps_y = ay*y + c*x.
struct LinearEps : NoisePredictor {
  NoiseSchedule s;
  double ax, ay, c;
  LinearEps(NoiseSchedule sched, double ax_, double ay_, double c_)
      : s(std::move(sched)), ax(ax_), ay(ay_), c(c_) {}
  std::pair<Tensor, Tensor> predict_eps(const Tensor& x, const Tensor& y,
                                        int t) const override {
    double tilt = 1.0 + 0.01 * t;  // mild t-dependence
    return {add(scale(x, ax * tilt), scale(y, c)), add(scale(y, ay * tilt), scale(x, c))};
  }
  const NoiseSchedule& schedule() const override { return s; }
};

// Returns fixed tensors regardless of input (not differentiable w.r.t. state).
struct CannedEps : NoisePredictor {
  NoiseSchedule s;
  Tensor ex, ey;
  CannedEps(NoiseSchedule sched, Tensor ex_, Tensor ey_)
      : s(std::move(sched)), ex(std::move(ex_)), ey(std::move(ey_)) {}
  std::pair<Tensor, Tensor> predict_eps(const Tensor&, const Tensor&, int) const override {
    return {ex, ey};
  }
  const NoiseSchedule& schedule() const override { return s; }
};

}  // namespace mocks
