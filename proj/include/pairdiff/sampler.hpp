#pragma once

#include <utility>
#include <vector>

#include "pairdiff/denoiser.hpp"
#include "pairdiff/rng.hpp"
#include "pairdiff/schedule.hpp"
#include "pairdiff/tensor.hpp"

namespace pairdiff {

struct GuidanceContext;  // guidance.hpp

// Anything that predicts the pair noise: the trained PairDenoiser, or the
// closed-form Gaussian reference model. predict_eps must be a pure function
// of its inputs and differentiable through the tensor graph.
struct NoisePredictor {
  virtual ~NoisePredictor() = default;
  virtual std::pair<Tensor, Tensor> predict_eps(const Tensor& x_t, const Tensor& y_t,
                                                int t) const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
};

// Adapter over a trained model.
class DenoiserPredictor : public NoisePredictor {
 public:
  explicit DenoiserPredictor(const PairDenoiser& m) : m_(&m) {}
  std::pair<Tensor, Tensor> predict_eps(const Tensor& x_t, const Tensor& y_t,
                                        int t) const override {
    return pairdiff::predict_eps(*m_, x_t, y_t, t);
  }
  const NoiseSchedule& schedule() const override { return m_->sched; }

 private:
  const PairDenoiser* m_;
};

struct PairState {
  Tensor x = Tensor::zeros({1});
  Tensor y = Tensor::zeros({1});
  int t = 0;
};

enum class PlanKind { ddpm, ddim };
std::string to_string(PlanKind k);
PlanKind plan_kind_from_string(const std::string& s);

// Timestep subsequence t_N > ... > t_1 > t_0 = 0. A ddpm plan must be dense
// (every step decrements t by one); ddim plans may skip.
struct StepPlan {
  PlanKind kind = PlanKind::ddim;
  std::vector<int> ts;

  int transitions() const { return static_cast<int>(ts.size()) - 1; }
  void validate(int T) const;
};

StepPlan make_ddpm_plan(int T);
// steps evenly spread timesteps {ceil(k*T/steps)+1 : k = steps-1..0} plus the
// terminal 0. For (T=50, steps=20) this is 49,46,44,...,4,1,0.
StepPlan make_ddim_plan(int T, int steps);

struct EvalCount {
  long forward = 0;   // noise-prediction forward passes
  long backward = 0;  // backpropagations through the predictor
};

// Deterministic transition formulas applied to a precomputed noise
// prediction. Differentiable; every sampling and guidance path funnels
// through these, so the x-restriction used in guidance losses is exactly the
// x channel of the full pair operator.
std::pair<Tensor, Tensor> apply_ddim(const Tensor& x, const Tensor& y, const Tensor& eps_x,
                                     const Tensor& eps_y, int t, int t_next,
                                     const NoiseSchedule& sched);
// Posterior mean only; the caller adds sigma_t * z for t > 1.
std::pair<Tensor, Tensor> apply_ddpm_mean(const Tensor& x, const Tensor& y,
                                          const Tensor& eps_x, const Tensor& eps_y, int t,
                                          const NoiseSchedule& sched);
// sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t); zero at t = 1.
double ddpm_sigma(int t, const NoiseSchedule& sched);

// Single reverse steps. Results are detached: trajectories do not accumulate
// graph. Use apply_* / predict_x0 where a differentiable step is needed.
PairState ddpm_step(const NoisePredictor& model, const PairState& state, Rng& rng,
                    EvalCount* evals = nullptr);
PairState ddim_step(const NoisePredictor& model, const PairState& state, int t_next,
                    EvalCount* evals = nullptr);
PairState ddpm_step(const PairDenoiser& model, const PairState& state, Rng& rng,
                    EvalCount* evals = nullptr);
PairState ddim_step(const PairDenoiser& model, const PairState& state, int t_next,
                    EvalCount* evals = nullptr);

// x0_hat = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t), both channels.
// Differentiable w.r.t. the state.
std::pair<Tensor, Tensor> predict_x0(const NoisePredictor& model, const PairState& state,
                                     EvalCount* evals = nullptr);
std::pair<Tensor, Tensor> predict_x0(const PairDenoiser& model, const PairState& state,
                                     EvalCount* evals = nullptr);

struct DenoiseResult {
  PairState state;  // at t = 0
  EvalCount evals;
};

// Run the full reverse chain along the plan, invoking the guidance hook (if
// any). Pure function of (parameters, init, plan, guidance, rng seed).
// init.t must equal plan.ts.front().
DenoiseResult full_denoise(const NoisePredictor& model, const PairState& init,
                           const StepPlan& plan, const GuidanceContext* guidance, Rng& rng);
DenoiseResult full_denoise(const PairDenoiser& model, const PairState& init,
                           const StepPlan& plan, const GuidanceContext* guidance, Rng& rng);

// DDIM inversion along the reversed plan. Each hop solves the implicit
// relation x_hi = sqrt(abar_hi/abar_lo) * (x_lo - c * eps(x_hi, t_hi)) by
// damped fixed-point iteration; with a smooth predictor the subsequent
// forward DDIM pass reproduces the input to near machine precision. The
// iteration returns its best iterate if the tolerance is not reached (the
// relation can be mildly expansive for sharp learned predictors).
PairState ddim_invert(const NoisePredictor& model, const std::pair<Tensor, Tensor>& x0_pair,
                      const StepPlan& plan);
PairState ddim_invert(const PairDenoiser& model, const std::pair<Tensor, Tensor>& x0_pair,
                      const StepPlan& plan);

}  // namespace pairdiff
