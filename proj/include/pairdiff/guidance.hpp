#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pairdiff/rng.hpp"
#include "pairdiff/sampler.hpp"
#include "pairdiff/schedule.hpp"
#include "pairdiff/tensor.hpp"

namespace pairdiff {

enum class NoisePolicy { fresh, cached };
std::string to_string(NoisePolicy p);
NoisePolicy noise_policy_from_string(const std::string& s);

// A partial observation of the X channel: the known values and where they are
// known. With the cached policy the noise used to form X*_t is a pure
// function of (rng stream identity, t), so re-forming the target at the same
// t within a trajectory repeats the draw without consuming sequential state.
struct Observation {
  Tensor x_star = Tensor::zeros({1});
  Tensor omega = Tensor::zeros({1});  // same shape, entries in {0,1}; 1 = observed
  NoisePolicy policy = NoisePolicy::fresh;
  // Maps a full-resolution X prediction into the observation's space before
  // the loss (e.g. block averaging when x_star is a low-res measurement).
  // Must be differentiable. Only the improved strategy supports it; hard
  // replacement needs x_star at native resolution.
  std::function<Tensor(const Tensor&)> bridge;

  void validate() const;
  double observed_count() const;
};

// X*_t = sqrt(abar_t) * x_star + sqrt(1 - abar_t) * eps. t = 0 returns x_star.
Tensor noisy_target(const Observation& obs, int t, const NoiseSchedule& sched, Rng& rng);

// Entrywise select: observed entries come from replacement, bitwise; the rest
// keep x. Value-level (output is a fresh untracked leaf).
Tensor masked_replace(const Tensor& x, const Tensor& replacement, const Tensor& omega);
// Mean squared difference over observed entries (0 if nothing observed).
// Differentiable.
Tensor masked_mse(const Tensor& a, const Tensor& b, const Tensor& omega);
// Squared norm of (a - b) restricted to observed entries. This is the guided
// steps' loss; unlike the mean form its gradient does not shrink with |Omega|,
// so one eta works across observation sizes.
Tensor masked_sq_norm(const Tensor& a, const Tensor& b, const Tensor& omega);

enum class GuidanceStrategy { naive, improved, hybrid, latent };
std::string to_string(GuidanceStrategy s);
GuidanceStrategy guidance_strategy_from_string(const std::string& s);

struct GuidedWindow {
  int t_min = 0;
  int t_max = std::numeric_limits<int>::max();
  bool contains(int t) const { return t >= t_min && t <= t_max; }
};

struct GuidancePlan {
  GuidanceStrategy strategy = GuidanceStrategy::improved;
  double eta = 1.5;
  int f = 1;  // guide every f-th plan transition
  int R = 1;  // recurrence: cycles per guided transition
  GuidedWindow window;

  void validate() const;
};

// For strategy == latent: builds the guidance loss from differentiable leaf
// states. May roll the predictor out; must add those forward passes to evals.
using LatentLossFn = std::function<Tensor(const NoisePredictor&, const Tensor& x_leaf,
                                          const Tensor& y_leaf, int t, EvalCount& evals)>;

struct GuidanceContext {
  GuidancePlan plan;
  Observation obs;
  LatentLossFn latent_loss;  // required iff plan.strategy == latent
};

struct ScheduledStep {
  int t;       // transition source timestep
  int t_next;  // transition target timestep
  bool guided;
};

// Decide which plan transitions get guidance: every f-th transition (counting
// from the first) whose source timestep lies in the window. If f exceeds the
// transition count this degenerates to one guided step at the start.
std::vector<ScheduledStep> schedule_guidance(const StepPlan& plan, const GuidancePlan& gp);

// Flattened audit listing of the realized oscillations: R repetitions of
// (t, t_next) for each guided transition, in order. Plain steps are omitted,
// matching how the oscillation schedule is conventionally written out.
std::vector<int> audit_sequence(const std::vector<ScheduledStep>& steps, int R);

// Number of guided transitions (the S in the eval-count bookkeeping:
// forward = transitions + R*S and backward = R*S for gradient strategies,
// forward = transitions + (R-1)*S and backward = 0 for naive replacement).
int guided_step_count(const std::vector<ScheduledStep>& steps);

// Single guided transitions t -> t_next, exposed for direct testing.
// Each runs one full cycle ending in a real step (fresh prediction at the
// updated state). full_denoise composes R such cycles per guided transition,
// re-noising back up between them and reusing each cycle's prediction for
// the intermediate descents.
PairState naive_guide_step(const NoisePredictor& model, const PairState& state,
                           const Observation& obs, const NoiseSchedule& sched, Rng& rng,
                           int t_next, PlanKind kind, EvalCount* evals = nullptr);
PairState improved_guide_step(const NoisePredictor& model, const PairState& state,
                              const Observation& obs, const NoiseSchedule& sched, double eta,
                              Rng& rng, int t_next, PlanKind kind,
                              EvalCount* evals = nullptr);
PairState hybrid_guide_step(const NoisePredictor& model, const PairState& state,
                            const Observation& obs, const NoiseSchedule& sched, double eta,
                            Rng& rng, int t_next, PlanKind kind, EvalCount* evals = nullptr);

// Climb from state.t back up to t_hi with fresh noise at the schedule's exact
// alpha-bar ratio: v_hi = sqrt(r) * v + sqrt(1 - r) * eps, r = abar_hi/abar_lo.
PairState renoise_to(const PairState& state, int t_hi, const NoiseSchedule& sched, Rng& rng);

// Internals shared with full_denoise; exposed for the latent strategy and
// for tests that need a single cycle with reuse semantics.
PairState guided_transition(const NoisePredictor& model, const PairState& state, int t_next,
                            PlanKind kind, const GuidanceContext& ctx,
                            const NoiseSchedule& sched, Rng& samp, Rng& guide,
                            EvalCount* evals);

}  // namespace pairdiff
