#include "pairdiff/sampler.hpp"

#include <cmath>
#include <stdexcept>

#include "pairdiff/guidance.hpp"

namespace pairdiff {

std::string to_string(PlanKind k) { return k == PlanKind::ddpm ? "ddpm" : "ddim"; }

PlanKind plan_kind_from_string(const std::string& s) {
  if (s == "ddpm") return PlanKind::ddpm;
  if (s == "ddim") return PlanKind::ddim;
  throw std::runtime_error("unknown plan kind '" + s + "' (expected ddpm|ddim)");
}

void StepPlan::validate(int T) const {
  if (ts.size() < 2) throw std::runtime_error("step plan needs at least one transition");
  if (ts.front() > T || ts.front() < 1)
    throw std::runtime_error("step plan starts at t=" + std::to_string(ts.front()) +
                             ", schedule has T=" + std::to_string(T));
  for (std::size_t i = 1; i < ts.size(); ++i) {
    if (ts[i] >= ts[i - 1])
      throw std::runtime_error("step plan timesteps must be strictly decreasing");
    if (kind == PlanKind::ddpm && ts[i] != ts[i - 1] - 1)
      throw std::runtime_error("ddpm plan must be dense (got " + std::to_string(ts[i - 1]) +
                               " -> " + std::to_string(ts[i]) + ")");
  }
  if (ts.back() != 0) throw std::runtime_error("step plan must end at t=0");
}

StepPlan make_ddpm_plan(int T) {
  if (T < 1) throw std::runtime_error("make_ddpm_plan: T must be >= 1");
  StepPlan p;
  p.kind = PlanKind::ddpm;
  p.ts.reserve(static_cast<std::size_t>(T) + 1);
  for (int t = T; t >= 0; --t) p.ts.push_back(t);
  return p;
}

StepPlan make_ddim_plan(int T, int steps) {
  if (T < 1) throw std::runtime_error("make_ddim_plan: T must be >= 1");
  if (steps < 1 || steps > T)
    throw std::runtime_error("make_ddim_plan: steps must be in [1,T], got " +
                             std::to_string(steps));
  StepPlan p;
  p.kind = PlanKind::ddim;
  p.ts.reserve(static_cast<std::size_t>(steps) + 1);
  for (int k = steps - 1; k >= 0; --k) {
    long num = static_cast<long>(k) * T;
    int t = static_cast<int>((num + steps - 1) / steps) + 1;  // ceil(k*T/steps) + 1
    p.ts.push_back(t);
  }
  p.ts.push_back(0);
  p.validate(T);
  return p;
}

namespace {

// x0_hat = (v - sqrt(1-abar) * eps) / sqrt(abar)
Tensor x0_from_eps(const Tensor& v, const Tensor& eps, double abar) {
  return scale(sub(v, scale(eps, std::sqrt(1.0 - abar))), 1.0 / std::sqrt(abar));
}

void check_transition(int t, int t_next, const NoiseSchedule& sched, const char* who) {
  sched.check_t(t, 1, who);
  sched.check_t(t_next, 0, who);
  if (t_next >= t)
    throw std::runtime_error(std::string(who) + ": t_next=" + std::to_string(t_next) +
                             " must be below t=" + std::to_string(t));
}

}  // namespace

std::pair<Tensor, Tensor> apply_ddim(const Tensor& x, const Tensor& y, const Tensor& eps_x,
                                     const Tensor& eps_y, int t, int t_next,
                                     const NoiseSchedule& sched) {
  check_transition(t, t_next, sched, "apply_ddim");
  const double abar = sched.alpha_bar(t);
  const double abar_n = sched.alpha_bar(t_next);
  const double c0 = std::sqrt(abar_n);
  const double c1 = std::sqrt(1.0 - abar_n);
  Tensor xn = add(scale(x0_from_eps(x, eps_x, abar), c0), scale(eps_x, c1));
  Tensor yn = add(scale(x0_from_eps(y, eps_y, abar), c0), scale(eps_y, c1));
  return {xn, yn};
}

std::pair<Tensor, Tensor> apply_ddpm_mean(const Tensor& x, const Tensor& y,
                                          const Tensor& eps_x, const Tensor& eps_y, int t,
                                          const NoiseSchedule& sched) {
  sched.check_t(t, 1, "apply_ddpm_mean");
  const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(sched.alpha(t));
  Tensor mx = scale(sub(x, scale(eps_x, coef)), inv);
  Tensor my = scale(sub(y, scale(eps_y, coef)), inv);
  return {mx, my};
}

double ddpm_sigma(int t, const NoiseSchedule& sched) {
  sched.check_t(t, 1, "ddpm_sigma");
  if (t == 1) return 0.0;
  return std::sqrt((1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) *
                   sched.beta(t));
}

PairState ddpm_step(const NoisePredictor& model, const PairState& state, Rng& rng,
                    EvalCount* evals) {
  const NoiseSchedule& sched = model.schedule();
  sched.check_t(state.t, 1, "ddpm_step");
  auto [ex, ey] = model.predict_eps(state.x, state.y, state.t);
  if (evals) ++evals->forward;
  auto [mx, my] = apply_ddpm_mean(state.x, state.y, ex, ey, state.t, sched);
  if (state.t > 1) {
    const double sigma = ddpm_sigma(state.t, sched);
    Tensor zx = Tensor::zeros(mx.shape());
    Tensor zy = Tensor::zeros(my.shape());
    rng.fill_gauss(zx.mutable_data());
    rng.fill_gauss(zy.mutable_data());
    mx = add(mx, scale(zx, sigma));
    my = add(my, scale(zy, sigma));
  }
  return {mx.detach(), my.detach(), state.t - 1};
}

PairState ddim_step(const NoisePredictor& model, const PairState& state, int t_next,
                    EvalCount* evals) {
  auto [ex, ey] = model.predict_eps(state.x, state.y, state.t);
  if (evals) ++evals->forward;
  auto [xn, yn] = apply_ddim(state.x, state.y, ex, ey, state.t, t_next, model.schedule());
  return {xn.detach(), yn.detach(), t_next};
}

std::pair<Tensor, Tensor> predict_x0(const NoisePredictor& model, const PairState& state,
                                     EvalCount* evals) {
  const NoiseSchedule& sched = model.schedule();
  sched.check_t(state.t, 1, "predict_x0");
  auto [ex, ey] = model.predict_eps(state.x, state.y, state.t);
  if (evals) ++evals->forward;
  const double abar = sched.alpha_bar(state.t);
  return {x0_from_eps(state.x, ex, abar), x0_from_eps(state.y, ey, abar)};
}

PairState ddpm_step(const PairDenoiser& model, const PairState& state, Rng& rng,
                    EvalCount* evals) {
  return ddpm_step(DenoiserPredictor(model), state, rng, evals);
}
PairState ddim_step(const PairDenoiser& model, const PairState& state, int t_next,
                    EvalCount* evals) {
  return ddim_step(DenoiserPredictor(model), state, t_next, evals);
}
std::pair<Tensor, Tensor> predict_x0(const PairDenoiser& model, const PairState& state,
                                     EvalCount* evals) {
  return predict_x0(DenoiserPredictor(model), state, evals);
}

DenoiseResult full_denoise(const NoisePredictor& model, const PairState& init,
                           const StepPlan& plan, const GuidanceContext* guidance, Rng& rng) {
  const NoiseSchedule& sched = model.schedule();
  plan.validate(sched.T);
  if (init.t != plan.ts.front())
    throw std::runtime_error("full_denoise: init state at t=" + std::to_string(init.t) +
                             ", plan starts at t=" + std::to_string(plan.ts.front()));
  std::vector<ScheduledStep> steps;
  if (guidance) {
    guidance->plan.validate();
    guidance->obs.validate();
    if (guidance->plan.strategy == GuidanceStrategy::latent && !guidance->latent_loss)
      throw std::runtime_error("full_denoise: latent strategy needs a latent loss hook");
    steps = schedule_guidance(plan, guidance->plan);
  } else {
    for (int i = 0; i < plan.transitions(); ++i)
      steps.push_back({plan.ts[static_cast<std::size_t>(i)],
                       plan.ts[static_cast<std::size_t>(i) + 1], false});
  }

  // Independent streams: plan-step noise must not shift when guidance
  // draws target or re-noising samples, and vice versa.
  Rng samp = rng.split("sampler-noise");
  Rng guide = rng.split("guidance-noise");

  DenoiseResult res;
  res.state = {init.x.detach(), init.y.detach(), init.t};
  for (const ScheduledStep& st : steps) {
    if (st.guided) {
      res.state = guided_transition(model, res.state, st.t_next, plan.kind, *guidance, sched,
                                    samp, guide, &res.evals);
    } else if (plan.kind == PlanKind::ddpm) {
      res.state = ddpm_step(model, res.state, samp, &res.evals);
    } else {
      res.state = ddim_step(model, res.state, st.t_next, &res.evals);
    }
  }
  return res;
}

DenoiseResult full_denoise(const PairDenoiser& model, const PairState& init,
                           const StepPlan& plan, const GuidanceContext* guidance, Rng& rng) {
  return full_denoise(DenoiserPredictor(model), init, plan, guidance, rng);
}

PairState ddim_invert(const NoisePredictor& model, const std::pair<Tensor, Tensor>& x0_pair,
                      const StepPlan& plan) {
  const NoiseSchedule& sched = model.schedule();
  if (plan.kind != PlanKind::ddim)
    throw std::runtime_error("ddim_invert: plan must be a ddim plan");
  plan.validate(sched.T);

  Tensor x = x0_pair.first.detach();
  Tensor y = x0_pair.second.detach();
  // Walk the plan back to front: each hop lifts t_lo -> t_hi by solving
  // v_hi = sqrt(abar_hi/abar_lo) * (v_lo - c * eps(v_hi, t_hi)) to fixed point.
  for (std::size_t i = plan.ts.size() - 1; i > 0; --i) {
    const int t_lo = plan.ts[i];
    const int t_hi = plan.ts[i - 1];
    const double abar_lo = sched.alpha_bar(t_lo);
    const double abar_hi = sched.alpha_bar(t_hi);
    const double ratio = std::sqrt(abar_hi / abar_lo);
    const double c = std::sqrt(1.0 - abar_lo) - std::sqrt(abar_lo * (1.0 - abar_hi) / abar_hi);

    Tensor xh = x;
    Tensor yh = y;
    double damp = 1.0;
    for (int it = 0; it < 64; ++it) {
      auto [ex, ey] = model.predict_eps(xh, yh, t_hi);
      Tensor xn = scale(sub(x, scale(ex, c)), ratio).detach();
      Tensor yn = scale(sub(y, scale(ey, c)), ratio).detach();
      if (it >= 8) damp = 0.5;  // relax if plain iteration hasn't settled
      double delta = 0.0;
      for (std::size_t j = 0; j < xn.size(); ++j) {
        double v = (1.0 - damp) * xh.data()[j] + damp * xn.data()[j];
        delta = std::max(delta, std::abs(v - xh.data()[j]));
        xn.mutable_data()[j] = v;
      }
      for (std::size_t j = 0; j < yn.size(); ++j) {
        double v = (1.0 - damp) * yh.data()[j] + damp * yn.data()[j];
        delta = std::max(delta, std::abs(v - yh.data()[j]));
        yn.mutable_data()[j] = v;
      }
      xh = xn;
      yh = yn;
      if (delta < 1e-13) break;
    }
    x = xh;
    y = yh;
  }
  return {x, y, plan.ts.front()};
}

PairState ddim_invert(const PairDenoiser& model, const std::pair<Tensor, Tensor>& x0_pair,
                      const StepPlan& plan) {
  return ddim_invert(DenoiserPredictor(model), x0_pair, plan);
}

}  // namespace pairdiff
