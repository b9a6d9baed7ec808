#include "pairdiff/guidance.hpp"

#include <cmath>
#include <stdexcept>

namespace pairdiff {

std::string to_string(NoisePolicy p) { return p == NoisePolicy::fresh ? "fresh" : "cached"; }

NoisePolicy noise_policy_from_string(const std::string& s) {
  if (s == "fresh") return NoisePolicy::fresh;
  if (s == "cached") return NoisePolicy::cached;
  throw std::runtime_error("unknown noise policy '" + s + "' (expected fresh|cached)");
}

std::string to_string(GuidanceStrategy s) {
  switch (s) {
    case GuidanceStrategy::naive: return "naive";
    case GuidanceStrategy::improved: return "improved";
    case GuidanceStrategy::hybrid: return "hybrid";
    case GuidanceStrategy::latent: return "latent";
  }
  return "?";
}

GuidanceStrategy guidance_strategy_from_string(const std::string& s) {
  if (s == "naive") return GuidanceStrategy::naive;
  if (s == "improved") return GuidanceStrategy::improved;
  if (s == "hybrid") return GuidanceStrategy::hybrid;
  if (s == "latent") return GuidanceStrategy::latent;
  throw std::runtime_error("unknown guidance strategy '" + s +
                           "' (expected naive|improved|hybrid|latent)");
}

void Observation::validate() const {
  if (omega.shape() != x_star.shape())
    throw std::runtime_error("observation: mask shaped " + shape_str(omega.shape()) +
                             " but target shaped " + shape_str(x_star.shape()));
  for (double v : omega.data())
    if (v != 0.0 && v != 1.0)
      throw std::runtime_error("observation: mask entries must be exactly 0 or 1");
}

double Observation::observed_count() const {
  double n = 0.0;
  for (double v : omega.data()) n += v;
  return n;
}

void GuidancePlan::validate() const {
  if (eta < 0.0) throw std::runtime_error("guidance: eta must be >= 0");
  if (f < 1) throw std::runtime_error("guidance: interval f must be >= 1");
  if (R < 1) throw std::runtime_error("guidance: recurrence R must be >= 1");
  if (window.t_min > window.t_max) throw std::runtime_error("guidance: empty window");
}

Tensor noisy_target(const Observation& obs, int t, const NoiseSchedule& sched, Rng& rng) {
  if (t == 0) return obs.x_star.detach();
  sched.check_t(t, 1, "noisy_target");
  Tensor eps = Tensor::zeros(obs.x_star.shape());
  if (obs.policy == NoisePolicy::fresh) {
    rng.fill_gauss(eps.mutable_data());
  } else {
    // Keyed off the stream identity and t only: repeatable within the
    // trajectory, no sequential state consumed.
    Rng keyed = rng.split(0x74677400000000ULL ^ static_cast<std::uint64_t>(t));
    keyed.fill_gauss(eps.mutable_data());
  }
  return q_sample(obs.x_star, t, eps, sched).detach();
}

Tensor masked_replace(const Tensor& x, const Tensor& replacement, const Tensor& omega) {
  if (x.shape() != replacement.shape() || x.shape() != omega.shape())
    throw std::runtime_error("masked_replace: shape mismatch " + shape_str(x.shape()) + " / " +
                             shape_str(replacement.shape()) + " / " + shape_str(omega.shape()));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = omega.data()[i] != 0.0 ? replacement.data()[i] : x.data()[i];
  return Tensor::from_data(x.shape(), out);
}

Tensor masked_mse(const Tensor& a, const Tensor& b, const Tensor& omega) {
  if (a.shape() != b.shape() || a.shape() != omega.shape())
    throw std::runtime_error("masked_mse: shape mismatch " + shape_str(a.shape()) + " / " +
                             shape_str(b.shape()) + " / " + shape_str(omega.shape()));
  double count = 0.0;
  for (double v : omega.data()) count += v;
  Tensor sq = square(sub(a, b));
  return scale(sum(mul(sq, omega)), 1.0 / std::max(count, 1.0));
}

Tensor masked_sq_norm(const Tensor& a, const Tensor& b, const Tensor& omega) {
  if (a.shape() != b.shape() || a.shape() != omega.shape())
    throw std::runtime_error("masked_sq_norm: shape mismatch " + shape_str(a.shape()) + " / " +
                             shape_str(b.shape()) + " / " + shape_str(omega.shape()));
  return sum(mul(square(sub(a, b)), omega));
}

std::vector<ScheduledStep> schedule_guidance(const StepPlan& plan, const GuidancePlan& gp) {
  gp.validate();
  if (plan.ts.size() < 2) throw std::runtime_error("schedule_guidance: empty plan");
  std::vector<ScheduledStep> out;
  out.reserve(plan.ts.size() - 1);
  for (int i = 0; i < plan.transitions(); ++i) {
    int t = plan.ts[static_cast<std::size_t>(i)];
    int t_next = plan.ts[static_cast<std::size_t>(i) + 1];
    bool guided = (i % gp.f == 0) && gp.window.contains(t);
    out.push_back({t, t_next, guided});
  }
  return out;
}

std::vector<int> audit_sequence(const std::vector<ScheduledStep>& steps, int R) {
  std::vector<int> out;
  for (const ScheduledStep& st : steps) {
    if (!st.guided) continue;
    for (int r = 0; r < R; ++r) {
      out.push_back(st.t);
      out.push_back(st.t_next);
    }
  }
  return out;
}

int guided_step_count(const std::vector<ScheduledStep>& steps) {
  int n = 0;
  for (const ScheduledStep& st : steps) n += st.guided ? 1 : 0;
  return n;
}

PairState renoise_to(const PairState& state, int t_hi, const NoiseSchedule& sched, Rng& rng) {
  sched.check_t(t_hi, 1, "renoise_to");
  sched.check_t(state.t, 0, "renoise_to");
  if (t_hi <= state.t)
    throw std::runtime_error("renoise_to: target t=" + std::to_string(t_hi) +
                             " not above state t=" + std::to_string(state.t));
  const double ratio = sched.alpha_bar(t_hi) / sched.alpha_bar(state.t);
  Tensor ex = Tensor::zeros(state.x.shape());
  Tensor ey = Tensor::zeros(state.y.shape());
  rng.fill_gauss(ex.mutable_data());
  rng.fill_gauss(ey.mutable_data());
  Tensor x = add(scale(state.x, std::sqrt(ratio)), scale(ex, std::sqrt(1.0 - ratio)));
  Tensor y = add(scale(state.y, std::sqrt(ratio)), scale(ey, std::sqrt(1.0 - ratio)));
  return {x.detach(), y.detach(), t_hi};
}

namespace {

// Take the transition using an already-computed noise prediction. Shares the
// apply_* formulas (and, for ddpm, the z draw) with the fresh-prediction
// step so the two are bitwise interchangeable given equal inputs.
PairState step_with_eps(const Tensor& x, const Tensor& y, const Tensor& ex, const Tensor& ey,
                        int t, int t_next, PlanKind kind, const NoiseSchedule& sched,
                        Rng& samp) {
  if (kind == PlanKind::ddim) {
    auto [xn, yn] = apply_ddim(x, y, ex, ey, t, t_next, sched);
    return {xn.detach(), yn.detach(), t_next};
  }
  if (t_next != t - 1)
    throw std::runtime_error("guided ddpm transition must go to t-1");
  auto [mx, my] = apply_ddpm_mean(x, y, ex, ey, t, sched);
  if (t > 1) {
    const double sigma = ddpm_sigma(t, sched);
    Tensor zx = Tensor::zeros(mx.shape());
    Tensor zy = Tensor::zeros(my.shape());
    samp.fill_gauss(zx.mutable_data());
    samp.fill_gauss(zy.mutable_data());
    mx = add(mx, scale(zx, sigma));
    my = add(my, scale(zy, sigma));
  }
  return {mx.detach(), my.detach(), t_next};
}

PairState step_fresh(const NoisePredictor& model, const PairState& s, int t_next,
                     PlanKind kind, Rng& samp, EvalCount* ev) {
  auto [ex, ey] = model.predict_eps(s.x, s.y, s.t);
  if (ev) ++ev->forward;
  return step_with_eps(s.x, s.y, ex, ey, s.t, t_next, kind, model.schedule(), samp);
}

Tensor descend(const Tensor& leaf, double eta) {
  if (eta == 0.0) return leaf.detach();
  const std::vector<double>& g = leaf.grad();
  std::vector<double> out(leaf.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = leaf.data()[i] - eta * g[i];
  return Tensor::from_data(leaf.shape(), out);
}

void check_grads(const Tensor& leaf, int t, const char* who) {
  for (double g : leaf.grad())
    if (!std::isfinite(g))
      throw std::runtime_error(std::string(who) + ": non-finite gradient at t=" +
                               std::to_string(t));
}

// One guidance cycle ending at t_next. final_cycle selects whether the step
// out uses a fresh prediction at the updated state (the real plan step) or
// reuses the prediction computed for the loss (intermediate recurrences).
PairState guided_cycle(const NoisePredictor& model, const PairState& s, int t_next,
                       PlanKind kind, const GuidanceContext& ctx, const NoiseSchedule& sched,
                       Rng& samp, Rng& guide, bool final_cycle, EvalCount* ev) {
  const GuidancePlan& gp = ctx.plan;
  const Observation& obs = ctx.obs;

  switch (gp.strategy) {
    case GuidanceStrategy::naive: {
      if (obs.bridge)
        throw std::runtime_error("naive guidance needs a native-resolution observation");
      Tensor tgt = noisy_target(obs, s.t, sched, guide);
      Tensor x_rep = masked_replace(s.x, tgt, obs.omega);
      return step_fresh(model, {x_rep, s.y, s.t}, t_next, kind, samp, ev);
    }

    case GuidanceStrategy::improved: {
      Tensor x_leaf = s.x.detach().set_requires_grad(true);
      Tensor y_leaf = s.y.detach().set_requires_grad(true);
      auto [ex, ey] = model.predict_eps(x_leaf, y_leaf, s.t);
      if (ev) ++ev->forward;
      Tensor x_pred = kind == PlanKind::ddim
                          ? apply_ddim(x_leaf, y_leaf, ex, ey, s.t, t_next, sched).first
                          : apply_ddpm_mean(x_leaf, y_leaf, ex, ey, s.t, sched).first;
      if (obs.bridge) x_pred = obs.bridge(x_pred);
      Tensor tgt = noisy_target(obs, t_next, sched, guide);
      backward(masked_sq_norm(x_pred, tgt, obs.omega));
      if (ev) ++ev->backward;
      check_grads(x_leaf, s.t, "improved guidance");
      check_grads(y_leaf, s.t, "improved guidance");
      Tensor x_upd = descend(x_leaf, gp.eta);
      Tensor y_upd = descend(y_leaf, gp.eta);
      if (final_cycle) return step_fresh(model, {x_upd, y_upd, s.t}, t_next, kind, samp, ev);
      return step_with_eps(x_upd, y_upd, ex.detach(), ey.detach(), s.t, t_next, kind, sched,
                           samp);
    }

    case GuidanceStrategy::hybrid: {
      // Loss is evaluated at the replaced state (X*_t, Y_t); only y descends.
      if (obs.bridge)
        throw std::runtime_error("hybrid guidance needs a native-resolution observation");
      Tensor tgt_hi = noisy_target(obs, s.t, sched, guide);
      Tensor x_rep = masked_replace(s.x, tgt_hi, obs.omega);
      Tensor y_leaf = s.y.detach().set_requires_grad(true);
      auto [ex, ey] = model.predict_eps(x_rep, y_leaf, s.t);
      if (ev) ++ev->forward;
      Tensor x_pred = kind == PlanKind::ddim
                          ? apply_ddim(x_rep, y_leaf, ex, ey, s.t, t_next, sched).first
                          : apply_ddpm_mean(x_rep, y_leaf, ex, ey, s.t, sched).first;
      Tensor tgt_lo = noisy_target(obs, t_next, sched, guide);
      backward(masked_sq_norm(x_pred, tgt_lo, obs.omega));
      if (ev) ++ev->backward;
      check_grads(y_leaf, s.t, "hybrid guidance");
      Tensor y_upd = descend(y_leaf, gp.eta);
      if (final_cycle) return step_fresh(model, {x_rep, y_upd, s.t}, t_next, kind, samp, ev);
      return step_with_eps(x_rep, y_upd, ex.detach(), ey.detach(), s.t, t_next, kind, sched,
                           samp);
    }

    case GuidanceStrategy::latent: {
      Tensor x_leaf = s.x.detach().set_requires_grad(true);
      Tensor y_leaf = s.y.detach().set_requires_grad(true);
      EvalCount scratch;
      Tensor loss = ctx.latent_loss(model, x_leaf, y_leaf, s.t, ev ? *ev : scratch);
      backward(loss);
      if (ev) ++ev->backward;
      check_grads(x_leaf, s.t, "latent guidance");
      check_grads(y_leaf, s.t, "latent guidance");
      Tensor x_upd = descend(x_leaf, gp.eta);
      Tensor y_upd = descend(y_leaf, gp.eta);
      // No reusable single-step prediction here: the loss saw a whole
      // rollout, so every cycle steps with a fresh prediction.
      return step_fresh(model, {x_upd, y_upd, s.t}, t_next, kind, samp, ev);
    }
  }
  throw std::runtime_error("guided_cycle: unhandled strategy");
}

}  // namespace

PairState guided_transition(const NoisePredictor& model, const PairState& state, int t_next,
                            PlanKind kind, const GuidanceContext& ctx,
                            const NoiseSchedule& sched, Rng& samp, Rng& guide,
                            EvalCount* evals) {
  PairState s = state;
  const int R = ctx.plan.R;
  for (int r = 1; r <= R; ++r) {
    const bool final_cycle = r == R;
    PairState lo = guided_cycle(model, s, t_next, kind, ctx, sched, samp, guide, final_cycle,
                                evals);
    s = final_cycle ? lo : renoise_to(lo, state.t, sched, guide);
  }
  return s;
}

namespace {

// The standalone guide-step entry points derive their two streams from the
// caller's rng so that repeated calls see fresh noise while equal-seeded
// rngs give comparable runs.
std::pair<Rng, Rng> split_streams(Rng& rng) {
  std::uint64_t salt = rng.next_u64();
  return {rng.split(salt ^ 0x73616d706c6572ULL), rng.split(salt ^ 0x67756964616e63ULL)};
}

}  // namespace

PairState naive_guide_step(const NoisePredictor& model, const PairState& state,
                           const Observation& obs, const NoiseSchedule& sched, Rng& rng,
                           int t_next, PlanKind kind, EvalCount* evals) {
  obs.validate();
  auto [samp, guide] = split_streams(rng);
  GuidanceContext ctx;
  ctx.plan.strategy = GuidanceStrategy::naive;
  ctx.obs = obs;
  return guided_cycle(model, state, t_next, kind, ctx, sched, samp, guide, true, evals);
}

PairState improved_guide_step(const NoisePredictor& model, const PairState& state,
                              const Observation& obs, const NoiseSchedule& sched, double eta,
                              Rng& rng, int t_next, PlanKind kind, EvalCount* evals) {
  obs.validate();
  auto [samp, guide] = split_streams(rng);
  GuidanceContext ctx;
  ctx.plan.strategy = GuidanceStrategy::improved;
  ctx.plan.eta = eta;
  ctx.obs = obs;
  return guided_cycle(model, state, t_next, kind, ctx, sched, samp, guide, true, evals);
}

PairState hybrid_guide_step(const NoisePredictor& model, const PairState& state,
                            const Observation& obs, const NoiseSchedule& sched, double eta,
                            Rng& rng, int t_next, PlanKind kind, EvalCount* evals) {
  obs.validate();
  auto [samp, guide] = split_streams(rng);
  GuidanceContext ctx;
  ctx.plan.strategy = GuidanceStrategy::hybrid;
  ctx.plan.eta = eta;
  ctx.obs = obs;
  return guided_cycle(model, state, t_next, kind, ctx, sched, samp, guide, true, evals);
}

}  // namespace pairdiff
