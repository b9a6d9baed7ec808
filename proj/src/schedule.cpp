#include "pairdiff/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace pairdiff {

std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::linear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw std::runtime_error("unknown schedule kind '" + s + "' (expected linear|cosine)");
}

void NoiseSchedule::check_t(int t, int lo, const char* who) const {
  if (t < lo || t > T)
    throw std::runtime_error(std::string(who) + ": timestep " + std::to_string(t) +
                             " outside [" + std::to_string(lo) + "," + std::to_string(T) + "]");
}

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max) {
  if (T < 1) throw std::runtime_error("make_schedule: T must be >= 1");
  NoiseSchedule s;
  s.kind = kind;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.T = T;
  s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
  if (kind == ScheduleKind::linear) {
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
      throw std::runtime_error("make_schedule: need 0 < beta_min <= beta_max < 1");
    for (int t = 1; t <= T; ++t) {
      double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
      s.betas[static_cast<std::size_t>(t)] = beta_min + f * (beta_max - beta_min);
    }
  } else {
    // squared-cosine alpha_bar with offset 0.008; betas derived from the
    // consecutive ratio and clipped away from 0 and 1
    const double off = 0.008;
    auto f = [&](double t) {
      double v = std::cos((t / T + off) / (1.0 + off) * 1.5707963267948966);
      return v * v;
    };
    const double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      double ab = f(static_cast<double>(t)) / f0;
      double beta = 1.0 - ab / prev;
      if (beta < 1e-8) beta = 1e-8;
      if (beta > 0.999) beta = 0.999;
      s.betas[static_cast<std::size_t>(t)] = beta;
      prev *= 1.0 - beta;
    }
  }
  s.alphas.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bars.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.alphas[static_cast<std::size_t>(t)] = 1.0 - s.betas[static_cast<std::size_t>(t)];
    s.alpha_bars[static_cast<std::size_t>(t)] =
        s.alpha_bars[static_cast<std::size_t>(t) - 1] * s.alphas[static_cast<std::size_t>(t)];
  }
  return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  sched.check_t(t, 1, "q_sample");
  if (x0.shape() != eps.shape())
    throw std::runtime_error("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                             shape_str(eps.shape()));
  const double ab = sched.alpha_bar(t);
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

}  // namespace pairdiff
