#pragma once

// Joint-Gaussian test world. For a Gaussian prior the optimal noise
// predictor, every marginal, and the conditional P(Y | X = x*) are all
// closed-form, so sampling + guidance can be scored against exact answers.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pairdiff/guidance.hpp"
#include "pairdiff/sampler.hpp"
#include "pairdiff/schedule.hpp"

namespace pairdiff {

struct GaussianWorld {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::vector<int> ix;  // dims exposed as the X channel, in channel order
  std::vector<int> iy;  // dims exposed as the Y channel

  int d() const { return static_cast<int>(mu.size()); }
  // sigma symmetric positive definite, ix/iy a disjoint cover of 0..d-1
  void validate() const;
};

// Two dims, unit variances, correlation rho; dim 0 is X, dim 1 is Y.
GaussianWorld make_rho_world(double rho, double mu_x = 0.0, double mu_y = 0.0);

struct ConditionalMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Moments of Y | X = x_star (x_star indexed like world.ix).
ConditionalMoments conditional(const GaussianWorld& w, const Eigen::VectorXd& x_star);

// The marginal of the forward process at t is N(sqrt(ab) mu, ab S + (1-ab) I),
// which gives the exact conditional expectation of the injected noise:
//   E[eps | v_t] = sqrt(1-ab) (ab S + (1-ab) I)^{-1} (v_t - sqrt(ab) mu).
// Channel states are [n,1,1] tensors; the map is assembled from graph ops with
// constant matrices so guidance losses can differentiate through it.
class OracleDenoiser : public NoisePredictor {
 public:
  OracleDenoiser(GaussianWorld world, NoiseSchedule sched);

  std::pair<Tensor, Tensor> predict_eps(const Tensor& x_t, const Tensor& y_t,
                                        int t) const override;
  const NoiseSchedule& schedule() const override { return sched_; }
  const GaussianWorld& world() const { return world_; }

 private:
  GaussianWorld world_;
  NoiseSchedule sched_;
  std::vector<Tensor> coef_;    // per t: sqrt(1-ab) (ab S' + (1-ab) I)^{-1}
  std::vector<Tensor> center_;  // per t: sqrt(ab) mu'
};

struct OracleSuiteConfig {
  StepPlan plan;
  GuidancePlan guidance;
  std::vector<double> x_star;  // one value per ix entry; empty = unguided run
  NoisePolicy policy = NoisePolicy::fresh;
  int n_samples = 5000;
  std::uint64_t seed = 0;
};

struct OracleSuiteReport {
  std::string strategy;  // guidance strategy name, or "unguided"
  double eta = 0.0;
  int f = 1;
  int R = 1;
  int n = 0;
  std::vector<double> mean_y;  // empirical moments of the Y channel at t=0
  std::vector<double> var_y;
  std::vector<double> analytic_mean;  // conditional if guided, else marginal
  std::vector<double> analytic_var;
  double mean_err = 0.0;  // max abs component error vs analytic
  double var_err = 0.0;
  // full-state moments in channel order [ix..., iy...], cov row-major d*d
  std::vector<double> mean_full;
  std::vector<double> cov_full;
};

// Samples n trajectories with the oracle denoiser (guided toward x_star when
// given) and scores the empirical Y moments against the analytic answer.
OracleSuiteReport run_oracle_suite(const GaussianWorld& w, const NoiseSchedule& sched,
                                   const OracleSuiteConfig& cfg);

// "strategy,eta,f,R,mean_err,var_err" with fixed 6-decimal formatting
std::string suite_csv_row(const OracleSuiteReport& r);
std::string suite_json(const OracleSuiteReport& r);

}  // namespace pairdiff
