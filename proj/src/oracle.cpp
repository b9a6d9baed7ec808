#include "pairdiff/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

namespace pairdiff {

namespace {

std::string idx_str(const std::vector<int>& v) {
  std::string s = "{";
  for (std::size_t i = 0; i < v.size(); ++i)
    s += (i ? "," : "") + std::to_string(v[i]);
  return s + "}";
}

// world moments reordered so the X dims come first
void reorder(const GaussianWorld& w, Eigen::VectorXd& mu_p, Eigen::MatrixXd& sigma_p) {
  std::vector<int> perm = w.ix;
  perm.insert(perm.end(), w.iy.begin(), w.iy.end());
  const int d = w.d();
  mu_p.resize(d);
  sigma_p.resize(d, d);
  for (int a = 0; a < d; ++a) {
    mu_p(a) = w.mu(perm[a]);
    for (int b = 0; b < d; ++b) sigma_p(a, b) = w.sigma(perm[a], perm[b]);
  }
}

Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  std::vector<double> data(static_cast<std::size_t>(m.rows()) * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      data[static_cast<std::size_t>(r) * m.cols() + c] = m(r, c);
  return Tensor::from_data({static_cast<int>(m.rows()), static_cast<int>(m.cols())},
                           std::move(data));
}

void check_channel(const Tensor& v, int n, const char* who) {
  if (v.shape() != Shape{n, 1, 1})
    throw std::runtime_error(std::string(who) + ": expected [" + std::to_string(n) +
                             ",1,1] channel state");
}

}  // namespace

void GaussianWorld::validate() const {
  const int n = d();
  if (n < 1) throw std::runtime_error("GaussianWorld: empty mean");
  if (sigma.rows() != n || sigma.cols() != n)
    throw std::runtime_error("GaussianWorld: sigma is " + std::to_string(sigma.rows()) +
                             "x" + std::to_string(sigma.cols()) + " for d=" +
                             std::to_string(n));
  if (!sigma.isApprox(sigma.transpose(), 1e-12))
    throw std::runtime_error("GaussianWorld: sigma not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("GaussianWorld: sigma not positive definite");
  if (ix.empty() || iy.empty())
    throw std::runtime_error("GaussianWorld: both channels need at least one dim");
  std::vector<int> all = ix;
  all.insert(all.end(), iy.begin(), iy.end());
  std::vector<int> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  for (int a = 0; a < n; ++a)
    if (sorted[static_cast<std::size_t>(a)] != a)
      throw std::runtime_error("GaussianWorld: ix " + idx_str(ix) + " and iy " +
                               idx_str(iy) + " must partition 0.." +
                               std::to_string(n - 1));
  if (static_cast<int>(all.size()) != n)
    throw std::runtime_error("GaussianWorld: partition has wrong size");
}

GaussianWorld make_rho_world(double rho, double mu_x, double mu_y) {
  if (std::abs(rho) >= 1.0) throw std::runtime_error("make_rho_world: |rho| must be < 1");
  GaussianWorld w;
  w.mu = Eigen::Vector2d(mu_x, mu_y);
  w.sigma = Eigen::Matrix2d{{1.0, rho}, {rho, 1.0}};
  w.ix = {0};
  w.iy = {1};
  return w;
}

ConditionalMoments conditional(const GaussianWorld& w, const Eigen::VectorXd& x_star) {
  w.validate();
  const int nx = static_cast<int>(w.ix.size()), ny = static_cast<int>(w.iy.size());
  if (x_star.size() != nx)
    throw std::runtime_error("conditional: x_star has " + std::to_string(x_star.size()) +
                             " entries, world observes " + std::to_string(nx));
  Eigen::VectorXd mu_x(nx), mu_y(ny);
  Eigen::MatrixXd s_xx(nx, nx), s_yx(ny, nx), s_yy(ny, ny);
  for (int a = 0; a < nx; ++a) {
    mu_x(a) = w.mu(w.ix[a]);
    for (int b = 0; b < nx; ++b) s_xx(a, b) = w.sigma(w.ix[a], w.ix[b]);
  }
  for (int a = 0; a < ny; ++a) {
    mu_y(a) = w.mu(w.iy[a]);
    for (int b = 0; b < nx; ++b) s_yx(a, b) = w.sigma(w.iy[a], w.ix[b]);
    for (int b = 0; b < ny; ++b) s_yy(a, b) = w.sigma(w.iy[a], w.iy[b]);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(s_xx);
  Eigen::MatrixXd gain = s_yx * llt.solve(Eigen::MatrixXd::Identity(nx, nx));
  ConditionalMoments out;
  out.mean = mu_y + gain * (x_star - mu_x);
  out.cov = s_yy - gain * s_yx.transpose();
  return out;
}

OracleDenoiser::OracleDenoiser(GaussianWorld world, NoiseSchedule sched)
    : world_(std::move(world)), sched_(std::move(sched)) {
  world_.validate();
  Eigen::VectorXd mu_p;
  Eigen::MatrixXd sigma_p;
  reorder(world_, mu_p, sigma_p);
  const int d = world_.d();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  coef_.reserve(static_cast<std::size_t>(sched_.T) + 1);
  center_.reserve(static_cast<std::size_t>(sched_.T) + 1);
  coef_.push_back(Tensor::zeros({1}));  // t=0 unused
  center_.push_back(Tensor::zeros({1}));
  for (int t = 1; t <= sched_.T; ++t) {
    const double ab = sched_.alpha_bar(t);
    Eigen::MatrixXd m = ab * sigma_p + (1.0 - ab) * eye;
    Eigen::MatrixXd a = std::sqrt(1.0 - ab) * m.ldlt().solve(eye);
    coef_.push_back(matrix_tensor(a));
    Eigen::MatrixXd c = std::sqrt(ab) * mu_p;
    center_.push_back(matrix_tensor(c));
  }
}

std::pair<Tensor, Tensor> OracleDenoiser::predict_eps(const Tensor& x_t,
                                                      const Tensor& y_t, int t) const {
  const int nx = static_cast<int>(world_.ix.size());
  const int ny = static_cast<int>(world_.iy.size());
  check_channel(x_t, nx, "OracleDenoiser");
  check_channel(y_t, ny, "OracleDenoiser");
  if (t < 1 || t > sched_.T)
    throw std::runtime_error("OracleDenoiser: t=" + std::to_string(t) +
                             " outside schedule 1.." + std::to_string(sched_.T));
  const int d = nx + ny;
  Tensor v = reshape(concat_channels(x_t, y_t), {d, 1});
  Tensor e = matmul(coef_[static_cast<std::size_t>(t)],
                    sub(v, center_[static_cast<std::size_t>(t)]));
  Tensor e3 = reshape(e, {d, 1, 1});
  return {slice_channels(e3, 0, nx), slice_channels(e3, nx, d)};
}

OracleSuiteReport run_oracle_suite(const GaussianWorld& w, const NoiseSchedule& sched,
                                   const OracleSuiteConfig& cfg) {
  if (cfg.n_samples < 1) throw std::runtime_error("run_oracle_suite: n_samples < 1");
  OracleDenoiser model(w, sched);
  const int nx = static_cast<int>(w.ix.size());
  const int ny = static_cast<int>(w.iy.size());
  const bool guided = !cfg.x_star.empty();

  GuidanceContext ctx;
  if (guided) {
    if (static_cast<int>(cfg.x_star.size()) != nx)
      throw std::runtime_error("run_oracle_suite: x_star size mismatch");
    cfg.guidance.validate();
    ctx.plan = cfg.guidance;
    ctx.obs.x_star = Tensor::from_data({nx, 1, 1}, cfg.x_star);
    ctx.obs.omega = Tensor::full({nx, 1, 1}, 1.0);
    ctx.obs.policy = cfg.policy;
  }

  Rng root(cfg.seed);
  const int d = nx + ny;
  std::vector<double> sum(static_cast<std::size_t>(ny), 0.0);
  std::vector<double> sumsq(static_cast<std::size_t>(ny), 0.0);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd acc2 = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd v_full(d);
  for (int i = 0; i < cfg.n_samples; ++i) {
    Rng traj = root.split(static_cast<std::uint64_t>(i));
    PairState init{Tensor::zeros({nx, 1, 1}), Tensor::zeros({ny, 1, 1}),
                   cfg.plan.ts.front()};
    traj.fill_gauss(init.x.mutable_data());
    traj.fill_gauss(init.y.mutable_data());
    DenoiseResult res =
        full_denoise(model, init, cfg.plan, guided ? &ctx : nullptr, traj);
    for (int c = 0; c < ny; ++c) {
      const double v = res.state.y.data()[static_cast<std::size_t>(c)];
      sum[static_cast<std::size_t>(c)] += v;
      sumsq[static_cast<std::size_t>(c)] += v * v;
    }
    for (int c = 0; c < nx; ++c) v_full(c) = res.state.x.data()[static_cast<std::size_t>(c)];
    for (int c = 0; c < ny; ++c) v_full(nx + c) = res.state.y.data()[static_cast<std::size_t>(c)];
    acc += v_full;
    acc2 += v_full * v_full.transpose();
  }

  OracleSuiteReport rep;
  rep.strategy = guided ? to_string(cfg.guidance.strategy) : "unguided";
  rep.eta = guided ? cfg.guidance.eta : 0.0;
  rep.f = cfg.guidance.f;
  rep.R = cfg.guidance.R;
  rep.n = cfg.n_samples;
  const double n = static_cast<double>(cfg.n_samples);
  for (int c = 0; c < ny; ++c) {
    const double m = sum[static_cast<std::size_t>(c)] / n;
    rep.mean_y.push_back(m);
    rep.var_y.push_back((sumsq[static_cast<std::size_t>(c)] - n * m * m) /
                        std::max(n - 1.0, 1.0));
  }
  if (guided) {
    Eigen::VectorXd xs(nx);
    for (int a = 0; a < nx; ++a) xs(a) = cfg.x_star[static_cast<std::size_t>(a)];
    ConditionalMoments cm = conditional(w, xs);
    for (int c = 0; c < ny; ++c) {
      rep.analytic_mean.push_back(cm.mean(c));
      rep.analytic_var.push_back(cm.cov(c, c));
    }
  } else {
    for (int c = 0; c < ny; ++c) {
      rep.analytic_mean.push_back(w.mu(w.iy[static_cast<std::size_t>(c)]));
      rep.analytic_var.push_back(w.sigma(w.iy[static_cast<std::size_t>(c)],
                                         w.iy[static_cast<std::size_t>(c)]));
    }
  }
  for (int c = 0; c < ny; ++c) {
    rep.mean_err = std::max(rep.mean_err, std::abs(rep.mean_y[static_cast<std::size_t>(c)] -
                                                   rep.analytic_mean[static_cast<std::size_t>(c)]));
    rep.var_err = std::max(rep.var_err, std::abs(rep.var_y[static_cast<std::size_t>(c)] -
                                                 rep.analytic_var[static_cast<std::size_t>(c)]));
  }
  Eigen::VectorXd m_full = acc / n;
  Eigen::MatrixXd c_full = (acc2 - n * m_full * m_full.transpose()) / std::max(n - 1.0, 1.0);
  for (int a = 0; a < d; ++a) {
    rep.mean_full.push_back(m_full(a));
    for (int b = 0; b < d; ++b) rep.cov_full.push_back(c_full(a, b));
  }
  return rep;
}

std::string suite_csv_row(const OracleSuiteReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%d,%d,%.6f,%.6f", r.strategy.c_str(), r.eta,
                r.f, r.R, r.mean_err, r.var_err);
  return buf;
}

std::string suite_json(const OracleSuiteReport& r) {
  nlohmann::json j;
  j["strategy"] = r.strategy;
  j["eta"] = r.eta;
  j["f"] = r.f;
  j["R"] = r.R;
  j["n"] = r.n;
  j["mean_y"] = r.mean_y;
  j["var_y"] = r.var_y;
  j["analytic_mean"] = r.analytic_mean;
  j["analytic_var"] = r.analytic_var;
  j["mean_err"] = r.mean_err;
  j["var_err"] = r.var_err;
  j["mean_full"] = r.mean_full;
  j["cov_full"] = r.cov_full;
  return j.dump(2) + "\n";
}

}  // namespace pairdiff
