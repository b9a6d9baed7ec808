#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "pairdiff/rng.hpp"
#include "pairdiff/tensor.hpp"

namespace checks {

// Central finite differences against reverse-mode gradients. `loss_fn` must
// rebuild its graph from `leaves` on every call (leaves are mutated in place).
// Returns the worst relative error seen.
inline double fd_max_rel_err(std::vector<pairdiff::Tensor>& leaves,
                             const std::function<pairdiff::Tensor()>& loss_fn,
                             double h = 1e-5) {
  using pairdiff::Tensor;
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  pairdiff::backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) analytic.push_back(l.grad());

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& data = leaves[li].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double lp = loss_fn().item();
      data[i] = keep - h;
      const double lm = loss_fn().item();
      data[i] = keep;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[li][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  for (auto& l : leaves) l.zero_grad();
  return worst;
}

// random data away from the relu/abs kinks
inline std::vector<double> rand_vec(std::size_t n, pairdiff::Rng& rng, double min_mag = 0.0) {
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.next_gauss();
    if (min_mag > 0.0 && std::fabs(x) < min_mag) x = x < 0 ? x - min_mag : x + min_mag;
  }
  return v;
}

}  // namespace checks
