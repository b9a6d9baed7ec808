#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "pairdiff/tensor.hpp"

namespace pairdiff {

// Adam with bias correction. Parameter identity and order must stay the same
// across step() calls; moment buffers are sized on first use.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (lr < 0.0) throw std::runtime_error("Adam: negative learning rate");
  }

  void step(std::vector<Tensor>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].size(), 0.0);
        v_[i].assign(params[i].size(), 0.0);
      }
    }
    if (m_.size() != params.size())
      throw std::runtime_error("Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad())
        throw std::runtime_error("Adam: parameter has no gradient");
      const std::vector<double>& g = params[i].grad();
      std::vector<double>& x = params[i].mutable_data();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::size_t j = 0; j < x.size(); ++j) {
        m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
        v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
        double mhat = m[j] / c1;
        double vhat = v[j] / c2;
        x[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace pairdiff
