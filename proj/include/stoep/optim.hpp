#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "stoep/autodiff.hpp"

namespace stoep {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-8;
};

// Adaptive moments with decoupled weight decay: each step first shrinks
// theta by lr * wd, then applies the bias-corrected moment update.
class AdamW {
 public:
  AdamW(std::vector<ad::Var> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& theta = params_[k].mutable_value();
      const Tensor& g = params_[k].grad();
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] -= cfg_.learning_rate * cfg_.weight_decay * theta[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        theta[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<ad::Var> params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace stoep
