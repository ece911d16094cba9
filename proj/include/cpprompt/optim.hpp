#pragma once

#include <cmath>
#include <vector>

#include "cpprompt/tensor.hpp"

namespace cpprompt {

/// SGD with heavy-ball momentum: v ← μ·v + g, p ← p − lr·v. Gradients are
/// zeroed after each step.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double lr, double momentum = 0.9)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    for (const auto& p : params_) {
      if (!p.requires_grad()) throw UsageError("Sgd: parameter is not trainable");
      velocity_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.size() == 0) continue;
      if (!p.has_grad()) throw UsageError("Sgd: parameter " + std::to_string(i) + " has no gradient");
      auto data = p.data();
      auto grad = p.grad();
      auto& vel = velocity_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        vel[j] = momentum_ * vel[j] + grad[j];
        data[j] -= lr_ * vel[j];
      }
      p.zero_grad();
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

/// A single update starting from zero velocity.
inline void sgd_step(std::vector<Tensor> params, double lr, double momentum = 0.0) {
  Sgd(std::move(params), lr, momentum).step();
}

/// Adam, used for backbone pretraining only. Parameters without a gradient
/// in a given step are skipped.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto data = p.data();
      auto grad = p.grad();
      for (std::size_t j = 0; j < data.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * grad[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * grad[j] * grad[j];
        data[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
      p.zero_grad();
    }
  }

  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace cpprompt
