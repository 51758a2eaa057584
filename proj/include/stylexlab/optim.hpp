#pragma once

#include <cmath>
#include <vector>

#include "stylexlab/nn.hpp"
#include "stylexlab/simd/kernels.hpp"

namespace stylexlab::optim {

class Adam {
 public:
  Adam() = default;
  Adam(nn::ParamList<float> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0f);
      v_.emplace_back(p->size(), 0.0f);
    }
  }

  // Applies one update from the accumulated grads, scaled by grad_scale.
  void step(float grad_scale = 1.0f) {
    ++t_;
    const double lr_t =
        lr_ * std::sqrt(1.0 - std::pow(b2_, t_)) / (1.0 - std::pow(b1_, t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (grad_scale != 1.0f)
        for (auto& g : p->grad) g *= grad_scale;
      simd::adam_update<float>(p->size(), static_cast<float>(lr_t), static_cast<float>(b1_),
                               static_cast<float>(b2_), static_cast<float>(eps_), p->value.data(),
                               p->grad.data(), m_[i].data(), v_[i].data());
    }
  }

  long steps() const { return t_; }
  const nn::ParamList<float>& params() const { return params_; }

 private:
  nn::ParamList<float> params_;
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(nn::ParamList<float> params, double lr, double momentum)
      : params_(std::move(params)), lr_(lr), mu_(momentum) {
    for (auto* p : params_) vel_.emplace_back(p->size(), 0.0f);
  }

  void step(float grad_scale = 1.0f) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      auto& vel = vel_[i];
      for (std::size_t j = 0; j < p->size(); ++j) {
        vel[j] = static_cast<float>(mu_) * vel[j] + grad_scale * p->grad[j];
        p->value[j] -= static_cast<float>(lr_) * vel[j];
      }
    }
  }

 private:
  nn::ParamList<float> params_;
  double lr_ = 0.01, mu_ = 0.9;
  std::vector<std::vector<float>> vel_;
};

}  // namespace stylexlab::optim
