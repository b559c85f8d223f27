#pragma once

#include <cmath>
#include <vector>

#include "abisim/nn/params.hpp"

namespace abisim::nn {

template <typename Scalar>
class Adam {
public:
  Adam(ParamList<Scalar> params, Scalar lr, Scalar beta1 = Scalar(0.9),
       Scalar beta2 = Scalar(0.999), Scalar eps = Scalar(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.push_back(Matrix<Scalar>::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Matrix<Scalar>::Zero(p.value->rows(), p.value->cols()));
    }
  }

  const ParamList<Scalar>& params() const { return params_; }
  Scalar learning_rate() const { return lr_; }
  void set_learning_rate(Scalar lr) { lr_ = lr; }

  void zero_grad() { nn::zero_grad(params_); }

  /// One Adam update from the accumulated gradients; gradients are cleared afterwards.
  void step() {
    ++t_;
    const Scalar c1 = Scalar(1) - std::pow(beta1_, Scalar(t_));
    const Scalar c2 = Scalar(1) - std::pow(beta2_, Scalar(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& g = *params_[i].grad;
      m_[i] = beta1_ * m_[i] + (Scalar(1) - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (Scalar(1) - beta2_) * g.cwiseAbs2();
      params_[i].value->array() -=
          lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
      g.setZero();
    }
  }

private:
  ParamList<Scalar> params_;
  std::vector<Matrix<Scalar>> m_, v_;
  Scalar lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace abisim::nn
