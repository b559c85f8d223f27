#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "abisim/common.hpp"

namespace abisim::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Non-owning handle to one named parameter array and its gradient buffer.
template <typename Scalar>
struct ParamView {
  std::string name;
  Matrix<Scalar>* value;
  Matrix<Scalar>* grad;
};

template <typename Scalar>
using ParamList = std::vector<ParamView<Scalar>>;

template <typename Scalar>
void zero_grad(const ParamList<Scalar>& params) {
  for (const auto& p : params) p.grad->setZero();
}

template <typename Scalar>
Eigen::Index parameter_count(const ParamList<Scalar>& params) {
  Eigen::Index n = 0;
  for (const auto& p : params) n += p.value->size();
  return n;
}

template <typename Scalar>
void check_same_layout(const ParamList<Scalar>& a, const ParamList<Scalar>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("parameter lists differ in length: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].value->rows() != b[i].value->rows() || a[i].value->cols() != b[i].value->cols()) {
      throw ShapeError("shape mismatch for parameter '" + a[i].name + "'");
    }
  }
}

/// target <- source, elementwise.
template <typename Scalar>
void copy_params(const ParamList<Scalar>& target, const ParamList<Scalar>& source) {
  check_same_layout(target, source);
  for (std::size_t i = 0; i < target.size(); ++i) *target[i].value = *source[i].value;
}

/// Exponential moving average: target <- tau * online + (1 - tau) * target.
template <typename Scalar>
void ema_update(const ParamList<Scalar>& target, const ParamList<Scalar>& online, Scalar tau) {
  check_same_layout(target, online);
  for (std::size_t i = 0; i < target.size(); ++i) {
    *target[i].value = tau * *online[i].value + (Scalar(1) - tau) * *target[i].value;
  }
}

template <typename Scalar>
bool all_finite(const ParamList<Scalar>& params) {
  for (const auto& p : params) {
    if (!p.value->allFinite()) return false;
  }
  return true;
}

/// Flattens values (or gradients) into one vector in declaration order.
template <typename Scalar>
Vector<Scalar> flatten_values(const ParamList<Scalar>& params, bool gradients = false) {
  Vector<Scalar> out(parameter_count(params));
  Eigen::Index k = 0;
  for (const auto& p : params) {
    const auto& m = gradients ? *p.grad : *p.value;
    out.segment(k, m.size()) = Eigen::Map<const Vector<Scalar>>(m.data(), m.size());
    k += m.size();
  }
  return out;
}

/// SHA-256 hex digest of all parameter bytes, in declaration order.
std::string fingerprint(const ParamList<float>& params);
std::string fingerprint(const ParamList<double>& params);

}  // namespace abisim::nn
