#pragma once

#include <span>
#include <vector>

#include "abisim/gridworld.hpp"
#include "abisim/nn/params.hpp"

namespace abisim {

/// Stacks observations into the encoder input layout (channels, batch * height * width).
template <typename Scalar>
nn::RowMatrix<Scalar> stack_observations(std::span<const Observation* const> batch) {
  if (batch.empty()) return {};
  const Observation& first = *batch.front();
  const int plane = first.height * first.width;
  nn::RowMatrix<Scalar> out(first.channels, Eigen::Index(batch.size()) * plane);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Observation& o = *batch[b];
    if (o.channels != first.channels || o.height != first.height || o.width != first.width) {
      throw ShapeError("observations in a batch must share one shape");
    }
    for (int c = 0; c < o.channels; ++c) {
      const Scalar scale = c == Observation::kDistractor ? Scalar(1) / Scalar(127) : Scalar(1);
      const std::int8_t* src = o.data.data() + std::size_t(c) * plane;
      Scalar* dst = out.row(c).data() + std::ptrdiff_t(b) * plane;
      for (int i = 0; i < plane; ++i) dst[i] = Scalar(src[i]) * scale;
    }
  }
  return out;
}

template <typename Scalar>
nn::RowMatrix<Scalar> stack_observations(const std::vector<Observation>& batch) {
  std::vector<const Observation*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& o : batch) ptrs.push_back(&o);
  return stack_observations<Scalar>(std::span<const Observation* const>(ptrs));
}

/// One-hot action columns, (n_actions, batch).
template <typename Scalar>
nn::Matrix<Scalar> one_hot(std::span<const int> actions, int n_actions) {
  nn::Matrix<Scalar> out = nn::Matrix<Scalar>::Zero(n_actions, Eigen::Index(actions.size()));
  for (std::size_t i = 0; i < actions.size(); ++i) out(actions[i], Eigen::Index(i)) = Scalar(1);
  return out;
}

}  // namespace abisim
