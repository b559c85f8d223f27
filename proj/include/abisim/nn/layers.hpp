#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "abisim/nn/params.hpp"

namespace abisim::nn {

template <typename Scalar>
void uniform_init(Matrix<Scalar>& m, Scalar bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-double(bound), double(bound));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = Scalar(dist(rng));
}

/// Fully connected layer on column-major activations of shape (features, batch).
template <typename Scalar>
class Linear {
public:
  using Mat = Matrix<Scalar>;

  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng)
      : weight(out_features, in_features), bias(out_features, 1),
        grad_weight(Mat::Zero(out_features, in_features)), grad_bias(Mat::Zero(out_features, 1)) {
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(in_features));
    uniform_init(weight, bound, rng);
    uniform_init(bias, bound, rng);
  }

  int in_features() const { return int(weight.cols()); }
  int out_features() const { return int(weight.rows()); }

  Mat infer(const Mat& x) const {
    Mat y = weight * x;
    y.colwise() += bias.col(0);
    return y;
  }

  Mat forward(const Mat& x) {
    input_ = x;
    return infer(x);
  }

  /// Accumulates parameter gradients and returns d(loss)/d(input).
  Mat backward(const Mat& dy) {
    grad_weight.noalias() += dy * input_.transpose();
    grad_bias += dy.rowwise().sum();
    return weight.transpose() * dy;
  }

  void parameters(ParamList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight, &grad_weight});
    out.push_back({prefix + ".bias", &bias, &grad_bias});
  }

  Mat weight, bias, grad_weight, grad_bias;

private:
  Mat input_;
};

struct Conv2dShape {
  int in_channels = 0;
  int out_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int stride = 1;
  int kernel = 3;
  int padding = 1;

  int out_height() const { return (in_height + 2 * padding - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * padding - kernel) / stride + 1; }
  int patch_size() const { return in_channels * kernel * kernel; }
};

/// 2-D convolution over feature maps stored as (channels, batch * height * width), row-major,
/// so that each channel plane of each sample is contiguous. Lowered to a GEMM via im2col.
template <typename Scalar>
class Conv2d {
public:
  using Mat = Matrix<Scalar>;
  using RowMat = RowMatrix<Scalar>;

  Conv2d() = default;
  Conv2d(const Conv2dShape& shape, Rng& rng)
      : weight(shape.out_channels, shape.patch_size()), bias(shape.out_channels, 1),
        grad_weight(Mat::Zero(shape.out_channels, shape.patch_size())),
        grad_bias(Mat::Zero(shape.out_channels, 1)), shape_(shape) {
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(shape.patch_size()));
    uniform_init(weight, bound, rng);
    uniform_init(bias, bound, rng);
  }

  const Conv2dShape& shape() const { return shape_; }

  RowMat infer(const RowMat& x) const {
    RowMat cols = im2col(x);
    return apply(cols);
  }

  RowMat forward(const RowMat& x) {
    cols_ = im2col(x);
    batch_ = int(x.cols()) / (shape_.in_height * shape_.in_width);
    return apply(cols_);
  }

  /// Accumulates parameter gradients; returns the input gradient when requested.
  RowMat backward(const RowMat& dy, bool need_input_grad) {
    grad_weight.noalias() += dy * cols_.transpose();
    grad_bias += dy.rowwise().sum();
    if (!need_input_grad) return RowMat();
    RowMat dcols = weight.transpose() * dy;
    return col2im(dcols, batch_);
  }

  void parameters(ParamList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight, &grad_weight});
    out.push_back({prefix + ".bias", &bias, &grad_bias});
  }

  Mat weight, bias, grad_weight, grad_bias;

private:
  RowMat apply(const RowMat& cols) const {
    RowMat y(weight.rows(), cols.cols());
    y.noalias() = weight * cols;
    y.colwise() += bias.col(0);
    return y;
  }

  // Output columns [lo, hi) whose input column ox * stride - pad + offset lies inside [0, extent).
  static std::pair<int, int> valid_range(int out_extent, int extent, int stride, int pad, int offset) {
    int lo = 0;
    while (lo < out_extent && lo * stride - pad + offset < 0) ++lo;
    int hi = out_extent;
    while (hi > lo && (hi - 1) * stride - pad + offset >= extent) --hi;
    return {lo, hi};
  }

  RowMat im2col(const RowMat& x) const {
    const int h = shape_.in_height, w = shape_.in_width, k = shape_.kernel;
    const int oh = shape_.out_height(), ow = shape_.out_width();
    const int s = shape_.stride, pad = shape_.padding;
    const int batch = int(x.cols()) / (h * w);
    RowMat cols = RowMat::Zero(shape_.patch_size(), Eigen::Index(batch) * oh * ow);
    for (int ky = 0; ky < k; ++ky) {
      const auto [ylo, yhi] = valid_range(oh, h, s, pad, ky);
      for (int kx = 0; kx < k; ++kx) {
        const auto [xlo, xhi] = valid_range(ow, w, s, pad, kx);
        const int run = xhi - xlo;
        if (run <= 0) continue;
        for (int c = 0; c < shape_.in_channels; ++c) {
          const Scalar* src_plane = x.row(c).data();
          Scalar* dst = cols.row((c * k + ky) * k + kx).data();
          for (int b = 0; b < batch; ++b) {
            const Scalar* src = src_plane + std::ptrdiff_t(b) * h * w;
            Scalar* out = dst + std::ptrdiff_t(b) * oh * ow;
            for (int oy = ylo; oy < yhi; ++oy) {
              const Scalar* in_row = src + (oy * s - pad + ky) * w + (xlo * s - pad + kx);
              Scalar* out_row = out + oy * ow + xlo;
              if (s == 1) {
                std::copy(in_row, in_row + run, out_row);
              } else {
                for (int i = 0; i < run; ++i) out_row[i] = in_row[i * s];
              }
            }
          }
        }
      }
    }
    return cols;
  }

  RowMat col2im(const RowMat& cols, int batch) const {
    const int h = shape_.in_height, w = shape_.in_width, k = shape_.kernel;
    const int oh = shape_.out_height(), ow = shape_.out_width();
    const int s = shape_.stride, pad = shape_.padding;
    RowMat dx = RowMat::Zero(shape_.in_channels, Eigen::Index(batch) * h * w);
    for (int ky = 0; ky < k; ++ky) {
      const auto [ylo, yhi] = valid_range(oh, h, s, pad, ky);
      for (int kx = 0; kx < k; ++kx) {
        const auto [xlo, xhi] = valid_range(ow, w, s, pad, kx);
        const int run = xhi - xlo;
        if (run <= 0) continue;
        for (int c = 0; c < shape_.in_channels; ++c) {
          Scalar* dst_plane = dx.row(c).data();
          const Scalar* src = cols.row((c * k + ky) * k + kx).data();
          for (int b = 0; b < batch; ++b) {
            Scalar* dst = dst_plane + std::ptrdiff_t(b) * h * w;
            const Scalar* in = src + std::ptrdiff_t(b) * oh * ow;
            for (int oy = ylo; oy < yhi; ++oy) {
              Scalar* out_row = dst + (oy * s - pad + ky) * w + (xlo * s - pad + kx);
              const Scalar* in_row = in + oy * ow + xlo;
              for (int i = 0; i < run; ++i) out_row[i * s] += in_row[i];
            }
          }
        }
      }
    }
    return dx;
  }

  Conv2dShape shape_;
  RowMat cols_;
  int batch_ = 0;
};

/// (C, B*HW) row-major feature maps -> (C*HW, B) column-major features.
template <typename Scalar>
Matrix<Scalar> flatten_maps(const RowMatrix<Scalar>& maps, int plane) {
  const int channels = int(maps.rows());
  const int batch = int(maps.cols()) / plane;
  Matrix<Scalar> out(Eigen::Index(channels) * plane, batch);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      out.col(b).segment(Eigen::Index(c) * plane, plane) =
          maps.row(c).segment(Eigen::Index(b) * plane, plane).transpose();
    }
  }
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> unflatten_maps(const Matrix<Scalar>& flat, int channels, int plane) {
  const int batch = int(flat.cols());
  RowMatrix<Scalar> maps(channels, Eigen::Index(batch) * plane);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      maps.row(c).segment(Eigen::Index(b) * plane, plane) =
          flat.col(b).segment(Eigen::Index(c) * plane, plane).transpose();
    }
  }
  return maps;
}

template <typename Derived>
void relu_inplace(Eigen::MatrixBase<Derived>& x) {
  x = x.cwiseMax(typename Derived::Scalar(0));
}

/// Masks dy by the positive part of a ReLU output.
template <typename DerivedG, typename DerivedY>
void relu_backward_inplace(Eigen::MatrixBase<DerivedG>& dy, const Eigen::MatrixBase<DerivedY>& y) {
  using Scalar = typename DerivedG::Scalar;
  dy = (y.array() > Scalar(0)).select(dy, Scalar(0));
}

}  // namespace abisim::nn
