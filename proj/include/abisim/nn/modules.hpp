#pragma once

#include <array>
#include <string>
#include <vector>

#include "abisim/nn/layers.hpp"

namespace abisim::nn {

/// Architecture descriptor of the convolutional observation encoder:
/// three 3x3 conv + ReLU layers, flatten, linear projection to the embedding.
struct EncoderSpec {
  int in_channels = 3;
  int height = 15;
  int width = 15;
  std::array<int, 3> channels{16, 16, 16};
  std::array<int, 3> strides{1, 2, 1};
  int embed_dim = 64;

  bool operator==(const EncoderSpec&) const = default;

  std::array<Conv2dShape, 3> conv_shapes() const {
    std::array<Conv2dShape, 3> shapes;
    int c = in_channels, h = height, w = width;
    for (int i = 0; i < 3; ++i) {
      shapes[i] = Conv2dShape{c, channels[i], h, w, strides[i]};
      c = channels[i];
      h = shapes[i].out_height();
      w = shapes[i].out_width();
    }
    return shapes;
  }

  int flat_dim() const {
    const auto last = conv_shapes()[2];
    return last.out_channels * last.out_height() * last.out_width();
  }
};

template <typename Scalar>
class Encoder {
public:
  using Mat = Matrix<Scalar>;
  using RowMat = RowMatrix<Scalar>;

  Encoder() = default;
  Encoder(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
    const auto shapes = spec.conv_shapes();
    for (int i = 0; i < 3; ++i) convs_[i] = Conv2d<Scalar>(shapes[i], rng);
    head_ = Linear<Scalar>(spec.flat_dim(), spec.embed_dim, rng);
  }

  const EncoderSpec& spec() const { return spec_; }
  int embed_dim() const { return spec_.embed_dim; }

  /// obs: (in_channels, batch * height * width). Returns (embed_dim, batch).
  Mat infer(const RowMat& obs) const {
    RowMat h = obs;
    for (const auto& conv : convs_) {
      h = conv.infer(h);
      relu_inplace(h);
    }
    return head_.infer(flatten_maps<Scalar>(h, last_plane()));
  }

  Mat forward(const RowMat& obs) {
    RowMat h = obs;
    for (int i = 0; i < 3; ++i) {
      h = convs_[i].forward(h);
      relu_inplace(h);
      acts_[i] = h;
    }
    return head_.forward(flatten_maps<Scalar>(h, last_plane()));
  }

  void backward(const Mat& dz) {
    Mat dflat = head_.backward(dz);
    RowMat dh = unflatten_maps<Scalar>(dflat, spec_.channels[2], last_plane());
    for (int i = 2; i >= 0; --i) {
      relu_backward_inplace(dh, acts_[i]);
      dh = convs_[i].backward(dh, i > 0);
    }
  }

  void parameters(ParamList<Scalar>& out, const std::string& prefix) {
    for (int i = 0; i < 3; ++i) convs_[i].parameters(out, prefix + ".conv" + std::to_string(i));
    head_.parameters(out, prefix + ".fc");
  }

  ParamList<Scalar> parameters(const std::string& prefix = "encoder") {
    ParamList<Scalar> out;
    parameters(out, prefix);
    return out;
  }

private:
  int last_plane() const {
    const auto last = spec_.conv_shapes()[2];
    return last.out_height() * last.out_width();
  }

  EncoderSpec spec_;
  std::array<Conv2d<Scalar>, 3> convs_;
  Linear<Scalar> head_;
  std::array<RowMat, 3> acts_;
};

/// Multi-layer perceptron with ReLU between layers and a linear output.
template <typename Scalar>
class Mlp {
public:
  using Mat = Matrix<Scalar>;

  Mlp() = default;
  Mlp(int in_features, const std::vector<int>& hidden, int out_features, Rng& rng) {
    int prev = in_features;
    for (int width : hidden) {
      layers_.emplace_back(prev, width, rng);
      prev = width;
    }
    layers_.emplace_back(prev, out_features, rng);
    acts_.resize(layers_.size());
  }

  int in_features() const { return layers_.front().in_features(); }
  int out_features() const { return layers_.back().out_features(); }

  Mat infer(const Mat& x) const {
    Mat h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].infer(h);
      if (i + 1 < layers_.size()) relu_inplace(h);
    }
    return h;
  }

  Mat forward(const Mat& x) {
    Mat h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) {
        relu_inplace(h);
        acts_[i] = h;
      }
    }
    return h;
  }

  Mat backward(const Mat& dy) {
    Mat d = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) relu_backward_inplace(d, acts_[i]);
      d = layers_[i].backward(d);
    }
    return d;
  }

  void parameters(ParamList<Scalar>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].parameters(out, prefix + ".l" + std::to_string(i));
    }
  }

private:
  std::vector<Linear<Scalar>> layers_;
  std::vector<Mat> acts_;
};

}  // namespace abisim::nn
