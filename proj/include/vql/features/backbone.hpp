#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vql/core/box.hpp"
#include "vql/core/errors.hpp"
#include "vql/core/image.hpp"
#include "vql/core/rng.hpp"

namespace vql::features {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C-dimensional region descriptor shared by proposals and the query crop.
template <typename Scalar>
using FeatureVector = Vec<Scalar>;

struct BackboneConfig {
  std::vector<int> channels{8, 8, 8, 8};  // output channels of the 3x3 conv blocks
  int grid = 5;                           // RoI pooling grid G
  int samples = 2;                        // bilinear samples per grid cell and axis
  int feature_dim = 64;                   // C
};

/// Spatial feature map: channels x (height * width).
template <typename Scalar>
struct FeatureMap {
  int height = 0;
  int width = 0;
  RowMat<Scalar> values;
};

/// One bilinear tap of the pooling operator: pooled(cell) += weight * map(pixel).
struct PoolTap {
  int cell;
  Eigen::Index pixel;
  double weight;
};

/// RoI-Align sampling taps for `box` on an (height x width) map. Sample
/// coordinates are clamped to the map; boxes entirely outside are rejected.
std::vector<PoolTap> pool_taps(const Box& box, int height, int width, int grid, int samples);

/// Four 3x3 same-padded ReLU conv blocks at full resolution, then RoI-Align to a
/// GxG grid and an affine map to C dims. Weights are read-only during inference.
template <typename Scalar>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) { initialize(seed); }

  const BackboneConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.feature_dim; }
  int map_channels() const { return cfg_.channels.empty() ? 3 : cfg_.channels.back(); }
  int pooled_dim() const { return map_channels() * cfg_.grid * cfg_.grid; }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    conv_w_.clear();
    conv_b_.clear();
    int cin = 3;
    for (int cout : cfg_.channels) {
      Mat<Scalar> w(cout, cin * 9);
      const double std = std::sqrt(2.0 / (cin * 9));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(std * rng.normal());
      conv_w_.push_back(w);
      conv_b_.push_back(Mat<Scalar>::Zero(cout, 1));
      cin = cout;
    }
    affine_w_.resize(cfg_.feature_dim, pooled_dim());
    const double std = std::sqrt(1.0 / pooled_dim());
    for (Eigen::Index i = 0; i < affine_w_.size(); ++i) affine_w_.data()[i] = static_cast<Scalar>(std * rng.normal());
    affine_b_ = Mat<Scalar>::Zero(cfg_.feature_dim, 1);
  }

  /// Named parameter arrays, for checkpointing.
  std::map<std::string, Mat<Scalar>*> parameters() {
    std::map<std::string, Mat<Scalar>*> out;
    for (std::size_t k = 0; k < conv_w_.size(); ++k) {
      out["backbone.conv" + std::to_string(k) + ".weight"] = &conv_w_[k];
      out["backbone.conv" + std::to_string(k) + ".bias"] = &conv_b_[k];
    }
    out["backbone.affine.weight"] = &affine_w_;
    out["backbone.affine.bias"] = &affine_b_;
    return out;
  }

  Mat<Scalar>& affine_weight() { return affine_w_; }
  Mat<Scalar>& affine_bias() { return affine_b_; }

  /// Spatial feature map of a 3-channel image.
  FeatureMap<Scalar> feature_map(const ImageT<Scalar>& img) const { return forward(img, nullptr); }

  /// RoI-pooled region descriptor (pre-affine), length channels * G * G.
  Vec<Scalar> pool_raw(const FeatureMap<Scalar>& map, const Box& box) const {
    const auto taps = pool_taps(box, map.height, map.width, cfg_.grid, cfg_.samples);
    const int cells = cfg_.grid * cfg_.grid;
    Vec<Scalar> pooled = Vec<Scalar>::Zero(map_channels() * cells);
    for (const PoolTap& t : taps) {
      for (int c = 0; c < map_channels(); ++c) pooled(c * cells + t.cell) += static_cast<Scalar>(t.weight) * map.values(c, t.pixel);
    }
    return pooled;
  }

  FeatureVector<Scalar> pool(const FeatureMap<Scalar>& map, const Box& box) const {
    return affine_w_ * pool_raw(map, box) + affine_b_.col(0);
  }

  /// Region feature of `box` in `img`.
  FeatureVector<Scalar> pool(const ImageT<Scalar>& img, const Box& box) const { return pool(feature_map(img), box); }

  /// Global pathway: the whole image pooled as one region.
  FeatureVector<Scalar> embed(const ImageT<Scalar>& region) const {
    if (region.empty()) throw DataError("backbone: empty image region");
    return pool(region, Box{0.0, 0.0, static_cast<double>(region.width), static_cast<double>(region.height)});
  }

  /// Gradient of <probe, pool(img, box)> with respect to the image pixels.
  ImageT<Scalar> input_gradient(const ImageT<Scalar>& img, const Box& box, const FeatureVector<Scalar>& probe) const {
    Trace trace;
    const FeatureMap<Scalar> map = forward(img, &trace);
    const Vec<Scalar> d_pooled = affine_w_.transpose() * probe;
    const int cells = cfg_.grid * cfg_.grid;
    RowMat<Scalar> grad = RowMat<Scalar>::Zero(map_channels(), static_cast<Eigen::Index>(map.height) * map.width);
    for (const PoolTap& t : pool_taps(box, map.height, map.width, cfg_.grid, cfg_.samples)) {
      for (int c = 0; c < map_channels(); ++c) grad(c, t.pixel) += static_cast<Scalar>(t.weight) * d_pooled(c * cells + t.cell);
    }
    for (int k = static_cast<int>(conv_w_.size()) - 1; k >= 0; --k) {
      grad = grad.cwiseProduct(trace.relu_mask[k]);
      const RowMat<Scalar> d_cols = conv_w_[k].transpose() * grad;
      grad = col2im(d_cols, static_cast<int>(conv_w_[k].cols() / 9), img.height, img.width);
    }
    ImageT<Scalar> out;
    out.height = img.height;
    out.width = img.width;
    out.data = grad;
    return out;
  }

 private:
  struct Trace {
    std::vector<RowMat<Scalar>> relu_mask;
  };

  static RowMat<Scalar> im2col(const RowMat<Scalar>& x, int height, int width) {
    const int cin = static_cast<int>(x.rows());
    RowMat<Scalar> cols = RowMat<Scalar>::Zero(cin * 9, static_cast<Eigen::Index>(height) * width);
    for (int c = 0; c < cin; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int row = c * 9 + ky * 3 + kx;
          for (int y = 0; y < height; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= height) continue;
            for (int x0 = 0; x0 < width; ++x0) {
              const int sx = x0 + kx - 1;
              if (sx < 0 || sx >= width) continue;
              cols(row, static_cast<Eigen::Index>(y) * width + x0) = x(c, static_cast<Eigen::Index>(sy) * width + sx);
            }
          }
        }
      }
    }
    return cols;
  }

  static RowMat<Scalar> col2im(const RowMat<Scalar>& cols, int cin, int height, int width) {
    RowMat<Scalar> x = RowMat<Scalar>::Zero(cin, static_cast<Eigen::Index>(height) * width);
    for (int c = 0; c < cin; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int row = c * 9 + ky * 3 + kx;
          for (int y = 0; y < height; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= height) continue;
            for (int x0 = 0; x0 < width; ++x0) {
              const int sx = x0 + kx - 1;
              if (sx < 0 || sx >= width) continue;
              x(c, static_cast<Eigen::Index>(sy) * width + sx) += cols(row, static_cast<Eigen::Index>(y) * width + x0);
            }
          }
        }
      }
    }
    return x;
  }

  FeatureMap<Scalar> forward(const ImageT<Scalar>& img, Trace* trace) const {
    if (img.empty() || img.channels() != 3) throw DataError("backbone: expected a non-empty 3-channel image");
    RowMat<Scalar> x = img.data;
    for (std::size_t k = 0; k < conv_w_.size(); ++k) {
      RowMat<Scalar> pre = conv_w_[k] * im2col(x, img.height, img.width);
      pre.colwise() += conv_b_[k].col(0);
      if (trace) trace->relu_mask.push_back((pre.array() > Scalar(0)).template cast<Scalar>().matrix());
      x = pre.cwiseMax(Scalar(0));
    }
    return {img.height, img.width, std::move(x)};
  }

  BackboneConfig cfg_;
  std::vector<Mat<Scalar>> conv_w_;
  std::vector<Mat<Scalar>> conv_b_;
  Mat<Scalar> affine_w_;
  Mat<Scalar> affine_b_;
};

}  // namespace vql::features
