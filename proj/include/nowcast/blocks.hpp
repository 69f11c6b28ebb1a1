#pragma once

#include <cstdint>

#include "nowcast/module.hpp"
#include "nowcast/ops.hpp"

namespace nowcast {

inline constexpr double kNormEps = 1e-5;
inline constexpr std::int64_t kCbamReduction = 16;
inline constexpr std::int64_t kCbamSpatialKernel = 7;
inline constexpr std::int64_t kSpadeHidden = 64;
inline constexpr std::int64_t kKernelsPerLayer = 2;

template <std::floating_point T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel, bool bias, Rng& rng);
  Var<T> forward(const Var<T>& x);
  Var<T>& weight() { return *weight_; }
  Var<T>* bias() { return bias_; }

 private:
  Var<T>* weight_ = nullptr;
  Var<T>* bias_ = nullptr;
};

template <std::floating_point T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::int64_t channels, bool affine = true);
  Var<T> forward(const Var<T>& x);
  Var<T>* gamma() { return gamma_; }
  Var<T>* beta() { return beta_; }

 private:
  Var<T>* gamma_ = nullptr;
  Var<T>* beta_ = nullptr;
  Tensor<T>* running_mean_ = nullptr;
  Tensor<T>* running_var_ = nullptr;
};

/// Per-channel 3x3 conv (channel multiplier `kernels_per_layer`) followed by a 1x1 conv.
template <std::floating_point T>
class DepthwiseSeparableConv : public Module<T> {
 public:
  DepthwiseSeparableConv(std::int64_t in_channels, std::int64_t out_channels,
                         std::int64_t kernels_per_layer, Rng& rng);
  Var<T> forward(const Var<T>& x);

 private:
  Var<T>* dw_weight_;
  Var<T>* dw_bias_;
  Var<T>* pw_weight_;
  Var<T>* pw_bias_;
};

/// Two units of [depthwise-separable conv -> batch norm -> ReLU]. Spatial size is preserved.
template <std::floating_point T>
class DscDoubleConv : public Module<T> {
 public:
  DscDoubleConv(std::int64_t in_channels, std::int64_t out_channels, std::int64_t mid_channels, Rng& rng,
                std::int64_t kernels_per_layer = kKernelsPerLayer);
  Var<T> forward(const Var<T>& x);
  std::int64_t in_channels() const { return in_; }
  std::int64_t out_channels() const { return out_; }

  /// Closed-form trainable parameter count for the block.
  static std::int64_t parameter_formula(std::int64_t in, std::int64_t out, std::int64_t mid,
                                        std::int64_t kernels_per_layer = kKernelsPerLayer);

 private:
  std::int64_t in_, out_;
  DepthwiseSeparableConv<T>* conv1_;
  BatchNorm2d<T>* bn1_;
  DepthwiseSeparableConv<T>* conv2_;
  BatchNorm2d<T>* bn2_;
};

/// Channel attention (shared bottleneck MLP over avg/max descriptors) followed by
/// spatial attention (7x7 conv over channel mean/max maps).
template <std::floating_point T>
class Cbam : public Module<T> {
 public:
  struct Gates {
    Var<T> channel;  // (N,C)
    Var<T> spatial;  // (N,1,H,W)
    Var<T> output;
  };

  Cbam(std::int64_t channels, Rng& rng, std::int64_t reduction = kCbamReduction,
       std::int64_t spatial_kernel = kCbamSpatialKernel);
  Var<T> forward(const Var<T>& x) { return forward_with_gates(x).output; }
  Gates forward_with_gates(const Var<T>& x);

 private:
  Var<T> mlp(const Var<T>& z);

  std::int64_t channels_;
  Var<T>* fc1_w_;
  Var<T>* fc1_b_;
  Var<T>* fc2_w_;
  Var<T>* fc2_b_;
  Var<T>* spatial_w_;
};

/// Parameter-free batch normalisation of x, modulated per pixel by scale/shift maps
/// computed from a (resized) conditioning input: out = xhat * (1 + gamma) + beta.
template <std::floating_point T>
class Spade : public Module<T> {
 public:
  Spade(std::int64_t channels, std::int64_t cond_channels, Rng& rng, std::int64_t hidden = kSpadeHidden);
  Var<T> forward(const Var<T>& x, const Var<T>& cond);
  std::int64_t cond_channels() const { return cond_channels_; }
  Conv2d<T>& gamma_conv() { return *gamma_; }
  Conv2d<T>& beta_conv() { return *beta_; }

 private:
  std::int64_t channels_, cond_channels_;
  BatchNorm2d<T>* norm_;
  Conv2d<T>* shared_;
  Conv2d<T>* gamma_;
  Conv2d<T>* beta_;
};

/// Convolution whose weight is divided by its leading singular value, estimated with one
/// power iteration per training forward pass; the iteration vectors persist as buffers.
template <std::floating_point T>
class SpectralConv2d : public Module<T> {
 public:
  SpectralConv2d(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel, Rng& rng);
  Var<T> forward(const Var<T>& x);
  /// Runs one power-iteration step on the stored vectors.
  void power_iteration();
  /// u^T W v for the current stored vectors.
  T sigma_estimate() const;
  /// Weight divided by the current sigma estimate.
  Tensor<T> normalized_weight() const;
  void set_power_iteration_enabled(bool on) { power_iteration_enabled_ = on; }
  Var<T>& weight() { return *weight_; }
  Var<T>& bias() { return *bias_; }

 private:
  Var<T>* weight_;
  Var<T>* bias_;
  Tensor<T>* u_;
  Tensor<T>* v_;
  bool power_iteration_enabled_ = true;
};

/// Main path [BN -> ReLU -> SN-conv] x2 plus shortcut [BN -> SN-conv], summed.
template <std::floating_point T>
class SpectralResidualBlock : public Module<T> {
 public:
  SpectralResidualBlock(std::int64_t in_channels, std::int64_t out_channels, std::int64_t mid_channels,
                        Rng& rng);
  Var<T> forward(const Var<T>& x);
  std::int64_t out_channels() const { return out_; }
  std::vector<SpectralConv2d<T>*> spectral_convs() { return {conv1_, conv2_, shortcut_conv_}; }

 private:
  std::int64_t in_, out_;
  BatchNorm2d<T>* bn1_;
  SpectralConv2d<T>* conv1_;
  BatchNorm2d<T>* bn2_;
  SpectralConv2d<T>* conv2_;
  BatchNorm2d<T>* shortcut_bn_;
  SpectralConv2d<T>* shortcut_conv_;
};

/// Toggles power iteration on every spectral conv below `root`.
template <std::floating_point T>
void set_power_iteration(Module<T>& root, bool on);

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class BatchNorm2d<float>;
extern template class BatchNorm2d<double>;
extern template class DepthwiseSeparableConv<float>;
extern template class DepthwiseSeparableConv<double>;
extern template class DscDoubleConv<float>;
extern template class DscDoubleConv<double>;
extern template class Cbam<float>;
extern template class Cbam<double>;
extern template class Spade<float>;
extern template class Spade<double>;
extern template class SpectralConv2d<float>;
extern template class SpectralConv2d<double>;
extern template class SpectralResidualBlock<float>;
extern template class SpectralResidualBlock<double>;

}  // namespace nowcast
