#include "nowcast/blocks.hpp"

#include <cmath>

#include <Eigen/Core>
#include <fmt/format.h>

namespace nowcast {

namespace {

template <typename T>
void check_channels(const Var<T>& x, std::int64_t expected, const char* block) {
  const Dims4 d = dims4(x.shape(), block);
  if (d.c != expected) {
    throw ShapeError(fmt::format("{}: expected {} input channels, got {}", block, expected, d.c));
  }
}

template <typename T>
void normalize_in_place(Tensor<T>& t) {
  double s = 0.0;
  for (auto v : t.data()) s += double(v) * double(v);
  const double n = std::max(std::sqrt(s), 1e-12);
  for (auto& v : t.data()) v = static_cast<T>(v / n);
}

}  // namespace

template <std::floating_point T>
Conv2d<T>::Conv2d(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel, bool bias,
                  Rng& rng) {
  const std::int64_t fan_in = in_channels * kernel * kernel;
  weight_ = &this->register_parameter(
      "weight", uniform_fan_in<T>({out_channels, in_channels, kernel, kernel}, fan_in, rng));
  if (bias) bias_ = &this->register_parameter("bias", uniform_fan_in<T>({out_channels}, fan_in, rng));
}

template <std::floating_point T>
Var<T> Conv2d<T>::forward(const Var<T>& x) {
  return ops::conv2d(x, *weight_, bias_ ? *bias_ : Var<T>());
}

template <std::floating_point T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels, bool affine) {
  if (affine) {
    gamma_ = &this->register_parameter("weight", Tensor<T>({channels}, T{1}));
    beta_ = &this->register_parameter("bias", Tensor<T>({channels}, T{0}));
  }
  running_mean_ = &this->register_buffer("running_mean", Tensor<T>({channels}, T{0}));
  running_var_ = &this->register_buffer("running_var", Tensor<T>({channels}, T{1}));
}

template <std::floating_point T>
Var<T> BatchNorm2d<T>::forward(const Var<T>& x) {
  ops::BatchNormOptions opts;
  opts.training = this->is_training();
  opts.eps = kNormEps;
  return ops::batch_norm(x, gamma_ ? *gamma_ : Var<T>(), beta_ ? *beta_ : Var<T>(), *running_mean_,
                         *running_var_, opts);
}

template <std::floating_point T>
DepthwiseSeparableConv<T>::DepthwiseSeparableConv(std::int64_t in_channels, std::int64_t out_channels,
                                                  std::int64_t kernels_per_layer, Rng& rng) {
  const std::int64_t mid = in_channels * kernels_per_layer;
  dw_weight_ = &this->register_parameter("depthwise.weight", uniform_fan_in<T>({mid, 1, 3, 3}, 9, rng));
  dw_bias_ = &this->register_parameter("depthwise.bias", uniform_fan_in<T>({mid}, 9, rng));
  pw_weight_ =
      &this->register_parameter("pointwise.weight", uniform_fan_in<T>({out_channels, mid, 1, 1}, mid, rng));
  pw_bias_ = &this->register_parameter("pointwise.bias", uniform_fan_in<T>({out_channels}, mid, rng));
}

template <std::floating_point T>
Var<T> DepthwiseSeparableConv<T>::forward(const Var<T>& x) {
  return ops::conv2d(ops::depthwise_conv2d(x, *dw_weight_, *dw_bias_), *pw_weight_, *pw_bias_);
}

template <std::floating_point T>
DscDoubleConv<T>::DscDoubleConv(std::int64_t in_channels, std::int64_t out_channels,
                                std::int64_t mid_channels, Rng& rng, std::int64_t kernels_per_layer)
    : in_(in_channels), out_(out_channels) {
  if (mid_channels <= 0) mid_channels = out_channels;
  conv1_ = &this->register_module(
      "conv1", std::make_unique<DepthwiseSeparableConv<T>>(in_channels, mid_channels, kernels_per_layer, rng));
  bn1_ = &this->register_module("bn1", std::make_unique<BatchNorm2d<T>>(mid_channels));
  conv2_ = &this->register_module(
      "conv2", std::make_unique<DepthwiseSeparableConv<T>>(mid_channels, out_channels, kernels_per_layer, rng));
  bn2_ = &this->register_module("bn2", std::make_unique<BatchNorm2d<T>>(out_channels));
}

template <std::floating_point T>
Var<T> DscDoubleConv<T>::forward(const Var<T>& x) {
  check_channels(x, in_, "dsc_double_conv");
  Var<T> h = ops::relu(bn1_->forward(conv1_->forward(x)));
  return ops::relu(bn2_->forward(conv2_->forward(h)));
}

template <std::floating_point T>
std::int64_t DscDoubleConv<T>::parameter_formula(std::int64_t in, std::int64_t out, std::int64_t mid,
                                                 std::int64_t k) {
  if (mid <= 0) mid = out;
  auto dsc = [k](std::int64_t i, std::int64_t o) { return i * k * 9 + i * k + i * k * o + o; };
  return dsc(in, mid) + 2 * mid + dsc(mid, out) + 2 * out;
}

template <std::floating_point T>
Cbam<T>::Cbam(std::int64_t channels, Rng& rng, std::int64_t reduction, std::int64_t spatial_kernel)
    : channels_(channels) {
  if (reduction < 1) throw ConfigError("cbam: reduction ratio must be >= 1");
  if (reduction > channels) {
    throw ConfigError(fmt::format("cbam: reduction {} exceeds {} channels", reduction, channels));
  }
  const std::int64_t hidden = channels / reduction;
  fc1_w_ = &this->register_parameter("mlp.fc1.weight", uniform_fan_in<T>({hidden, channels}, channels, rng));
  fc1_b_ = &this->register_parameter("mlp.fc1.bias", uniform_fan_in<T>({hidden}, channels, rng));
  fc2_w_ = &this->register_parameter("mlp.fc2.weight", uniform_fan_in<T>({channels, hidden}, hidden, rng));
  fc2_b_ = &this->register_parameter("mlp.fc2.bias", uniform_fan_in<T>({channels}, hidden, rng));
  spatial_w_ = &this->register_parameter(
      "spatial.weight",
      uniform_fan_in<T>({1, 2, spatial_kernel, spatial_kernel}, 2 * spatial_kernel * spatial_kernel, rng));
}

template <std::floating_point T>
Var<T> Cbam<T>::mlp(const Var<T>& z) {
  return ops::linear(ops::relu(ops::linear(z, *fc1_w_, *fc1_b_)), *fc2_w_, *fc2_b_);
}

template <std::floating_point T>
typename Cbam<T>::Gates Cbam<T>::forward_with_gates(const Var<T>& x) {
  check_channels(x, channels_, "cbam");
  Gates g;
  g.channel = ops::sigmoid(ops::add(mlp(ops::global_avg_pool(x)), mlp(ops::global_max_pool(x))));
  Var<T> refined = ops::scale_channels(x, g.channel);
  Var<T> pooled = ops::concat_channels<T>({ops::channel_mean(refined), ops::channel_max(refined)});
  g.spatial = ops::sigmoid(ops::conv2d(pooled, *spatial_w_, Var<T>()));
  g.output = ops::scale_spatial(refined, g.spatial);
  return g;
}

template <std::floating_point T>
Spade<T>::Spade(std::int64_t channels, std::int64_t cond_channels, Rng& rng, std::int64_t hidden)
    : channels_(channels), cond_channels_(cond_channels) {
  norm_ = &this->register_module("norm", std::make_unique<BatchNorm2d<T>>(channels, false));
  shared_ = &this->register_module("shared", std::make_unique<Conv2d<T>>(cond_channels, hidden, 3, true, rng));
  gamma_ = &this->register_module("gamma", std::make_unique<Conv2d<T>>(hidden, channels, 3, true, rng));
  beta_ = &this->register_module("beta", std::make_unique<Conv2d<T>>(hidden, channels, 3, true, rng));
}

template <std::floating_point T>
Var<T> Spade<T>::forward(const Var<T>& x, const Var<T>& cond) {
  const Dims4 xd = dims4(x.shape(), "spade input");
  const Dims4 cd = dims4(cond.shape(), "spade condition");
  if (cd.h < 1 || cd.w < 1) throw InvalidInput("spade: conditioning input has zero spatial extent");
  if (xd.c != channels_) {
    throw ShapeError(fmt::format("spade: expected {} feature channels, got {}", channels_, xd.c));
  }
  if (cd.c != cond_channels_) {
    throw ShapeError(fmt::format("spade: expected {} condition channels, got {}", cond_channels_, cd.c));
  }
  if (cd.n != xd.n) throw ShapeError("spade: batch size of condition and features differ");
  Var<T> normalized = norm_->forward(x);
  Var<T> hidden = ops::relu(shared_->forward(ops::resize_bilinear(cond, xd.h, xd.w)));
  Var<T> gamma = gamma_->forward(hidden);
  Var<T> beta = beta_->forward(hidden);
  return ops::add(ops::mul(normalized, ops::add_scalar(gamma, T{1})), beta);
}

template <std::floating_point T>
SpectralConv2d<T>::SpectralConv2d(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                                  Rng& rng) {
  const std::int64_t fan_in = in_channels * kernel * kernel;
  weight_ = &this->register_parameter(
      "weight", uniform_fan_in<T>({out_channels, in_channels, kernel, kernel}, fan_in, rng));
  bias_ = &this->register_parameter("bias", uniform_fan_in<T>({out_channels}, fan_in, rng));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> u({out_channels}), v({fan_in});
  for (auto& e : u.data()) e = static_cast<T>(normal(rng));
  for (auto& e : v.data()) e = static_cast<T>(normal(rng));
  normalize_in_place(u);
  normalize_in_place(v);
  u_ = &this->register_buffer("u", std::move(u));
  v_ = &this->register_buffer("v", std::move(v));
  for (int i = 0; i < 50; ++i) power_iteration();
}

template <std::floating_point T>
void SpectralConv2d<T>::power_iteration() {
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::int64_t rows = u_->numel(), cols = v_->numel();
  Eigen::Map<const Mat> w(weight_->value().ptr(), rows, cols);
  Eigen::Map<Vec> u(u_->ptr(), rows), v(v_->ptr(), cols);
  Vec nv = w.transpose() * u;
  v = nv / std::max<T>(nv.norm(), T(1e-12));
  Vec nu = w * v;
  u = nu / std::max<T>(nu.norm(), T(1e-12));
}

template <std::floating_point T>
T SpectralConv2d<T>::sigma_estimate() const {
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::int64_t rows = u_->numel(), cols = v_->numel();
  Eigen::Map<const Mat> w(weight_->value().ptr(), rows, cols);
  Eigen::Map<const Vec> u(u_->ptr(), rows), v(v_->ptr(), cols);
  return u.dot(w * v);
}

template <std::floating_point T>
Tensor<T> SpectralConv2d<T>::normalized_weight() const {
  NoGradGuard guard;
  return ops::spectral_normalize(*weight_, *u_, *v_).value();
}

template <std::floating_point T>
Var<T> SpectralConv2d<T>::forward(const Var<T>& x) {
  if (this->is_training() && power_iteration_enabled_) power_iteration();
  return ops::conv2d(x, ops::spectral_normalize(*weight_, *u_, *v_), *bias_);
}

template <std::floating_point T>
SpectralResidualBlock<T>::SpectralResidualBlock(std::int64_t in_channels, std::int64_t out_channels,
                                                std::int64_t mid_channels, Rng& rng)
    : in_(in_channels), out_(out_channels) {
  if (mid_channels <= 0) mid_channels = out_channels;
  shortcut_bn_ = &this->register_module("shortcut_bn", std::make_unique<BatchNorm2d<T>>(in_channels));
  shortcut_conv_ = &this->register_module(
      "shortcut_conv", std::make_unique<SpectralConv2d<T>>(in_channels, out_channels, 3, rng));
  bn1_ = &this->register_module("bn1", std::make_unique<BatchNorm2d<T>>(in_channels));
  conv1_ = &this->register_module("conv1", std::make_unique<SpectralConv2d<T>>(in_channels, mid_channels, 3, rng));
  bn2_ = &this->register_module("bn2", std::make_unique<BatchNorm2d<T>>(mid_channels));
  conv2_ =
      &this->register_module("conv2", std::make_unique<SpectralConv2d<T>>(mid_channels, out_channels, 3, rng));
}

template <std::floating_point T>
Var<T> SpectralResidualBlock<T>::forward(const Var<T>& x) {
  check_channels(x, in_, "spectral_residual_block");
  Var<T> shortcut = shortcut_conv_->forward(shortcut_bn_->forward(x));
  Var<T> h = conv1_->forward(ops::relu(bn1_->forward(x)));
  h = conv2_->forward(ops::relu(bn2_->forward(h)));
  return ops::add(h, shortcut);
}

template <std::floating_point T>
void set_power_iteration(Module<T>& root, bool on) {
  if (auto* sn = dynamic_cast<SpectralConv2d<T>*>(&root)) sn->set_power_iteration_enabled(on);
  for (const auto& [name, child] : root.children()) set_power_iteration(*child, on);
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class DepthwiseSeparableConv<float>;
template class DepthwiseSeparableConv<double>;
template class DscDoubleConv<float>;
template class DscDoubleConv<double>;
template class Cbam<float>;
template class Cbam<double>;
template class Spade<float>;
template class Spade<double>;
template class SpectralConv2d<float>;
template class SpectralConv2d<double>;
template class SpectralResidualBlock<float>;
template class SpectralResidualBlock<double>;
template void set_power_iteration(Module<float>&, bool);
template void set_power_iteration(Module<double>&, bool);

}  // namespace nowcast
