#pragma once

#include <cstdint>
#include <vector>

#include "nowcast/autograd.hpp"

// Differentiable tensor operations. Feature maps are NCHW.
namespace nowcast::ops {

template <std::floating_point T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <std::floating_point T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <std::floating_point T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <std::floating_point T> Var<T> add_scalar(const Var<T>& a, T s);
template <std::floating_point T> Var<T> scale(const Var<T>& a, T s);
template <std::floating_point T> Var<T> relu(const Var<T>& a);
template <std::floating_point T> Var<T> sigmoid(const Var<T>& a);

/// Stride-1 "same" convolution. `w` is (Co,Ci,k,k) with odd k; `b` may be undefined.
template <std::floating_point T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Per-channel 3x3 (odd k) convolution with channel multiplier m: `w` is (C*m,1,k,k)
/// and output channel c*m+j reads input channel c.
template <std::floating_point T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation. Training mode uses batch statistics and updates the
/// running buffers; eval mode uses the running buffers. `gamma`/`beta` may be undefined
/// for the parameter-free form.
template <std::floating_point T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormOptions& opts);

/// 2x2 max pooling, stride 2, floor on odd sizes.
template <std::floating_point T> Var<T> max_pool2d(const Var<T>& x);
template <std::floating_point T>
Var<T> adaptive_max_pool2d(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);
template <std::floating_point T> Var<T> global_avg_pool(const Var<T>& x);  // -> (N,C)
template <std::floating_point T> Var<T> global_max_pool(const Var<T>& x);  // -> (N,C)

/// y = x W^T + b for x (N,I), W (O,I), b (O).
template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <std::floating_point T> Var<T> channel_mean(const Var<T>& x);  // -> (N,1,H,W)
template <std::floating_point T> Var<T> channel_max(const Var<T>& x);   // -> (N,1,H,W)

template <std::floating_point T> Var<T> concat_channels(const std::vector<Var<T>>& parts);
template <std::floating_point T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count);

/// x (N,C,H,W) * g (N,C) broadcast over space.
template <std::floating_point T> Var<T> scale_channels(const Var<T>& x, const Var<T>& g);
/// x (N,C,H,W) * g (N,1,H,W) broadcast over channels.
template <std::floating_point T> Var<T> scale_spatial(const Var<T>& x, const Var<T>& g);
/// x (N,C,H,W) * v (C).
template <std::floating_point T> Var<T> mul_channel_vector(const Var<T>& x, const Var<T>& v);

/// Bilinear resize with half-pixel centres (corners not aligned).
template <std::floating_point T>
Var<T> resize_bilinear(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);

/// Backward (semi-Lagrangian) warp of single-channel frames:
/// out(y,x) = frame(y - v(y,x), x - u(y,x)), bilinear, coordinates clamped to the border.
template <std::floating_point T>
Var<T> warp_bilinear(const Var<T>& frame, const Var<T>& u, const Var<T>& v);

/// w / sigma with sigma = u^T W v, W = w reshaped to (rows, cols); u and v are held constant.
template <std::floating_point T>
Var<T> spectral_normalize(const Var<T>& w, const Tensor<T>& u, const Tensor<T>& v);

template <std::floating_point T> Var<T> mse_loss(const Var<T>& pred, const Var<T>& target);
template <std::floating_point T> Var<T> sum(const Var<T>& x);
/// sum(x * r) for a constant r of the same shape.
template <std::floating_point T> Var<T> dot(const Var<T>& x, const Tensor<T>& r);

}  // namespace nowcast::ops
