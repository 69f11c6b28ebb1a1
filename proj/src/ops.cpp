#include "nowcast/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>
#include <fmt/format.h>

namespace nowcast {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace ops {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
}

template <typename T>
void accumulate(Node<T>& dst, const Tensor<T>& g) {
  auto& d = dst.grad_ref();
  const std::int64_t n = g.numel();
  T* dp = d.ptr();
  const T* gp = g.ptr();
  for (std::int64_t i = 0; i < n; ++i) dp[i] += gp[i];
}

// Column buffer for a stride-1 "same" convolution of one image.
template <typename T>
void im2col(const T* img, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k, T* col) {
  const std::int64_t pad = k / 2;
  const std::int64_t hw = h * w;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* src = img + ch * hw;
    for (std::int64_t ky = 0; ky < k; ++ky) {
      for (std::int64_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((ch * k + ky) * k + kx) * hw;
        const std::int64_t dx = kx - pad;
        const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t x_hi = std::min<std::int64_t>(w, w - dx);
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + ky - pad;
          T* row = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, T{0});
            continue;
          }
          const T* srow = src + sy * w + dx;
          for (std::int64_t x = 0; x < x_lo; ++x) row[x] = T{0};
          for (std::int64_t x = x_lo; x < x_hi; ++x) row[x] = srow[x];
          for (std::int64_t x = x_hi; x < w; ++x) row[x] = T{0};
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k, T* img) {
  const std::int64_t pad = k / 2;
  const std::int64_t hw = h * w;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T* dst = img + ch * hw;
    for (std::int64_t ky = 0; ky < k; ++ky) {
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((ch * k + ky) * k + kx) * hw;
        const std::int64_t dx = kx - pad;
        const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t x_hi = std::min<std::int64_t>(w, w - dx);
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const T* srow = src + y * w;
          T* drow = dst + sy * w + dx;
          for (std::int64_t x = x_lo; x < x_hi; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

}  // namespace

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (n.input_needs_grad(i)) accumulate(n.input(i), n.grad);
    }
  });
}

template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](Node<T>& n) {
    if (n.input_needs_grad(0)) accumulate(n.input(0), n.grad);
    if (n.input_needs_grad(1)) {
      auto& g = n.input(1).grad_ref();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.input(0).value;
    const auto& bv = n.input(1).value;
    if (n.input_needs_grad(0)) {
      auto& g = n.input(0).grad_ref();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.input_needs_grad(1)) {
      auto& g = n.input(1).grad_ref();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <std::floating_point T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + s;
  return Var<T>::from_op(std::move(out), {a}, [](Node<T>& n) { accumulate(n.input(0), n.grad); });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  return Var<T>::from_op(std::move(out), {a}, [s](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * s;
  });
}

template <std::floating_point T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* src = a.value().ptr();
  T* dst = out.ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
  return Var<T>::from_op(std::move(out), {a}, [](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    const T* y = n.value.ptr();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      if (y[i] > T{0}) g[i] += n.grad[i];
    }
  });
}

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = T{1} / (T{1} + std::exp(-a.value()[i]));
  return Var<T>::from_op(std::move(out), {a}, [](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const T y = n.value[i];
      g[i] += n.grad[i] * y * (T{1} - y);
    }
  });
}

template <std::floating_point T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Dims4 xd = dims4(x.shape(), "conv2d input");
  const Dims4 wd = dims4(w.shape(), "conv2d weight");
  if (wd.c != xd.c) {
    throw ShapeError(fmt::format("conv2d: expected {} input channels, got {}", wd.c, xd.c));
  }
  if (wd.h != wd.w || wd.h % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != wd.n)) {
    throw ShapeError(fmt::format("conv2d: bias must have shape ({})", wd.n));
  }
  const std::int64_t k = wd.h, co = wd.n, ci = xd.c, hw = xd.plane(), kk = ci * k * k;
  Tensor<T> out({xd.n, co, xd.h, xd.w});
  CMapR<T> wm(w.value().ptr(), co, kk);
  std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kk * hw));
  for (std::int64_t n = 0; n < xd.n; ++n) {
    const T* img = x.value().ptr() + n * ci * hw;
    MapR<T> y(out.ptr() + n * co * hw, co, hw);
    if (k == 1) {
      y.noalias() = wm * CMapR<T>(img, ci, hw);
    } else {
      im2col(img, ci, xd.h, xd.w, k, col.data());
      y.noalias() = wm * CMapR<T>(col.data(), kk, hw);
    }
    if (b.defined()) {
      for (std::int64_t c = 0; c < co; ++c) y.row(c).array() += b.value()[c];
    }
  }
  return Var<T>::from_op(std::move(out), {x, w, b}, [xd, k, co, ci, hw, kk](Node<T>& n) {
    const bool gx = n.input_needs_grad(0), gw = n.input_needs_grad(1), gb = n.input_needs_grad(2);
    const auto& xv = n.input(0).value;
    const auto& wv = n.input(1).value;
    CMapR<T> wm(wv.ptr(), co, kk);
    std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kk * hw));
    std::vector<T> dcol(k == 1 || !gx ? 0 : static_cast<std::size_t>(kk * hw));
    T* dw = gw ? n.input(1).grad_ref().ptr() : nullptr;
    T* db = gb ? n.input(2).grad_ref().ptr() : nullptr;
    T* dx = gx ? n.input(0).grad_ref().ptr() : nullptr;
    for (std::int64_t b = 0; b < xd.n; ++b) {
      const T* img = xv.ptr() + b * ci * hw;
      CMapR<T> dy(n.grad.ptr() + b * co * hw, co, hw);
      if (gw) {
        MapR<T> dwm(dw, co, kk);
        if (k == 1) {
          dwm.noalias() += dy * CMapR<T>(img, ci, hw).transpose();
        } else {
          im2col(img, ci, xd.h, xd.w, k, col.data());
          dwm.noalias() += dy * CMapR<T>(col.data(), kk, hw).transpose();
        }
      }
      if (gb) {
        for (std::int64_t c = 0; c < co; ++c) db[c] += dy.row(c).sum();
      }
      if (gx) {
        if (k == 1) {
          MapR<T>(dx + b * ci * hw, ci, hw).noalias() += wm.transpose() * dy;
        } else {
          MapR<T>(dcol.data(), kk, hw).noalias() = wm.transpose() * dy;
          col2im_add(dcol.data(), ci, xd.h, xd.w, k, dx + b * ci * hw);
        }
      }
    }
  });
}

template <std::floating_point T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Dims4 xd = dims4(x.shape(), "depthwise input");
  const Dims4 wd = dims4(w.shape(), "depthwise weight");
  if (wd.c != 1 || wd.n % xd.c != 0) {
    throw ShapeError(fmt::format("depthwise: weight {} incompatible with {} input channels",
                                 shape_string(w.shape()), xd.c));
  }
  if (wd.h != wd.w || wd.h % 2 == 0) throw ShapeError("depthwise: kernel must be square and odd");
  const std::int64_t mult = wd.n / xd.c, co = wd.n, k = wd.h, pad = k / 2;
  const std::int64_t H = xd.h, W = xd.w, hw = xd.plane();
  Tensor<T> out({xd.n, co, H, W});
  for (std::int64_t n = 0; n < xd.n; ++n) {
    for (std::int64_t oc = 0; oc < co; ++oc) {
      const T* src = x.value().ptr() + (n * xd.c + oc / mult) * hw;
      T* dst = out.ptr() + (n * co + oc) * hw;
      const T* kern = w.value().ptr() + oc * k * k;
      const T bias = b.defined() ? b.value()[oc] : T{0};
      std::fill(dst, dst + hw, bias);
      for (std::int64_t ky = 0; ky < k; ++ky) {
        for (std::int64_t kx = 0; kx < k; ++kx) {
          const T wt = kern[ky * k + kx];
          const std::int64_t dx = kx - pad;
          const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
          const std::int64_t x_hi = std::min<std::int64_t>(W, W - dx);
          for (std::int64_t y = 0; y < H; ++y) {
            const std::int64_t sy = y + ky - pad;
            if (sy < 0 || sy >= H) continue;
            const T* srow = src + sy * W + dx;
            T* drow = dst + y * W;
            for (std::int64_t xx = x_lo; xx < x_hi; ++xx) drow[xx] += wt * srow[xx];
          }
        }
      }
    }
  }
  return Var<T>::from_op(std::move(out), {x, w, b}, [xd, mult, co, k, pad, H, W, hw](Node<T>& n) {
    const bool gx = n.input_needs_grad(0), gw = n.input_needs_grad(1), gb = n.input_needs_grad(2);
    const auto& xv = n.input(0).value;
    const auto& wv = n.input(1).value;
    T* dxp = gx ? n.input(0).grad_ref().ptr() : nullptr;
    T* dwp = gw ? n.input(1).grad_ref().ptr() : nullptr;
    T* dbp = gb ? n.input(2).grad_ref().ptr() : nullptr;
    for (std::int64_t b = 0; b < xd.n; ++b) {
      for (std::int64_t oc = 0; oc < co; ++oc) {
        const std::int64_t ic = oc / mult;
        const T* src = xv.ptr() + (b * xd.c + ic) * hw;
        const T* dy = n.grad.ptr() + (b * co + oc) * hw;
        if (gb) {
          T s = 0;
          for (std::int64_t i = 0; i < hw; ++i) s += dy[i];
          dbp[oc] += s;
        }
        const T* kern = wv.ptr() + oc * k * k;
        T* dsrc = gx ? dxp + (b * xd.c + ic) * hw : nullptr;
        for (std::int64_t ky = 0; ky < k; ++ky) {
          for (std::int64_t kx = 0; kx < k; ++kx) {
            const T wt = kern[ky * k + kx];
            const std::int64_t dx = kx - pad;
            const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
            const std::int64_t x_hi = std::min<std::int64_t>(W, W - dx);
            T acc = 0;
            for (std::int64_t y = 0; y < H; ++y) {
              const std::int64_t sy = y + ky - pad;
              if (sy < 0 || sy >= H) continue;
              const T* srow = src + sy * W + dx;
              const T* grow = dy + y * W;
              if (gw) {
                for (std::int64_t xx = x_lo; xx < x_hi; ++xx) acc += grow[xx] * srow[xx];
              }
              if (gx) {
                T* drow = dsrc + sy * W + dx;
                for (std::int64_t xx = x_lo; xx < x_hi; ++xx) drow[xx] += wt * grow[xx];
              }
            }
            if (gw) dwp[oc * k * k + ky * k + kx] += acc;
          }
        }
      }
    }
  });
}

template <std::floating_point T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormOptions& opts) {
  const Dims4 d = dims4(x.shape(), "batch_norm input");
  if (running_mean.numel() != d.c || running_var.numel() != d.c) {
    throw ShapeError(fmt::format("batch_norm: running stats sized {} for {} channels",
                                 running_mean.numel(), d.c));
  }
  if (gamma.defined() && gamma.numel() != d.c) throw ShapeError("batch_norm: gamma size mismatch");
  if (beta.defined() && beta.numel() != d.c) throw ShapeError("batch_norm: beta size mismatch");
  const std::int64_t hw = d.plane(), count = d.n * hw;
  const T eps = static_cast<T>(opts.eps);
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  std::vector<T> invstd(static_cast<std::size_t>(d.c));
  const T* xp = x.value().ptr();
  for (std::int64_t c = 0; c < d.c; ++c) {
    T mean, var;
    if (opts.training) {
      double s = 0.0;
      for (std::int64_t n = 0; n < d.n; ++n) {
        const T* p = xp + (n * d.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / double(count);
      double ss = 0.0;
      for (std::int64_t n = 0; n < d.n; ++n) {
        const T* p = xp + (n * d.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double dv = p[i] - m;
          ss += dv * dv;
        }
      }
      mean = static_cast<T>(m);
      var = static_cast<T>(ss / double(count));
      const double unbiased = count > 1 ? ss / double(count - 1) : ss;
      const double mom = opts.momentum;
      running_mean[c] = static_cast<T>((1.0 - mom) * running_mean[c] + mom * m);
      running_var[c] = static_cast<T>((1.0 - mom) * running_var[c] + mom * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T is = T{1} / std::sqrt(var + eps);
    invstd[c] = is;
    const T g = gamma.defined() ? gamma.value()[c] : T{1};
    const T bt = beta.defined() ? beta.value()[c] : T{0};
    for (std::int64_t n = 0; n < d.n; ++n) {
      const std::int64_t off = (n * d.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const T xh = (xp[off + i] - mean) * is;
        xhat[off + i] = xh;
        out[off + i] = g * xh + bt;
      }
    }
  }
  const bool training = opts.training;
  return Var<T>::from_op(
      std::move(out), {x, gamma, beta},
      [d, hw, count, training, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& n) {
        const bool gx = n.input_needs_grad(0), gg = n.input_needs_grad(1), gb = n.input_needs_grad(2);
        const bool has_gamma = n.input(1).value.numel() > 0;
        T* dx = gx ? n.input(0).grad_ref().ptr() : nullptr;
        for (std::int64_t c = 0; c < d.c; ++c) {
          T sum_dy = 0, sum_dy_xh = 0;
          for (std::int64_t b = 0; b < d.n; ++b) {
            const std::int64_t off = (b * d.c + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_dy += n.grad[off + i];
              sum_dy_xh += n.grad[off + i] * xhat[off + i];
            }
          }
          if (gg) n.input(1).grad_ref()[c] += sum_dy_xh;
          if (gb) n.input(2).grad_ref()[c] += sum_dy;
          if (!gx) continue;
          const T g = has_gamma ? n.input(1).value[c] : T{1};
          const T is = invstd[c];
          if (training) {
            const T inv_m = T{1} / static_cast<T>(count);
            const T mean_dy = sum_dy * inv_m;
            const T mean_dy_xh = sum_dy_xh * inv_m;
            for (std::int64_t b = 0; b < d.n; ++b) {
              const std::int64_t off = (b * d.c + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                dx[off + i] += g * is * (n.grad[off + i] - mean_dy - xhat[off + i] * mean_dy_xh);
              }
            }
          } else {
            for (std::int64_t b = 0; b < d.n; ++b) {
              const std::int64_t off = (b * d.c + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) dx[off + i] += g * is * n.grad[off + i];
            }
          }
        }
      });
}

namespace {

// Max over arbitrary rectangular windows; records the flat argmax per output cell.
template <typename T>
Var<T> windowed_max(const Var<T>& x, std::int64_t oh, std::int64_t ow,
                    const std::vector<std::int64_t>& y0, const std::vector<std::int64_t>& y1,
                    const std::vector<std::int64_t>& x0, const std::vector<std::int64_t>& x1) {
  const Dims4 d = dims4(x.shape());
  Tensor<T> out({d.n, d.c, oh, ow});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(out.numel()));
  const T* xp = x.value().ptr();
  std::int64_t o = 0;
  for (std::int64_t p = 0; p < d.n * d.c; ++p) {
    const T* plane = xp + p * d.plane();
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t besti = y0[i] * d.w + x0[j];
        for (std::int64_t yy = y0[i]; yy < y1[i]; ++yy) {
          for (std::int64_t xx = x0[j]; xx < x1[j]; ++xx) {
            const T v = plane[yy * d.w + xx];
            if (v > best) {
              best = v;
              besti = yy * d.w + xx;
            }
          }
        }
        out[o] = best;
        arg[static_cast<std::size_t>(o)] = p * d.plane() + besti;
      }
    }
  }
  return Var<T>::from_op(std::move(out), {x}, [arg = std::move(arg)](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += n.grad[static_cast<std::int64_t>(i)];
  });
}

}  // namespace

template <std::floating_point T>
Var<T> max_pool2d(const Var<T>& x) {
  const Dims4 d = dims4(x.shape(), "max_pool2d input");
  const std::int64_t oh = d.h / 2, ow = d.w / 2;
  if (oh < 1 || ow < 1) throw ShapeError(fmt::format("max_pool2d: input {} too small", shape_string(x.shape())));
  std::vector<std::int64_t> y0(oh), y1(oh), x0(ow), x1(ow);
  for (std::int64_t i = 0; i < oh; ++i) y0[i] = 2 * i, y1[i] = 2 * i + 2;
  for (std::int64_t j = 0; j < ow; ++j) x0[j] = 2 * j, x1[j] = 2 * j + 2;
  return windowed_max(x, oh, ow, y0, y1, x0, x1);
}

template <std::floating_point T>
Var<T> adaptive_max_pool2d(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const Dims4 d = dims4(x.shape(), "adaptive_max_pool2d input");
  if (out_h < 1 || out_w < 1 || out_h > d.h || out_w > d.w) {
    throw ShapeError(fmt::format("adaptive_max_pool2d: cannot pool {} to {}x{}", shape_string(x.shape()),
                                 out_h, out_w));
  }
  std::vector<std::int64_t> y0(out_h), y1(out_h), x0(out_w), x1(out_w);
  for (std::int64_t i = 0; i < out_h; ++i) {
    y0[i] = (i * d.h) / out_h;
    y1[i] = ((i + 1) * d.h + out_h - 1) / out_h;
  }
  for (std::int64_t j = 0; j < out_w; ++j) {
    x0[j] = (j * d.w) / out_w;
    x1[j] = ((j + 1) * d.w + out_w - 1) / out_w;
  }
  return windowed_max(x, out_h, out_w, y0, y1, x0, x1);
}

template <std::floating_point T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Dims4 d = dims4(x.shape(), "global_avg_pool input");
  Tensor<T> out({d.n, d.c});
  const std::int64_t hw = d.plane();
  for (std::int64_t p = 0; p < d.n * d.c; ++p) {
    const T* src = x.value().ptr() + p * hw;
    T s = 0;
    for (std::int64_t i = 0; i < hw; ++i) s += src[i];
    out[p] = s / static_cast<T>(hw);
  }
  return Var<T>::from_op(std::move(out), {x}, [d, hw](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    for (std::int64_t p = 0; p < d.n * d.c; ++p) {
      const T gp = n.grad[p] / static_cast<T>(hw);
      for (std::int64_t i = 0; i < hw; ++i) g[p * hw + i] += gp;
    }
  });
}

template <std::floating_point T>
Var<T> global_max_pool(const Var<T>& x) {
  const Dims4 d = dims4(x.shape(), "global_max_pool input");
  Var<T> pooled = windowed_max(x, 1, 1, {0}, {d.h}, {0}, {d.w});
  // (N,C,1,1) -> (N,C) without copying the graph edge semantics.
  Tensor<T> flat = pooled.value().reshaped({d.n, d.c});
  return Var<T>::from_op(std::move(flat), {pooled}, [](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError(fmt::format("linear: input {} incompatible with weight {}", shape_string(x.shape()),
                                 shape_string(w.shape())));
  }
  const std::int64_t n = x.shape()[0], in = x.shape()[1], o = w.shape()[0];
  Tensor<T> out({n, o});
  MapR<T>(out.ptr(), n, o).noalias() =
      CMapR<T>(x.value().ptr(), n, in) * CMapR<T>(w.value().ptr(), o, in).transpose();
  if (b.defined()) {
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t c = 0; c < o; ++c) out[r * o + c] += b.value()[c];
  }
  return Var<T>::from_op(std::move(out), {x, w, b}, [n, in, o](Node<T>& nd) {
    CMapR<T> dy(nd.grad.ptr(), n, o);
    if (nd.input_needs_grad(0)) {
      MapR<T>(nd.input(0).grad_ref().ptr(), n, in).noalias() +=
          dy * CMapR<T>(nd.input(1).value.ptr(), o, in);
    }
    if (nd.input_needs_grad(1)) {
      MapR<T>(nd.input(1).grad_ref().ptr(), o, in).noalias() +=
          dy.transpose() * CMapR<T>(nd.input(0).value.ptr(), n, in);
    }
    if (nd.input_needs_grad(2)) {
      auto& g = nd.input(2).grad_ref();
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < o; ++c) g[c] += dy(r, c);
    }
  });
}

template <std::floating_point T>
Var<T> channel_mean(const Var<T>& x) {
  const Dims4 d = dims4(x.shape(), "channel_mean input");
  const std::int64_t hw = d.plane();
  Tensor<T> out({d.n, 1, d.h, d.w});
  for (std::int64_t n = 0; n < d.n; ++n) {
    T* dst = out.ptr() + n * hw;
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* src = x.value().ptr() + (n * d.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
    for (std::int64_t i = 0; i < hw; ++i) dst[i] /= static_cast<T>(d.c);
  }
  return Var<T>::from_op(std::move(out), {x}, [d, hw](Node<T>& nd) {
    auto& g = nd.input(0).grad_ref();
    for (std::int64_t n = 0; n < d.n; ++n)
      for (std::int64_t c = 0; c < d.c; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
          g[(n * d.c + c) * hw + i] += nd.grad[n * hw + i] / static_cast<T>(d.c);
  });
}

template <std::floating_point T>
Var<T> channel_max(const Var<T>& x) {
  const Dims4 d = dims4(x.shape(), "channel_max input");
  const std::int64_t hw = d.plane();
  Tensor<T> out({d.n, 1, d.h, d.w}, -std::numeric_limits<T>::infinity());
  std::vector<std::int64_t> arg(static_cast<std::size_t>(d.n * hw), 0);
  for (std::int64_t n = 0; n < d.n; ++n) {
    T* dst = out.ptr() + n * hw;
    std::int64_t* a = arg.data() + n * hw;
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* src = x.value().ptr() + (n * d.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        if (src[i] > dst[i]) {
          dst[i] = src[i];
          a[i] = c;
        }
      }
    }
  }
  return Var<T>::from_op(std::move(out), {x}, [d, hw, arg = std::move(arg)](Node<T>& nd) {
    auto& g = nd.input(0).grad_ref();
    for (std::int64_t n = 0; n < d.n; ++n)
      for (std::int64_t i = 0; i < hw; ++i)
        g[(n * d.c + arg[n * hw + i]) * hw + i] += nd.grad[n * hw + i];
  });
}

template <std::floating_point T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Dims4 d0 = dims4(parts[0].shape(), "concat input");
  std::int64_t total = 0;
  std::vector<std::int64_t> chans;
  for (const auto& p : parts) {
    const Dims4 d = dims4(p.shape(), "concat input");
    if (d.n != d0.n || d.h != d0.h || d.w != d0.w) {
      throw ShapeError(fmt::format("concat_channels: {} incompatible with {}", shape_string(p.shape()),
                                   shape_string(parts[0].shape())));
    }
    chans.push_back(d.c);
    total += d.c;
  }
  const std::int64_t hw = d0.plane();
  Tensor<T> out({d0.n, total, d0.h, d0.w});
  for (std::int64_t n = 0; n < d0.n; ++n) {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const T* src = parts[p].value().ptr() + n * chans[p] * hw;
      std::copy(src, src + chans[p] * hw, out.ptr() + (n * total + off) * hw);
      off += chans[p];
    }
  }
  return Var<T>::from_op(std::move(out), parts, [d0, hw, total, chans](Node<T>& nd) {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < chans.size(); ++p) {
      if (nd.input_needs_grad(p)) {
        auto& g = nd.input(p).grad_ref();
        for (std::int64_t n = 0; n < d0.n; ++n) {
          const T* src = nd.grad.ptr() + (n * total + off) * hw;
          T* dst = g.ptr() + n * chans[p] * hw;
          for (std::int64_t i = 0; i < chans[p] * hw; ++i) dst[i] += src[i];
        }
      }
      off += chans[p];
    }
  });
}

template <std::floating_point T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count) {
  const Dims4 d = dims4(x.shape(), "slice input");
  if (begin < 0 || count < 1 || begin + count > d.c) {
    throw ShapeError(fmt::format("slice_channels: [{}, {}) outside {} channels", begin, begin + count, d.c));
  }
  const std::int64_t hw = d.plane();
  Tensor<T> out({d.n, count, d.h, d.w});
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* src = x.value().ptr() + (n * d.c + begin) * hw;
    std::copy(src, src + count * hw, out.ptr() + n * count * hw);
  }
  return Var<T>::from_op(std::move(out), {x}, [d, hw, begin, count](Node<T>& nd) {
    auto& g = nd.input(0).grad_ref();
    for (std::int64_t n = 0; n < d.n; ++n) {
      const T* src = nd.grad.ptr() + n * count * hw;
      T* dst = g.ptr() + (n * d.c + begin) * hw;
      for (std::int64_t i = 0; i < count * hw; ++i) dst[i] += src[i];
    }
  });
}

template <std::floating_point T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& g) {
  const Dims4 d = dims4(x.shape(), "scale_channels input");
  if (g.shape() != Shape{d.n, d.c}) {
    throw ShapeError(fmt::format("scale_channels: gate {} for input {}", shape_string(g.shape()),
                                 shape_string(x.shape())));
  }
  const std::int64_t hw = d.plane();
  Tensor<T> out(x.shape());
  for (std::int64_t p = 0; p < d.n * d.c; ++p) {
    const T s = g.value()[p];
    const T* src = x.value().ptr() + p * hw;
    T* dst = out.ptr() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * s;
  }
  return Var<T>::from_op(std::move(out), {x, g}, [d, hw](Node<T>& nd) {
    const auto& xv = nd.input(0).value;
    const auto& gv = nd.input(1).value;
    for (std::int64_t p = 0; p < d.n * d.c; ++p) {
      const T* dy = nd.grad.ptr() + p * hw;
      if (nd.input_needs_grad(0)) {
        T* dx = nd.input(0).grad_ref().ptr() + p * hw;
        for (std::int64_t i = 0; i < hw; ++i) dx[i] += dy[i] * gv[p];
      }
      if (nd.input_needs_grad(1)) {
        const T* src = xv.ptr() + p * hw;
        T s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += dy[i] * src[i];
        nd.input(1).grad_ref()[p] += s;
      }
    }
  });
}

template <std::floating_point T>
Var<T> scale_spatial(const Var<T>& x, const Var<T>& g) {
  const Dims4 d = dims4(x.shape(), "scale_spatial input");
  if (g.shape() != Shape{d.n, 1, d.h, d.w}) {
    throw ShapeError(fmt::format("scale_spatial: gate {} for input {}", shape_string(g.shape()),
                                 shape_string(x.shape())));
  }
  const std::int64_t hw = d.plane();
  Tensor<T> out(x.shape());
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* gp = g.value().ptr() + n * hw;
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* src = x.value().ptr() + (n * d.c + c) * hw;
      T* dst = out.ptr() + (n * d.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * gp[i];
    }
  }
  return Var<T>::from_op(std::move(out), {x, g}, [d, hw](Node<T>& nd) {
    const auto& xv = nd.input(0).value;
    const auto& gv = nd.input(1).value;
    const bool gx = nd.input_needs_grad(0), gg = nd.input_needs_grad(1);
    for (std::int64_t n = 0; n < d.n; ++n) {
      const T* gp = gv.ptr() + n * hw;
      T* dg = gg ? nd.input(1).grad_ref().ptr() + n * hw : nullptr;
      for (std::int64_t c = 0; c < d.c; ++c) {
        const std::int64_t off = (n * d.c + c) * hw;
        const T* dy = nd.grad.ptr() + off;
        if (gx) {
          T* dx = nd.input(0).grad_ref().ptr() + off;
          for (std::int64_t i = 0; i < hw; ++i) dx[i] += dy[i] * gp[i];
        }
        if (gg) {
          const T* src = xv.ptr() + off;
          for (std::int64_t i = 0; i < hw; ++i) dg[i] += dy[i] * src[i];
        }
      }
    }
  });
}

template <std::floating_point T>
Var<T> mul_channel_vector(const Var<T>& x, const Var<T>& v) {
  const Dims4 d = dims4(x.shape(), "mul_channel_vector input");
  if (v.numel() != d.c) {
    throw ShapeError(fmt::format("mul_channel_vector: vector of {} for {} channels", v.numel(), d.c));
  }
  const std::int64_t hw = d.plane();
  Tensor<T> out(x.shape());
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T s = v.value()[c];
      const std::int64_t off = (n * d.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) out[off + i] = x.value()[off + i] * s;
    }
  return Var<T>::from_op(std::move(out), {x, v}, [d, hw](Node<T>& nd) {
    const auto& xv = nd.input(0).value;
    const auto& vv = nd.input(1).value;
    for (std::int64_t n = 0; n < d.n; ++n)
      for (std::int64_t c = 0; c < d.c; ++c) {
        const std::int64_t off = (n * d.c + c) * hw;
        if (nd.input_needs_grad(0)) {
          auto& g = nd.input(0).grad_ref();
          for (std::int64_t i = 0; i < hw; ++i) g[off + i] += nd.grad[off + i] * vv[c];
        }
        if (nd.input_needs_grad(1)) {
          T s = 0;
          for (std::int64_t i = 0; i < hw; ++i) s += nd.grad[off + i] * xv[off + i];
          nd.input(1).grad_ref()[c] += s;
        }
      }
  });
}

namespace {

struct AxisWeights {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> frac;
};

AxisWeights half_pixel_axis(std::int64_t in, std::int64_t out) {
  AxisWeights a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.frac.resize(out);
  const double scale = double(in) / double(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    a.i0[o] = i0;
    a.i1[o] = std::min(i0 + 1, in - 1);
    a.frac[o] = src - double(i0);
  }
  return a;
}

}  // namespace

template <std::floating_point T>
Var<T> resize_bilinear(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const Dims4 d = dims4(x.shape(), "resize input");
  if (d.h < 1 || d.w < 1) throw InvalidInput("resize_bilinear: input has zero spatial extent");
  if (out_h < 1 || out_w < 1) throw InvalidInput("resize_bilinear: zero output extent");
  if (out_h == d.h && out_w == d.w) {
    Tensor<T> copy = x.value();
    return Var<T>::from_op(std::move(copy), {x}, [](Node<T>& n) { accumulate(n.input(0), n.grad); });
  }
  const AxisWeights ay = half_pixel_axis(d.h, out_h);
  const AxisWeights ax = half_pixel_axis(d.w, out_w);
  Tensor<T> out({d.n, d.c, out_h, out_w});
  for (std::int64_t p = 0; p < d.n * d.c; ++p) {
    const T* src = x.value().ptr() + p * d.plane();
    T* dst = out.ptr() + p * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ay.frac[i]);
      const T* r0 = src + ay.i0[i] * d.w;
      const T* r1 = src + ay.i1[i] * d.w;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(ax.frac[j]);
        const T top = r0[ax.i0[j]] * (T{1} - fx) + r0[ax.i1[j]] * fx;
        const T bot = r1[ax.i0[j]] * (T{1} - fx) + r1[ax.i1[j]] * fx;
        dst[i * out_w + j] = top * (T{1} - fy) + bot * fy;
      }
    }
  }
  return Var<T>::from_op(std::move(out), {x}, [d, out_h, out_w, ay, ax](Node<T>& n) {
    auto& g = n.input(0).grad_ref();
    for (std::int64_t p = 0; p < d.n * d.c; ++p) {
      T* dsrc = g.ptr() + p * d.plane();
      const T* dy = n.grad.ptr() + p * out_h * out_w;
      for (std::int64_t i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ay.frac[i]);
        T* r0 = dsrc + ay.i0[i] * d.w;
        T* r1 = dsrc + ay.i1[i] * d.w;
        for (std::int64_t j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(ax.frac[j]);
          const T gv = dy[i * out_w + j];
          r0[ax.i0[j]] += gv * (T{1} - fy) * (T{1} - fx);
          r0[ax.i1[j]] += gv * (T{1} - fy) * fx;
          r1[ax.i0[j]] += gv * fy * (T{1} - fx);
          r1[ax.i1[j]] += gv * fy * fx;
        }
      }
    }
  });
}

template <std::floating_point T>
Var<T> warp_bilinear(const Var<T>& frame, const Var<T>& u, const Var<T>& v) {
  const Dims4 d = dims4(frame.shape(), "warp frame");
  if (d.c != 1 || u.shape() != frame.shape() || v.shape() != frame.shape()) {
    throw ShapeError(fmt::format("warp_bilinear: frame {} u {} v {} must all be (N,1,H,W)",
                                 shape_string(frame.shape()), shape_string(u.shape()),
                                 shape_string(v.shape())));
  }
  const std::int64_t H = d.h, W = d.w, hw = d.plane();
  struct Tap {
    std::int64_t y0, y1, x0, x1;
    T wy, wx;
    bool clamp_y, clamp_x;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(d.n * hw));
  Tensor<T> out(frame.shape());
  const T ymax = static_cast<T>(H - 1), xmax = static_cast<T>(W - 1);
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* f = frame.value().ptr() + n * hw;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t idx = n * hw + y * W + x;
        T sy = static_cast<T>(y) - v.value()[idx];
        T sx = static_cast<T>(x) - u.value()[idx];
        Tap t{};
        t.clamp_y = !(sy > T{0} && sy < ymax);
        t.clamp_x = !(sx > T{0} && sx < xmax);
        sy = std::clamp(sy, T{0}, ymax);
        sx = std::clamp(sx, T{0}, xmax);
        t.y0 = static_cast<std::int64_t>(std::floor(sy));
        t.x0 = static_cast<std::int64_t>(std::floor(sx));
        t.y1 = std::min(t.y0 + 1, H - 1);
        t.x1 = std::min(t.x0 + 1, W - 1);
        t.wy = sy - static_cast<T>(t.y0);
        t.wx = sx - static_cast<T>(t.x0);
        const T f00 = f[t.y0 * W + t.x0], f01 = f[t.y0 * W + t.x1];
        const T f10 = f[t.y1 * W + t.x0], f11 = f[t.y1 * W + t.x1];
        T val = (T{1} - t.wy) * (T{1} - t.wx) * f00;
        if (t.wx != T{0}) val += (T{1} - t.wy) * t.wx * f01;
        if (t.wy != T{0}) val += t.wy * (T{1} - t.wx) * f10;
        if (t.wy != T{0} && t.wx != T{0}) val += t.wy * t.wx * f11;
        out[idx] = val;
        taps[static_cast<std::size_t>(idx)] = t;
      }
    }
  }
  return Var<T>::from_op(std::move(out), {frame, u, v}, [d, W, hw, taps = std::move(taps)](Node<T>& nd) {
    const bool gf = nd.input_needs_grad(0), gu = nd.input_needs_grad(1), gv = nd.input_needs_grad(2);
    const auto& fv = nd.input(0).value;
    for (std::int64_t n = 0; n < d.n; ++n) {
      const T* f = fv.ptr() + n * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const std::int64_t idx = n * hw + i;
        const Tap& t = taps[static_cast<std::size_t>(idx)];
        const T g = nd.grad[idx];
        if (gf) {
          T* df = nd.input(0).grad_ref().ptr() + n * hw;
          df[t.y0 * W + t.x0] += g * (T{1} - t.wy) * (T{1} - t.wx);
          df[t.y0 * W + t.x1] += g * (T{1} - t.wy) * t.wx;
          df[t.y1 * W + t.x0] += g * t.wy * (T{1} - t.wx);
          df[t.y1 * W + t.x1] += g * t.wy * t.wx;
        }
        if (gu || gv) {
          const T f00 = f[t.y0 * W + t.x0], f01 = f[t.y0 * W + t.x1];
          const T f10 = f[t.y1 * W + t.x0], f11 = f[t.y1 * W + t.x1];
          // Sample position is (y - v, x - u), hence the sign flip.
          if (gu && !t.clamp_x) {
            const T dsx = (T{1} - t.wy) * (f01 - f00) + t.wy * (f11 - f10);
            nd.input(1).grad_ref()[idx] -= g * dsx;
          }
          if (gv && !t.clamp_y) {
            const T dsy = (T{1} - t.wx) * (f10 - f00) + t.wx * (f11 - f01);
            nd.input(2).grad_ref()[idx] -= g * dsy;
          }
        }
      }
    }
  });
}

template <std::floating_point T>
Var<T> spectral_normalize(const Var<T>& w, const Tensor<T>& u, const Tensor<T>& v) {
  const std::int64_t rows = w.shape().at(0);
  const std::int64_t cols = w.numel() / rows;
  if (u.numel() != rows || v.numel() != cols) {
    throw ShapeError(fmt::format("spectral_normalize: u ({}) / v ({}) do not match weight {}", u.numel(),
                                 v.numel(), shape_string(w.shape())));
  }
  CMapR<T> wm(w.value().ptr(), rows, cols);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> uv(u.ptr(), rows), vv(v.ptr(), cols);
  const T sigma_raw = uv.dot(wm * vv);
  const T tiny = std::numeric_limits<T>::min();
  const bool clamped = !(sigma_raw > tiny);
  const T sigma = clamped ? tiny : sigma_raw;
  Tensor<T> out(w.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = w.value()[i] / sigma;
  return Var<T>::from_op(std::move(out), {w}, [rows, cols, sigma, clamped, u, v](Node<T>& nd) {
    auto& g = nd.input(0).grad_ref();
    const auto& wv = nd.input(0).value;
    T inner = 0;
    for (std::int64_t i = 0; i < g.numel(); ++i) inner += nd.grad[i] * wv[i];
    const T coef = clamped ? T{0} : inner / (sigma * sigma);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c) {
        const std::int64_t i = r * cols + c;
        g[i] += nd.grad[i] / sigma - coef * u[r] * v[c];
      }
  });
}

template <std::floating_point T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred, target, "mse_loss");
  const std::int64_t n = pred.numel();
  if (n == 0) throw ShapeError("mse_loss: empty input");
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double dlt = double(pred.value()[i]) - double(target.value()[i]);
    s += dlt * dlt;
  }
  Tensor<T> out({1}, static_cast<T>(s / double(n)));
  return Var<T>::from_op(std::move(out), {pred, target}, [n](Node<T>& nd) {
    const T scale = T{2} * nd.grad[0] / static_cast<T>(n);
    const auto& p = nd.input(0).value;
    const auto& t = nd.input(1).value;
    if (nd.input_needs_grad(0)) {
      auto& g = nd.input(0).grad_ref();
      for (std::int64_t i = 0; i < n; ++i) g[i] += scale * (p[i] - t[i]);
    }
    if (nd.input_needs_grad(1)) {
      auto& g = nd.input(1).grad_ref();
      for (std::int64_t i = 0; i < n; ++i) g[i] -= scale * (p[i] - t[i]);
    }
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x.value()[i];
  return Var<T>::from_op(Tensor<T>({1}, static_cast<T>(s)), {x}, [](Node<T>& nd) {
    auto& g = nd.input(0).grad_ref();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[0];
  });
}

template <std::floating_point T>
Var<T> dot(const Var<T>& x, const Tensor<T>& r) {
  if (x.shape() != r.shape()) throw ShapeError("dot: shape mismatch");
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += double(x.value()[i]) * double(r[i]);
  return Var<T>::from_op(Tensor<T>({1}, static_cast<T>(s)), {x}, [r](Node<T>& nd) {
    auto& g = nd.input(0).grad_ref();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[0] * r[i];
  });
}

#define NOWCAST_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> add_scalar(const Var<T>&, T);                                                      \
  template Var<T> scale(const Var<T>&, T);                                                           \
  template Var<T> relu(const Var<T>&);                                                               \
  template Var<T> sigmoid(const Var<T>&);                                                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&,   \
                             const BatchNormOptions&);                                               \
  template Var<T> max_pool2d(const Var<T>&);                                                         \
  template Var<T> adaptive_max_pool2d(const Var<T>&, std::int64_t, std::int64_t);                   \
  template Var<T> global_avg_pool(const Var<T>&);                                                    \
  template Var<T> global_max_pool(const Var<T>&);                                                    \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> channel_mean(const Var<T>&);                                                       \
  template Var<T> channel_max(const Var<T>&);                                                        \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                       \
  template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                         \
  template Var<T> scale_channels(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale_spatial(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul_channel_vector(const Var<T>&, const Var<T>&);                                  \
  template Var<T> resize_bilinear(const Var<T>&, std::int64_t, std::int64_t);                        \
  template Var<T> warp_bilinear(const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> spectral_normalize(const Var<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Var<T> mse_loss(const Var<T>&, const Var<T>&);                                            \
  template Var<T> sum(const Var<T>&);                                                                \
  template Var<T> dot(const Var<T>&, const Tensor<T>&);

NOWCAST_INSTANTIATE_OPS(float)
NOWCAST_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace nowcast
