#include "nowcast/evolution.hpp"

#include <fmt/format.h>

namespace nowcast {

InjectLevel parse_inject_level(std::string_view text) {
  if (text == "bottleneck") return InjectLevel::bottleneck;
  if (text == "first_up") return InjectLevel::first_up;
  if (text == "final") return InjectLevel::final;
  throw ConfigError(fmt::format("unknown injection level '{}'", text));
}

std::array<std::int64_t, 2> pooled_dims(std::int64_t h, std::int64_t w, int stages) {
  for (int i = 0; i < stages; ++i) {
    h /= 2;
    w /= 2;
  }
  return {h, w};
}

void check_poolable(std::int64_t h, std::int64_t w) {
  if (h < kMinSpatial || w < kMinSpatial) {
    throw ConfigError(fmt::format("input {}x{} is too small for {} pooling stages (minimum {})", h, w,
                                  kPoolStages, kMinSpatial));
  }
}

namespace {

Var<float> grid_var(const Grid2D& g) {
  const auto v = g.values();
  return Var<float>(Tensor<float>({1, 1, std::int64_t(g.height()), std::int64_t(g.width())},
                                  std::vector<float>(v.begin(), v.end())));
}

Grid2D var_grid(const Tensor<float>& t, std::int64_t n, std::int64_t c, Unit unit) {
  const Dims4 d = dims4(t.shape());
  const float* p = t.ptr() + (n * d.c + c) * d.plane();
  return Grid2D(std::size_t(d.h), std::size_t(d.w), unit, std::vector<float>(p, p + d.plane()));
}

}  // namespace

Grid2D warp_bilinear(const Grid2D& frame, const Grid2D& u, const Grid2D& v) {
  if (!frame.congruent(u) || !frame.congruent(v)) {
    throw ShapeError("warp_bilinear: frame and motion grids must be congruent");
  }
  NoGradGuard guard;
  return var_grid(ops::warp_bilinear(grid_var(frame), grid_var(u), grid_var(v)).value(), 0, 0, frame.unit());
}

std::vector<Grid2D> evolution_rollout(const Grid2D& last, const MotionField& motion,
                                      const IntensityResidual& residual) {
  if (motion.u.size() != motion.v.size()) throw InvalidInput("rollout: u and v step counts differ");
  if (motion.steps() != residual.steps() || residual.gamma.size() != residual.steps()) {
    throw InvalidInput(fmt::format("rollout: {} motion steps but {} residual steps and {} gamma entries",
                                   motion.steps(), residual.steps(), residual.gamma.size()));
  }
  std::vector<Grid2D> out;
  const Grid2D* current = &last;
  for (std::size_t t = 0; t < motion.steps(); ++t) {
    if (!last.congruent(residual.r[t])) throw ShapeError("rollout: residual grid not congruent");
    Grid2D next = warp_bilinear(*current, motion.u[t], motion.v[t]);
    const auto r = residual.r[t].values();
    auto x = next.values();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += residual.gamma[t] * r[i];
    out.push_back(std::move(next));
    current = &out.back();
  }
  return out;
}

namespace evo {

template <std::floating_point T>
Var<T> rollout(const Var<T>& last, const Var<T>& motion, const Var<T>& residual) {
  const Dims4 ld = dims4(last.shape(), "rollout last frame");
  const Dims4 md = dims4(motion.shape(), "rollout motion");
  const Dims4 rd = dims4(residual.shape(), "rollout residual");
  if (ld.c != 1) throw ShapeError("rollout: last frame must have one channel");
  if (md.c != 2 * rd.c) {
    throw InvalidInput(fmt::format("rollout: {} motion channels do not match {} residual steps", md.c, rd.c));
  }
  if (md.h != ld.h || md.w != ld.w || rd.h != ld.h || rd.w != ld.w || md.n != ld.n || rd.n != ld.n) {
    throw ShapeError("rollout: fields not congruent with the last frame");
  }
  std::vector<Var<T>> frames;
  Var<T> x = last;
  for (std::int64_t t = 0; t < rd.c; ++t) {
    Var<T> warped = ops::warp_bilinear(x, ops::slice_channels(motion, 2 * t, 1),
                                       ops::slice_channels(motion, 2 * t + 1, 1));
    x = ops::add(warped, ops::slice_channels(residual, t, 1));
    frames.push_back(x);
  }
  return ops::concat_channels(frames);
}

template <std::floating_point T>
Var<T> inject_features(const Var<T>& frames, InjectLevel level) {
  const Dims4 d = dims4(frames.shape(), "evolution frames");
  switch (level) {
    case InjectLevel::bottleneck: {
      auto [h, w] = pooled_dims(d.h, d.w, kPoolStages);
      return ops::adaptive_max_pool2d(frames, h, w);
    }
    case InjectLevel::first_up: {
      auto [h, w] = pooled_dims(d.h, d.w, kPoolStages - 1);
      return ops::adaptive_max_pool2d(frames, h, w);
    }
    case InjectLevel::final:
      return frames;
  }
  throw ConfigError("unknown injection level");
}

template Var<float> rollout(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> rollout(const Var<double>&, const Var<double>&, const Var<double>&);
template Var<float> inject_features(const Var<float>&, InjectLevel);
template Var<double> inject_features(const Var<double>&, InjectLevel);

}  // namespace evo

template <std::floating_point T>
EvolutionNet<T>::EvolutionNet(std::int64_t in_frames, std::int64_t horizon, Rng& rng, std::int64_t base)
    : in_frames_(in_frames), horizon_(horizon) {
  for (int i = 0; i <= kPoolStages; ++i) encoder_channels_.push_back(base << std::min(i, kPoolStages - 1));
  const auto& enc = encoder_channels_;
  inc_ = &this->register_module("inc", std::make_unique<SpectralResidualBlock<T>>(in_frames, enc[0], 0, rng));
  for (int i = 0; i < kPoolStages; ++i) {
    downs_[i] = &this->register_module(
        fmt::format("down{}", i + 1), std::make_unique<SpectralResidualBlock<T>>(enc[i], enc[i + 1], 0, rng));
  }
  auto build_decoder = [&](Decoder& dec, const char* prefix) {
    std::int64_t cur = enc[kPoolStages];
    for (int i = 0; i < kPoolStages; ++i) {
      const std::int64_t skip = enc[kPoolStages - 1 - i];
      const std::int64_t in = skip + cur;
      const std::int64_t out = i + 1 < kPoolStages ? skip / 2 : enc[0];
      dec.ups[i] = &this->register_module(fmt::format("{}.up{}", prefix, i + 1),
                                          std::make_unique<SpectralResidualBlock<T>>(in, out, in / 2, rng));
      cur = out;
    }
  };
  build_decoder(motion_dec_, "motion_decoder");
  build_decoder(intensity_dec_, "intensity_decoder");
  motion_head_ = &this->register_module("motion_head", std::make_unique<Conv2d<T>>(enc[0], 2 * horizon, 1, true, rng));
  intensity_head_ =
      &this->register_module("intensity_head", std::make_unique<Conv2d<T>>(enc[0], horizon, 1, true, rng));
  gamma_ = &this->register_parameter("gamma", Tensor<T>({horizon}, T{0}));
}

template <std::floating_point T>
Var<T> EvolutionNet<T>::decode(const Decoder& dec, const std::vector<Var<T>>& skips) {
  Var<T> x = skips.back();
  for (int i = 0; i < kPoolStages; ++i) {
    const Var<T>& skip = skips[kPoolStages - 1 - i];
    const Dims4 sd = dims4(skip.shape());
    x = ops::resize_bilinear(x, sd.h, sd.w);
    x = dec.ups[i]->forward(ops::concat_channels<T>({skip, x}));
  }
  return x;
}

template <std::floating_point T>
typename EvolutionNet<T>::Fields EvolutionNet<T>::predict_fields(const Var<T>& rain_in) {
  const Dims4 d = dims4(rain_in.shape(), "evolution input");
  if (d.c != in_frames_) {
    throw ShapeError(fmt::format("evolution: expected {} input frames, got {}", in_frames_, d.c));
  }
  check_poolable(d.h, d.w);
  std::vector<Var<T>> skips{inc_->forward(rain_in)};
  for (int i = 0; i < kPoolStages; ++i) skips.push_back(downs_[i]->forward(ops::max_pool2d(skips.back())));
  Fields f;
  f.motion = motion_head_->forward(decode(motion_dec_, skips));
  f.raw_residual = intensity_head_->forward(decode(intensity_dec_, skips));
  f.residual = ops::mul_channel_vector(f.raw_residual, *gamma_);
  return f;
}

template <std::floating_point T>
Var<T> EvolutionNet<T>::forward(const Var<T>& rain_in) {
  Fields f = predict_fields(rain_in);
  return evo::rollout(ops::slice_channels(rain_in, in_frames_ - 1, 1), f.motion, f.residual);
}

template <std::floating_point T>
EvolutionOutput EvolutionNet<T>::forward_grids(const Var<T>& rain_in, std::int64_t n) {
  NoGradGuard guard;
  Fields f = predict_fields(rain_in);
  Var<T> frames = evo::rollout(ops::slice_channels(rain_in, in_frames_ - 1, 1), f.motion, f.residual);
  const Tensor<float> fr = frames.value().template cast<float>();
  const Tensor<float> mo = f.motion.value().template cast<float>();
  const Tensor<float> re = f.raw_residual.value().template cast<float>();
  EvolutionOutput out;
  for (std::int64_t t = 0; t < horizon_; ++t) {
    out.frames.push_back(var_grid(fr, n, t, Unit::dimensionless));
    out.motion.u.push_back(var_grid(mo, n, 2 * t, Unit::dimensionless));
    out.motion.v.push_back(var_grid(mo, n, 2 * t + 1, Unit::dimensionless));
    out.residual.r.push_back(var_grid(re, n, t, Unit::dimensionless));
    out.residual.gamma.push_back(static_cast<float>(gamma_->value()[t]));
  }
  return out;
}

template class EvolutionNet<float>;
template class EvolutionNet<double>;

}  // namespace nowcast
