#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "nowcast/blocks.hpp"
#include "nowcast/datamodel.hpp"

namespace nowcast {

inline constexpr std::int64_t kEvoBaseChannels = 16;
inline constexpr int kPoolStages = 4;
inline constexpr std::int64_t kMinSpatial = 1 << kPoolStages;

struct MotionField {
  std::vector<Grid2D> u;  // horizontal displacement, px per step
  std::vector<Grid2D> v;  // vertical displacement, px per step
  std::size_t steps() const { return u.size(); }
};

struct IntensityResidual {
  std::vector<Grid2D> r;
  std::vector<float> gamma;
  std::size_t steps() const { return r.size(); }
};

struct EvolutionOutput {
  std::vector<Grid2D> frames;
  MotionField motion;
  IntensityResidual residual;
};

enum class InjectLevel { bottleneck, first_up, final };

InjectLevel parse_inject_level(std::string_view text);

/// Spatial dims after `stages` rounds of 2x2 floor pooling.
std::array<std::int64_t, 2> pooled_dims(std::int64_t h, std::int64_t w, int stages);

/// Throws ConfigError when (h, w) cannot be pooled kPoolStages times.
void check_poolable(std::int64_t h, std::int64_t w);

/// Grid-level semi-Lagrangian warp: out(y,x) = frame(y - v, x - u), bilinear, border clamped.
Grid2D warp_bilinear(const Grid2D& frame, const Grid2D& u, const Grid2D& v);

/// x1 = warp(last, u1, v1) + g1 r1, x_{t+1} = warp(x_t, u_{t+1}, v_{t+1}) + g_{t+1} r_{t+1}.
std::vector<Grid2D> evolution_rollout(const Grid2D& last, const MotionField& motion,
                                      const IntensityResidual& residual);

namespace evo {

/// Tensor rollout. last (B,1,H,W); motion (B,2T,H,W) with channel 2t = u_t, 2t+1 = v_t;
/// residual (B,T,H,W), already scaled by gamma. Returns (B,T,H,W).
template <std::floating_point T>
Var<T> rollout(const Var<T>& last, const Var<T>& motion, const Var<T>& residual);

/// Evolution frames (B,T,H,W) mapped to SPADE conditioning at a decoder level.
template <std::floating_point T>
Var<T> inject_features(const Var<T>& frames, InjectLevel level);

}  // namespace evo

/// Evolution U-Net: spectral residual encoder over the input rain frames, one decoder
/// for motion fields and one for intensity residuals, sharing skip connections.
template <std::floating_point T>
class EvolutionNet : public Module<T> {
 public:
  struct Fields {
    Var<T> motion;    // (B,2T,H,W)
    Var<T> residual;  // (B,T,H,W), gamma-scaled
    Var<T> raw_residual;
  };

  EvolutionNet(std::int64_t in_frames, std::int64_t horizon, Rng& rng,
               std::int64_t base_channels = kEvoBaseChannels);

  Fields predict_fields(const Var<T>& rain_in);
  /// Predicted frames (B,T,H,W) from rain_in (B,in_frames,H,W).
  Var<T> forward(const Var<T>& rain_in);
  EvolutionOutput forward_grids(const Var<T>& rain_in, std::int64_t batch_index = 0);

  Var<T>& gamma() { return *gamma_; }
  std::int64_t horizon() const { return horizon_; }
  std::vector<std::int64_t> encoder_channels() const { return encoder_channels_; }

 private:
  struct Decoder {
    std::array<SpectralResidualBlock<T>*, kPoolStages> ups{};
  };
  Var<T> decode(const Decoder& dec, const std::vector<Var<T>>& skips);

  std::int64_t in_frames_, horizon_;
  std::vector<std::int64_t> encoder_channels_;
  SpectralResidualBlock<T>* inc_;
  std::array<SpectralResidualBlock<T>*, kPoolStages> downs_{};
  Decoder motion_dec_, intensity_dec_;
  Conv2d<T>* motion_head_;
  Conv2d<T>* intensity_head_;
  Var<T>* gamma_;
};

extern template class EvolutionNet<float>;
extern template class EvolutionNet<double>;

}  // namespace nowcast
