#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "nowcast/evolution.hpp"

namespace nowcast {

enum class ModelVariant { smaat_unet, mad_smaat_gnet, smaat_evo, smaat_2stream, evo_net, persistence };

inline constexpr std::array<ModelVariant, 6> kAllVariants = {
    ModelVariant::smaat_unet, ModelVariant::mad_smaat_gnet, ModelVariant::smaat_evo,
    ModelVariant::smaat_2stream, ModelVariant::evo_net, ModelVariant::persistence};

std::string_view to_string(ModelVariant variant);
ModelVariant parse_variant(std::string_view text);
bool uses_aux(ModelVariant variant);
bool uses_evolution(ModelVariant variant);
bool is_trainable(ModelVariant variant);

struct ModelConfig {
  ModelVariant variant = ModelVariant::smaat_unet;
  std::int64_t in_rain_frames = kInputFrames;
  std::int64_t out_frames = kHorizon;
  std::int64_t aux_channels = kAuxChannels;
  std::int64_t rain_base_channels = 64;
  std::int64_t aux_base_channels = 128;
  std::int64_t height = 64;
  std::int64_t width = 64;

  /// Reference widths for the variant: base 64 for smaat_unet, 32 otherwise; aux twice the rain base.
  static ModelConfig defaults(ModelVariant variant, std::int64_t height, std::int64_t width);
  void validate() const;
};

struct Forecast {
  std::vector<Grid2D> frames;
  ModelVariant provenance = ModelVariant::persistence;
};

/// Common interface of the six forecasters. Inputs are normalized NCHW tensors:
/// rain_in (B,4,H,W), aux (B,20,H,W); output (B,4,H,W).
template <std::floating_point T>
class Forecaster : public Module<T> {
 public:
  explicit Forecaster(ModelConfig cfg) : cfg_(cfg) {}
  virtual Var<T> forward(const Var<T>& rain_in, const Var<T>& aux) = 0;
  const ModelConfig& config() const { return cfg_; }
  /// The evolution submodule when the variant has one.
  EvolutionNet<T>* evolution() { return dynamic_cast<EvolutionNet<T>*>(this->child("evolution")); }

 protected:
  void check_inputs(const Var<T>& rain_in, const Var<T>& aux) const;

 private:
  ModelConfig cfg_;
};

/// Deterministic construction given the seed.
template <std::floating_point T>
std::unique_ptr<Forecaster<T>> build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ParameterBreakdown {
  std::int64_t total = 0;
  std::vector<std::pair<std::string, std::int64_t>> per_submodule;
};

template <std::floating_point T>
ParameterBreakdown count_parameters(Forecaster<T>& model);

template <std::floating_point T>
struct Batch {
  Tensor<T> rain_in;  // (B,4,H,W)
  Tensor<T> aux;      // (B,20,H,W), variable-major channel order
  Tensor<T> target;   // (B,4,H,W)
};

template <std::floating_point T>
Batch<T> make_batch(const std::vector<const Sample*>& samples);

/// Single-sample inference in eval mode.
Forecast forward(Forecaster<float>& model, const Sample& sample);

extern template class Forecaster<float>;
extern template class Forecaster<double>;

}  // namespace nowcast
