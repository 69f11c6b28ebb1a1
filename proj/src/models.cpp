#include "nowcast/models.hpp"

#include <fmt/format.h>

namespace nowcast {

std::string_view to_string(ModelVariant variant) {
  switch (variant) {
    case ModelVariant::smaat_unet: return "smaat_unet";
    case ModelVariant::mad_smaat_gnet: return "mad_smaat_gnet";
    case ModelVariant::smaat_evo: return "smaat_evo";
    case ModelVariant::smaat_2stream: return "smaat_2stream";
    case ModelVariant::evo_net: return "evo_net";
    case ModelVariant::persistence: return "persistence";
  }
  return "?";
}

ModelVariant parse_variant(std::string_view text) {
  for (auto v : kAllVariants) {
    if (to_string(v) == text) return v;
  }
  throw ConfigError(fmt::format("unknown model variant '{}'", text));
}

bool uses_aux(ModelVariant v) { return v == ModelVariant::mad_smaat_gnet || v == ModelVariant::smaat_2stream; }
bool uses_evolution(ModelVariant v) {
  return v == ModelVariant::mad_smaat_gnet || v == ModelVariant::smaat_evo || v == ModelVariant::evo_net;
}
bool is_trainable(ModelVariant v) { return v != ModelVariant::persistence; }

ModelConfig ModelConfig::defaults(ModelVariant variant, std::int64_t height, std::int64_t width) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.rain_base_channels = variant == ModelVariant::smaat_unet ? 64 : 32;
  cfg.aux_base_channels = 2 * cfg.rain_base_channels;
  cfg.height = height;
  cfg.width = width;
  return cfg;
}

void ModelConfig::validate() const {
  if (in_rain_frames != std::int64_t(kInputFrames) || out_frames != std::int64_t(kHorizon)) {
    throw ConfigError(fmt::format("models take {} input and {} output frames", kInputFrames, kHorizon));
  }
  if (uses_aux(variant) && aux_channels != std::int64_t(kAuxChannels)) {
    throw ConfigError(fmt::format("{} needs {} auxiliary channels, got {}", to_string(variant), kAuxChannels,
                                  aux_channels));
  }
  if (rain_base_channels < 1 || aux_base_channels < 1) throw ConfigError("channel widths must be positive");
  if (variant != ModelVariant::persistence) check_poolable(height, width);
}

template <std::floating_point T>
void Forecaster<T>::check_inputs(const Var<T>& rain_in, const Var<T>& aux) const {
  const Dims4 d = dims4(rain_in.shape(), "rain input");
  if (d.c != cfg_.in_rain_frames || d.h != cfg_.height || d.w != cfg_.width) {
    throw ShapeError(fmt::format("{}: expected rain input (B,{},{},{}), got {}", to_string(cfg_.variant),
                                 cfg_.in_rain_frames, cfg_.height, cfg_.width, shape_string(rain_in.shape())));
  }
  if (uses_aux(cfg_.variant)) {
    if (!aux.defined()) throw ShapeError(fmt::format("{}: auxiliary input missing", to_string(cfg_.variant)));
    const Dims4 a = dims4(aux.shape(), "aux input");
    if (a.n != d.n || a.c != cfg_.aux_channels || a.h != d.h || a.w != d.w) {
      throw ShapeError(fmt::format("{}: expected aux input (B,{},{},{}), got {}", to_string(cfg_.variant),
                                   cfg_.aux_channels, d.h, d.w, shape_string(aux.shape())));
    }
  }
}

namespace {

template <std::floating_point T>
class PersistenceModel : public Forecaster<T> {
 public:
  using Forecaster<T>::Forecaster;
  Var<T> forward(const Var<T>& rain_in, const Var<T>& aux) override {
    this->check_inputs(rain_in, aux);
    Var<T> last = ops::slice_channels(rain_in, this->config().in_rain_frames - 1, 1);
    return ops::concat_channels(std::vector<Var<T>>(std::size_t(this->config().out_frames), last));
  }
};

template <std::floating_point T>
class EvoNetModel : public Forecaster<T> {
 public:
  EvoNetModel(ModelConfig cfg, Rng& rng) : Forecaster<T>(cfg) {
    evo_ = &this->register_module("evolution",
                                  std::make_unique<EvolutionNet<T>>(cfg.in_rain_frames, cfg.out_frames, rng));
  }
  Var<T> forward(const Var<T>& rain_in, const Var<T>& aux) override {
    this->check_inputs(rain_in, aux);
    return evo_->forward(rain_in);
  }

 private:
  EvolutionNet<T>* evo_;
};

/// Stem [double conv -> CBAM] then four [max-pool -> double conv -> CBAM] levels.
template <std::floating_point T>
class SmaAtEncoder : public Module<T> {
 public:
  SmaAtEncoder(std::int64_t in_channels, std::int64_t base, Rng& rng) {
    channels_ = {base, 2 * base, 4 * base, 8 * base, 8 * base};
    convs_[0] = &this->register_module("inc", std::make_unique<DscDoubleConv<T>>(in_channels, base, 0, rng));
    cbams_[0] = &this->register_module("inc_cbam", std::make_unique<Cbam<T>>(base, rng));
    for (int i = 1; i <= kPoolStages; ++i) {
      convs_[i] = &this->register_module(
          fmt::format("down{}", i), std::make_unique<DscDoubleConv<T>>(channels_[i - 1], channels_[i], 0, rng));
      cbams_[i] = &this->register_module(fmt::format("down{}_cbam", i), std::make_unique<Cbam<T>>(channels_[i], rng));
    }
  }

  std::vector<Var<T>> forward(const Var<T>& x) {
    std::vector<Var<T>> feats{cbams_[0]->forward(convs_[0]->forward(x))};
    for (int i = 1; i <= kPoolStages; ++i) {
      feats.push_back(cbams_[i]->forward(convs_[i]->forward(ops::max_pool2d(feats.back()))));
    }
    return feats;
  }

  const std::array<std::int64_t, kPoolStages + 1>& channels() const { return channels_; }

 private:
  std::array<std::int64_t, kPoolStages + 1> channels_{};
  std::array<DscDoubleConv<T>*, kPoolStages + 1> convs_{};
  std::array<Cbam<T>*, kPoolStages + 1> cbams_{};
};

// SPADE sites: 0 = bottleneck, 1..4 = after each up block. Site s uses encoder level 4-s
// for aux features; evolution frames condition sites 0, 1 and 4.
constexpr int kSites = kPoolStages + 1;
constexpr std::array<bool, kSites> kEvoSite = {true, true, false, false, true};
constexpr std::array<InjectLevel, kSites> kEvoLevel = {InjectLevel::bottleneck, InjectLevel::first_up,
                                                      InjectLevel::final, InjectLevel::final, InjectLevel::final};

/// SmaAt-UNet backbone with optional aux encoder and evolution network feeding SPADE sites.
template <std::floating_point T>
class SmaAtGNet : public Forecaster<T> {
 public:
  SmaAtGNet(ModelConfig cfg, Rng& rng) : Forecaster<T>(cfg) {
    const std::int64_t b = cfg.rain_base_channels;
    const bool aux = uses_aux(cfg.variant), evo = uses_evolution(cfg.variant);
    rain_ = &this->register_module("rain_encoder", std::make_unique<SmaAtEncoder<T>>(cfg.in_rain_frames, b, rng));
    if (aux) {
      aux_ = &this->register_module("aux_encoder",
                                    std::make_unique<SmaAtEncoder<T>>(cfg.aux_channels, cfg.aux_base_channels, rng));
    }
    if (evo) {
      evo_ = &this->register_module("evolution",
                                    std::make_unique<EvolutionNet<T>>(cfg.in_rain_frames, cfg.out_frames, rng));
    }
    const auto& enc = rain_->channels();
    std::array<std::int64_t, kSites> site_channels{};
    site_channels[0] = enc[kPoolStages];
    std::int64_t cur = enc[kPoolStages];
    for (int i = 0; i < kPoolStages; ++i) {
      const std::int64_t skip = enc[kPoolStages - 1 - i];
      const std::int64_t in = skip + cur;
      const std::int64_t out = i + 1 < kPoolStages ? skip / 2 : enc[0];
      ups_[i] = &this->register_module(fmt::format("up{}", i + 1),
                                       std::make_unique<DscDoubleConv<T>>(in, out, in / 2, rng));
      site_channels[i + 1] = out;
      cur = out;
    }
    for (int s = 0; s < kSites; ++s) {
      std::int64_t cond = 0;
      if (aux) cond += aux_->channels()[kPoolStages - s];
      if (evo && kEvoSite[s]) cond += cfg.out_frames;
      if (cond > 0) {
        spades_[s] = &this->register_module(fmt::format("spade{}", s),
                                            std::make_unique<Spade<T>>(site_channels[s], cond, rng));
      }
    }
    outc_ = &this->register_module("outc", std::make_unique<Conv2d<T>>(enc[0], cfg.out_frames, 1, true, rng));
  }

  Var<T> forward(const Var<T>& rain_in, const Var<T>& aux) override {
    this->check_inputs(rain_in, aux);
    std::vector<Var<T>> skips = rain_->forward(rain_in);
    std::vector<Var<T>> aux_feats;
    if (aux_) aux_feats = aux_->forward(aux);
    Var<T> evo_frames;
    if (evo_) evo_frames = evo_->forward(rain_in);

    auto modulate = [&](int s, const Var<T>& x) {
      if (!spades_[s]) return x;
      std::vector<Var<T>> cond;
      if (aux_) cond.push_back(aux_feats[kPoolStages - s]);
      if (evo_ && kEvoSite[s]) cond.push_back(evo::inject_features(evo_frames, kEvoLevel[s]));
      return spades_[s]->forward(x, cond.size() == 1 ? cond[0] : ops::concat_channels(cond));
    };

    Var<T> x = modulate(0, skips[kPoolStages]);
    for (int i = 0; i < kPoolStages; ++i) {
      const Var<T>& skip = skips[kPoolStages - 1 - i];
      const Dims4 sd = dims4(skip.shape());
      x = ups_[i]->forward(ops::concat_channels<T>({skip, ops::resize_bilinear(x, sd.h, sd.w)}));
      x = modulate(i + 1, x);
    }
    return outc_->forward(x);
  }

 private:
  SmaAtEncoder<T>* rain_ = nullptr;
  SmaAtEncoder<T>* aux_ = nullptr;
  EvolutionNet<T>* evo_ = nullptr;
  std::array<DscDoubleConv<T>*, kPoolStages> ups_{};
  std::array<Spade<T>*, kSites> spades_{};
  Conv2d<T>* outc_ = nullptr;
};

}  // namespace

template <std::floating_point T>
std::unique_ptr<Forecaster<T>> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  switch (cfg.variant) {
    case ModelVariant::persistence: return std::make_unique<PersistenceModel<T>>(cfg);
    case ModelVariant::evo_net: return std::make_unique<EvoNetModel<T>>(cfg, rng);
    default: return std::make_unique<SmaAtGNet<T>>(cfg, rng);
  }
}

template <std::floating_point T>
ParameterBreakdown count_parameters(Forecaster<T>& model) {
  ParameterBreakdown out;
  // a lone submodule (evo_net) is broken down one level further
  const int depth = model.children().size() == 1 ? 2 : 1;
  for (const auto& [name, p] : model.named_parameters()) {
    std::size_t cut = 0;
    for (int d = 0; d < depth && cut != std::string::npos; ++d) cut = name.find('.', cut == 0 ? 0 : cut + 1);
    const std::string key = name.substr(0, cut);
    if (out.per_submodule.empty() || out.per_submodule.back().first != key) out.per_submodule.emplace_back(key, 0);
    out.per_submodule.back().second += p->numel();
  }
  out.total = model.parameter_count();
  return out;
}

template <std::floating_point T>
Batch<T> make_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw InvalidInput("make_batch: no samples");
  const auto h = std::int64_t(samples.front()->height()), w = std::int64_t(samples.front()->width());
  const std::int64_t n = std::int64_t(samples.size()), plane = h * w;
  Batch<T> b{Tensor<T>({n, std::int64_t(kInputFrames), h, w}), Tensor<T>({n, std::int64_t(kAuxChannels), h, w}),
             Tensor<T>({n, std::int64_t(kHorizon), h, w})};
  auto copy = [](const Grid2D& g, T* dst) {
    const auto v = g.values();
    std::copy(v.begin(), v.end(), dst);
  };
  for (std::int64_t i = 0; i < n; ++i) {
    const Sample& s = *samples[std::size_t(i)];
    if (std::int64_t(s.height()) != h || std::int64_t(s.width()) != w) {
      throw ShapeError("make_batch: samples differ in spatial size");
    }
    for (std::size_t t = 0; t < kInputFrames; ++t) {
      copy(s.rain_in[t], b.rain_in.ptr() + (i * std::int64_t(kInputFrames) + std::int64_t(t)) * plane);
    }
    for (std::size_t t = 0; t < kHorizon; ++t) {
      copy(s.rain_target[t], b.target.ptr() + (i * std::int64_t(kHorizon) + std::int64_t(t)) * plane);
    }
    for (std::size_t v = 0; v < kAuxVariableCount; ++v) {
      for (std::size_t t = 0; t < kInputFrames; ++t) {
        const std::int64_t c = std::int64_t(v * kInputFrames + t);
        copy(s.aux_in[v][t], b.aux.ptr() + (i * std::int64_t(kAuxChannels) + c) * plane);
      }
    }
  }
  return b;
}

Forecast forward(Forecaster<float>& model, const Sample& sample) {
  NoGradGuard guard;
  const bool was_training = model.is_training();
  model.eval();
  Batch<float> b = make_batch<float>({&sample});
  Var<float> out = model.forward(Var<float>(std::move(b.rain_in)), Var<float>(std::move(b.aux)));
  model.train(was_training);
  Forecast f;
  f.provenance = model.config().variant;
  const Dims4 d = dims4(out.shape());
  for (std::int64_t t = 0; t < d.c; ++t) {
    const float* p = out.value().ptr() + t * d.plane();
    f.frames.emplace_back(std::size_t(d.h), std::size_t(d.w), Unit::dimensionless,
                          std::vector<float>(p, p + d.plane()));
  }
  return f;
}

template class Forecaster<float>;
template class Forecaster<double>;
template std::unique_ptr<Forecaster<float>> build_model(const ModelConfig&, std::uint64_t);
template std::unique_ptr<Forecaster<double>> build_model(const ModelConfig&, std::uint64_t);
template ParameterBreakdown count_parameters(Forecaster<float>&);
template ParameterBreakdown count_parameters(Forecaster<double>&);
template Batch<float> make_batch(const std::vector<const Sample*>&);
template Batch<double> make_batch(const std::vector<const Sample*>&);

}  // namespace nowcast
