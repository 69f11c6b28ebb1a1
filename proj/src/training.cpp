#include "nowcast/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <json.hpp>
#include <zlib.h>

namespace nowcast {

namespace fs = std::filesystem;
using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr_init > 0.0)) throw ConfigError("lr_init must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau_factor must lie in (0,1)");
  if (plateau_patience < 1 || early_stop_patience < 1) throw ConfigError("patience values must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (improve_eps < 0.0) throw ConfigError("improve_eps must be >= 0");
}

PlateauScheduler PlateauScheduler::from(const TrainConfig& cfg) {
  PlateauScheduler s;
  s.lr = cfg.lr_init;
  s.factor = cfg.plateau_factor;
  s.patience = cfg.plateau_patience;
  s.improve_eps = cfg.improve_eps;
  return s;
}

bool PlateauScheduler::step(double val_loss) {
  if (val_loss < best - improve_eps) {
    best = val_loss;
    bad_epochs = 0;
    return false;
  }
  if (++bad_epochs >= patience) {
    lr *= factor;
    bad_epochs = 0;
    return true;
  }
  return false;
}

bool EarlyStopState::update(double val_loss) {
  if (val_loss < best_val - improve_eps) {
    best_val = val_loss;
    epochs_since_best = 0;
    return true;
  }
  if (++epochs_since_best >= patience) stopped = true;
  return false;
}

template <std::floating_point T>
Adam<T>::Adam(std::vector<Var<T>*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

template <std::floating_point T>
void Adam<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <std::floating_point T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  const double step = lr_ / c1;
  const double b1 = beta1_, b2 = beta2_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var<T>& p = *params_[k];
    const Tensor<T>& g = p.grad();
    if (g.empty()) continue;
    T* w = p.mutable_value().ptr();
    T* m = m_[k].ptr();
    T* v = v_[k].ptr();
    const T* gp = g.ptr();
    const std::int64_t n = p.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = T(b1 * m[i] + (1.0 - b1) * gp[i]);
      v[i] = T(b2 * v[i] + (1.0 - b2) * double(gp[i]) * gp[i]);
      w[i] -= T(step * m[i] / (std::sqrt(v[i] / c2) + eps_));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

void TrainHistory::write_csv(const fs::path& file) const {
  std::ofstream out(file, std::ios::trunc);
  out << "epoch,train_mse,val_mse,lr,seconds\n";
  for (const auto& e : epochs) {
    out << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.3f}\n", e.epoch, e.train_mse, e.val_mse, e.lr, e.seconds);
  }
  if (!out) throw InvalidInput(fmt::format("cannot write {}", file.string()));
}

double mse(const Tensor<float>& pred, const Tensor<float>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError(fmt::format("mse: {} vs {}", shape_string(pred.shape()), shape_string(target.shape())));
  }
  if (pred.numel() == 0) return 0.0;
  double s = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = double(pred[i]) - double(target[i]);
    s += d * d;
  }
  return s / double(pred.numel());
}

double mse_loss(const Forecast& pred, const std::vector<Grid2D>& target) {
  if (pred.frames.size() != target.size()) {
    throw ShapeError(fmt::format("mse_loss: {} predicted vs {} target frames", pred.frames.size(), target.size()));
  }
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (!pred.frames[t].congruent(target[t])) throw ShapeError("mse_loss: frames not congruent");
    const auto a = pred.frames[t].values(), b = target[t].values();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = double(a[i]) - double(b[i]);
      s += d * d;
    }
    n += a.size();
  }
  return n ? s / double(n) : 0.0;
}

namespace {

std::vector<const Sample*> batch_ptrs(const std::vector<Sample>& samples, const std::vector<std::size_t>& order,
                                      std::size_t begin, std::size_t end) {
  std::vector<const Sample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[order[i]]);
  return out;
}

struct Snapshot {
  std::vector<Tensor<float>> params, buffers;

  static Snapshot take(Module<float>& m) {
    Snapshot s;
    for (auto& [n, p] : m.named_parameters()) s.params.push_back(p->value());
    for (auto& [n, b] : m.named_buffers()) s.buffers.push_back(*b);
    return s;
  }
  void restore(Module<float>& m) const {
    auto ps = m.named_parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].second->mutable_value() = params[i];
    auto bs = m.named_buffers();
    for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].second = buffers[i];
  }
};

void set_mode(Forecaster<float>& model, bool training, bool freeze_evo) {
  model.train(training);
  if (freeze_evo) {
    if (auto* evo = model.evolution()) evo->eval();
  }
}

}  // namespace

double dataset_mse(Forecaster<float>& model, const std::vector<Sample>& samples, std::size_t batch_size) {
  if (samples.empty()) return 0.0;
  NoGradGuard guard;
  const bool was_training = model.is_training();
  model.eval();
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  double sum = 0.0;
  std::int64_t count = 0;
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    Batch<float> batch = make_batch<float>(batch_ptrs(samples, order, b, std::min(samples.size(), b + batch_size)));
    Var<float> out = model.forward(Var<float>(std::move(batch.rain_in)), Var<float>(std::move(batch.aux)));
    sum += mse(out.value(), batch.target) * double(batch.target.numel());
    count += batch.target.numel();
  }
  model.train(was_training);
  return sum / double(count);
}

FitResult fit(Forecaster<float>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitHooks& hooks) {
  cfg.validate();
  if (train.empty()) throw InvalidInput("fit: empty training split");
  if (val.empty()) throw InvalidInput("fit: empty validation split");
  if (!is_trainable(model.config().variant)) throw ConfigError("fit: model has no trainable parameters");

  EvolutionNet<float>* evo = model.evolution();
  if (cfg.pretrained_evo) {
    if (!evo) throw ConfigError(fmt::format("{} has no evolution network", to_string(model.config().variant)));
    LoadReport rep = load_submodule(*cfg.pretrained_evo, model, "evolution.");
    if (!rep.missing.empty() || !rep.unexpected.empty()) {
      throw CorruptData(fmt::format("pretrained evolution checkpoint: {} missing, {} unexpected entries",
                                    rep.missing.size(), rep.unexpected.size()));
    }
  }
  const bool freeze = cfg.freeze_evo && evo != nullptr;
  if (freeze) evo->set_requires_grad(false);

  std::vector<Var<float>*> params;
  for (auto* p : model.parameters()) {
    if (p->requires_grad()) params.push_back(p);
  }
  Adam<float> adam(params, cfg.lr_init);
  PlateauScheduler sched = PlateauScheduler::from(cfg);
  EarlyStopState stop{.patience = cfg.early_stop_patience, .improve_eps = cfg.improve_eps};
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  FitResult result;
  Snapshot best = Snapshot::take(model);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    set_mode(model, true, freeze);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(train.size(), b + cfg.batch_size);
      Batch<float> batch = make_batch<float>(batch_ptrs(train, order, b, e));
      Var<float> out = model.forward(Var<float>(std::move(batch.rain_in)), Var<float>(std::move(batch.aux)));
      Var<float> loss = ops::mse_loss(out, Var<float>(std::move(batch.target)));
      const double l = loss.value()[0];
      if (!std::isfinite(l)) {
        best.restore(model);
        set_mode(model, false, freeze);
        throw Divergence(fmt::format("non-finite training loss at epoch {}, batch {}", epoch, b / cfg.batch_size));
      }
      adam.zero_grad();
      loss.backward();
      adam.step();
      loss_sum += l * double(e - b);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = loss_sum / double(train.size());
    rec.lr = adam.lr();
    rec.val_mse = dataset_mse(model, val, cfg.batch_size);
    if (!std::isfinite(rec.val_mse)) {
      best.restore(model);
      set_mode(model, false, freeze);
      throw Divergence(fmt::format("non-finite validation loss at epoch {}", epoch));
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);

    if (stop.update(rec.val_mse)) {
      best = Snapshot::take(model);
      result.best_val = rec.val_mse;
      result.best_epoch = epoch;
    }
    if (sched.step(rec.val_mse)) adam.set_lr(sched.lr);
    if (hooks.on_epoch && hooks.on_epoch(rec, model)) {
      result.stopped_by_hook = true;
      break;
    }
    if (stop.stopped) {
      result.early_stopped = true;
      break;
    }
  }
  best.restore(model);
  if (freeze) evo->set_requires_grad(true);
  model.eval();
  return result;
}

std::unique_ptr<Forecaster<float>> pretrain_evolution(const std::vector<Sample>& train, const std::vector<Sample>& val,
                                                      const TrainConfig& cfg, std::int64_t height, std::int64_t width,
                                                      FitResult* result, const FitHooks& hooks) {
  TrainConfig c = cfg;
  c.pretrained_evo.reset();
  c.freeze_evo = false;
  auto model = build_model<float>(ModelConfig::defaults(ModelVariant::evo_net, height, width), cfg.seed);
  FitResult r = fit(*model, train, val, c, hooks);
  if (result) *result = std::move(r);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

json config_to_json(const ModelConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"in_rain_frames", c.in_rain_frames},
          {"out_frames", c.out_frames},
          {"aux_channels", c.aux_channels},
          {"rain_base_channels", c.rain_base_channels},
          {"aux_base_channels", c.aux_base_channels},
          {"height", c.height},
          {"width", c.width}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.in_rain_frames = j.at("in_rain_frames").get<std::int64_t>();
  c.out_frames = j.at("out_frames").get<std::int64_t>();
  c.aux_channels = j.at("aux_channels").get<std::int64_t>();
  c.rain_base_channels = j.at("rain_base_channels").get<std::int64_t>();
  c.aux_base_channels = j.at("aux_base_channels").get<std::int64_t>();
  c.height = j.at("height").get<std::int64_t>();
  c.width = j.at("width").get<std::int64_t>();
  return c;
}

struct Entry {
  std::string name;
  std::string kind;
  Shape shape;
  std::int64_t offset = 0;
  std::int64_t count = 0;
};

struct LoadedCheckpoint {
  ModelConfig config;
  std::vector<Entry> entries;
  std::vector<float> blob;
};

std::vector<std::pair<std::string, Tensor<float>*>> all_entries(Forecaster<float>& model,
                                                                std::vector<std::string>* kinds = nullptr) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (auto& [n, p] : model.named_parameters()) {
    out.emplace_back(n, &p->mutable_value());
    if (kinds) kinds->push_back("parameter");
  }
  for (auto& [n, b] : model.named_buffers()) {
    out.emplace_back(n, b);
    if (kinds) kinds->push_back("buffer");
  }
  return out;
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw CorruptData(fmt::format("{}: missing or unreadable", file.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CorruptData(fmt::format("{}: malformed JSON ({})", file.string(), e.what()));
  }
}

LoadedCheckpoint read_checkpoint(const fs::path& dir) {
  const fs::path mfile = dir / "manifest.json";
  json j = read_json(mfile);
  LoadedCheckpoint ck;
  std::uint64_t bytes = 0, expected_crc = 0;
  try {
    if (j.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
      throw CorruptData(fmt::format("{}: unsupported checkpoint version", mfile.string()));
    }
    ck.config = config_from_json(j.at("config"));
    for (const auto& e : j.at("entries")) {
      ck.entries.push_back({e.at("name").get<std::string>(), e.at("kind").get<std::string>(),
                            e.at("shape").get<Shape>(), e.at("offset").get<std::int64_t>(),
                            e.at("count").get<std::int64_t>()});
    }
    bytes = j.at("blob").at("bytes").get<std::uint64_t>();
    expected_crc = j.at("blob").at("crc32").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CorruptData(fmt::format("{}: malformed checkpoint manifest ({})", mfile.string(), e.what()));
  } catch (const ConfigError& e) {
    throw CorruptData(fmt::format("{}: {}", mfile.string(), e.what()));
  }
  const fs::path bfile = dir / "parameters.bin";
  std::ifstream in(bfile, std::ios::binary);
  if (!in) throw CorruptData(fmt::format("{}: missing or unreadable", bfile.string()));
  std::vector<unsigned char> raw(bytes);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(bytes));
  if (std::uint64_t(in.gcount()) != bytes || in.peek() != std::char_traits<char>::eof()) {
    throw CorruptData(fmt::format("{}: expected {} bytes", bfile.string(), bytes));
  }
  const auto got = std::uint64_t(crc32(crc32(0L, Z_NULL, 0), raw.data(), uInt(raw.size())));
  if (got != expected_crc) throw CorruptData(fmt::format("{}: checksum mismatch", bfile.string()));
  if (bytes % 4) throw CorruptData(fmt::format("{}: size not a multiple of 4", bfile.string()));
  ck.blob.resize(bytes / 4);
  for (std::size_t i = 0; i < ck.blob.size(); ++i) {
    const unsigned char* p = raw.data() + 4 * i;
    ck.blob[i] = std::bit_cast<float>(std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                                      std::uint32_t(p[3]) << 24);
  }
  for (const auto& e : ck.entries) {
    if (e.offset < 0 || e.count != shape_numel(e.shape) || std::size_t(e.offset + e.count) > ck.blob.size()) {
      throw CorruptData(fmt::format("{}: entry '{}' out of range", mfile.string(), e.name));
    }
  }
  return ck;
}

void copy_entry(const LoadedCheckpoint& ck, const Entry& e, Tensor<float>& dst, const fs::path& dir) {
  if (dst.shape() != e.shape) {
    throw CorruptData(fmt::format("{}: entry '{}' has shape {}, model expects {}", dir.string(), e.name,
                                  shape_string(e.shape), shape_string(dst.shape())));
  }
  std::copy(ck.blob.begin() + e.offset, ck.blob.begin() + e.offset + e.count, dst.ptr());
}

}  // namespace

void save_checkpoint(const fs::path& dir, Forecaster<float>& model, std::uint64_t seed) {
  fs::create_directories(dir);
  std::vector<std::string> kinds;
  auto entries = all_entries(model, &kinds);
  json j;
  j["format_version"] = kCheckpointVersion;
  j["config"] = config_to_json(model.config());
  j["seed"] = seed;
  j["entries"] = json::array();
  std::vector<unsigned char> raw;
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    j["entries"].push_back(
        {{"name", name}, {"kind", kinds[i]}, {"shape", t->shape()}, {"offset", offset}, {"count", t->numel()}});
    for (float x : t->data()) {
      const auto u = std::bit_cast<std::uint32_t>(x);
      for (int k = 0; k < 4; ++k) raw.push_back((u >> (8 * k)) & 0xff);
    }
    offset += t->numel();
  }
  j["blob"] = {{"file", "parameters.bin"},
               {"bytes", raw.size()},
               {"crc32", crc32(crc32(0L, Z_NULL, 0), raw.data(), uInt(raw.size()))}};
  {
    std::ofstream out(dir / "parameters.bin", std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
    if (!out) throw InvalidInput(fmt::format("cannot write {}", (dir / "parameters.bin").string()));
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << j.dump(2) << "\n";
  if (!out) throw InvalidInput(fmt::format("cannot write {}", (dir / "manifest.json").string()));
}

ModelConfig read_checkpoint_config(const fs::path& dir) {
  json j = read_json(dir / "manifest.json");
  try {
    return config_from_json(j.at("config"));
  } catch (const json::exception& e) {
    throw CorruptData(fmt::format("{}: malformed checkpoint manifest ({})", dir.string(), e.what()));
  } catch (const ConfigError& e) {
    throw CorruptData(fmt::format("{}: {}", dir.string(), e.what()));
  }
}

std::unique_ptr<Forecaster<float>> load_checkpoint(const fs::path& dir) {
  LoadedCheckpoint ck = read_checkpoint(dir);
  auto model = build_model<float>(ck.config, 0);
  auto entries = all_entries(*model);
  if (entries.size() != ck.entries.size()) {
    throw CorruptData(fmt::format("{}: {} entries, model has {}", dir.string(), ck.entries.size(), entries.size()));
  }
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : ck.entries) by_name[e.name] = &e;
  for (auto& [name, t] : entries) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CorruptData(fmt::format("{}: entry '{}' missing", dir.string(), name));
    copy_entry(ck, *it->second, *t, dir);
  }
  model->eval();
  return model;
}

LoadReport load_submodule(const fs::path& dir, Forecaster<float>& model, const std::string& prefix) {
  LoadedCheckpoint ck = read_checkpoint(dir);
  std::map<std::string, Tensor<float>*> targets;
  for (auto& [name, t] : all_entries(model)) {
    if (name.starts_with(prefix)) targets[name] = t;
  }
  LoadReport rep;
  std::map<std::string, bool> seen;
  for (const auto& e : ck.entries) {
    if (!e.name.starts_with(prefix)) continue;
    auto it = targets.find(e.name);
    if (it == targets.end()) {
      rep.unexpected.push_back(e.name);
      continue;
    }
    copy_entry(ck, e, *it->second, dir);
    seen[e.name] = true;
    ++rep.loaded;
  }
  for (const auto& [name, t] : targets) {
    if (!seen.count(name)) rep.missing.push_back(name);
  }
  return rep;
}

}  // namespace nowcast
