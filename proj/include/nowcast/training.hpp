#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/models.hpp"

namespace nowcast {

struct TrainConfig {
  double lr_init = 1e-3;
  double plateau_factor = 0.1;
  int plateau_patience = 5;
  int early_stop_patience = 15;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> pretrained_evo;
  bool freeze_evo = false;
  double improve_eps = 0.0;

  void validate() const;
};

/// Reduce-on-plateau: after `patience` consecutive epochs without a strict improvement
/// over the best validation loss, lr is multiplied by `factor` and the counter restarts.
struct PlateauScheduler {
  double lr = 1e-3;
  double factor = 0.1;
  int patience = 5;
  double improve_eps = 0.0;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  static PlateauScheduler from(const TrainConfig& cfg);
  /// Returns true when this call reduced the learning rate.
  bool step(double val_loss);
};

struct EarlyStopState {
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
  bool stopped = false;
  int patience = 15;
  double improve_eps = 0.0;

  /// Returns true when val_loss is a new best.
  bool update(double val_loss);
};

template <std::floating_point T>
class Adam {
 public:
  Adam(std::vector<Var<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Var<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  void write_csv(const std::filesystem::path& file) const;
};

struct FitResult {
  TrainHistory history;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  bool stopped_by_hook = false;
};

struct FitHooks {
  /// Called after each epoch with the live (not yet restored) model; returning true ends training.
  std::function<bool(const EpochRecord&, Forecaster<float>&)> on_epoch;
};

/// Mean squared error over batch, steps and pixels.
double mse(const Tensor<float>& pred, const Tensor<float>& target);
double mse_loss(const Forecast& pred, const std::vector<Grid2D>& target);

/// Eval-mode MSE of the model over the samples (normalized units).
double dataset_mse(Forecaster<float>& model, const std::vector<Sample>& samples, std::size_t batch_size = 16);

/// Mini-batch training with validation-driven lr schedule and early stopping. The best-validation
/// parameters are restored into `model` on return. Non-finite loss restores them and throws Divergence.
FitResult fit(Forecaster<float>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitHooks& hooks = {});

/// Trains a fresh evo_net forecaster on the rain frames of the samples.
std::unique_ptr<Forecaster<float>> pretrain_evolution(const std::vector<Sample>& train, const std::vector<Sample>& val,
                                                      const TrainConfig& cfg, std::int64_t height, std::int64_t width,
                                                      FitResult* result = nullptr, const FitHooks& hooks = {});

// Checkpoint: directory with manifest.json (config, entry names/shapes/offsets, CRC32) and
// parameters.bin (little-endian float32, parameters then buffers in registration order).
void save_checkpoint(const std::filesystem::path& dir, Forecaster<float>& model, std::uint64_t seed = 0);
std::unique_ptr<Forecaster<float>> load_checkpoint(const std::filesystem::path& dir);
ModelConfig read_checkpoint_config(const std::filesystem::path& dir);

struct LoadReport {
  std::size_t loaded = 0;
  std::vector<std::string> missing;     // model entries absent from the checkpoint
  std::vector<std::string> unexpected;  // checkpoint entries without a model counterpart
};

/// Copies every checkpoint entry under `prefix` into the identically named model entry.
LoadReport load_submodule(const std::filesystem::path& dir, Forecaster<float>& model, const std::string& prefix);

}  // namespace nowcast
