#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nowcast/models.hpp"

namespace nowcast {

inline constexpr double kDefaultThreshold = 0.5;  // mm/h

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct ClassificationMetrics {
  double acc = 0, prec = 0, rec = 0, f1 = 0, csi = 0, mcc = 0;
};

/// Compensated (Neumaier) running sum; merge is exact up to the compensation term.
class NeumaierSum {
 public:
  void add(double x);
  void merge(const NeumaierSum& other);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0, comp_ = 0.0;
};

/// 1 where value > threshold (strict), else 0.
std::vector<std::uint8_t> binarize(std::span<const float> values, double threshold);
std::vector<std::uint8_t> binarize(const Grid2D& grid, double threshold);

void accumulate_confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                          ConfusionCounts& counts);

/// ACC, PREC, REC, F1, CSI, MCC; undefined ratios return 0.
ClassificationMetrics classification_metrics(const ConfusionCounts& counts);

struct MseReport {
  double total = 0.0;
  std::vector<double> per_step;
};

/// preds[sample][step] vs targets[sample][step].
MseReport mse_report(const std::vector<std::vector<Grid2D>>& preds, const std::vector<std::vector<Grid2D>>& targets);

struct MetricReport {
  std::string model;
  std::uint64_t samples = 0;
  double mse_total = 0.0;
  std::vector<double> mse_per_step;
  double mse_total_mm = 0.0;  // mm^2/h^2
  std::vector<double> mse_per_step_mm;
  double threshold = kDefaultThreshold;
  ClassificationMetrics metrics;
  ConfusionCounts counts;
};

/// Streaming scorer. Frames arrive in normalized units; thresholds apply after denormalizing
/// with the training rain stats.
class Evaluator {
 public:
  Evaluator(VariableStats rain_stats, double threshold, std::size_t steps = kHorizon);
  /// pred/target are (B,steps,H,W) in normalized units.
  void add(const Tensor<float>& pred, const Tensor<float>& target);
  void merge(const Evaluator& other);
  MetricReport report(const std::string& model) const;

 private:
  VariableStats stats_;
  double threshold_;
  std::vector<NeumaierSum> sse_, sse_mm_;
  std::vector<std::uint64_t> count_;
  ConfusionCounts counts_;
  std::uint64_t samples_ = 0;
};

MetricReport evaluate_model(Forecaster<float>& model, const std::vector<Sample>& samples,
                            const VariableStats& rain_stats, double threshold = kDefaultThreshold,
                            std::size_t batch_size = 16);

std::string to_json_string(const MetricReport& r);
MetricReport metric_report_from_json(const std::string& text);

void write_metrics_json(const std::filesystem::path& file, const MetricReport& r);
MetricReport read_metrics_json(const std::filesystem::path& file);
void write_per_step_csv(const std::filesystem::path& file, const MetricReport& r);

/// Line plot of MSE against lead time, one series per report.
std::string mse_per_step_svg(const std::vector<MetricReport>& reports);
void write_mse_svg(const std::filesystem::path& file, const std::vector<MetricReport>& reports);

/// Markdown table, rows = models, columns = MSE and the six metrics; best bold, second underlined.
std::string comparison_table(const std::vector<MetricReport>& reports);

}  // namespace nowcast
