#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nowcast/datamodel.hpp"

namespace nowcast {

struct BlobParams {
  int count_min = 1;
  int count_max = 4;
  double radius_min = 4.0;     // px
  double radius_max = 10.0;    // px
  double intensity_min = 1.0;  // mm/h
  double intensity_max = 8.0;  // mm/h
  double growth_max = 0.0;     // max |relative intensity change| per step
};

struct AdvectionParams {
  double speed_min = 0.5;     // px/step
  double speed_max = 2.0;     // px/step
  double direction_min = 0.0;    // degrees, 0 = +x (east), 90 = +row (south)
  double direction_max = 360.0;  // degrees
  double rotation_max = 0.5;  // px/step at the domain edge
  double shear_max = 0.3;     // px/step at the domain edge
};

struct AuxCoupling {
  double wind_per_px = 4.0;             // m/s per px/step
  double wind_noise = 0.3;              // m/s
  double temp_base = 275.0;             // K
  double temp_per_rain = -0.4;          // K per mm/h
  double pressure_base = 101000.0;      // Pa
  double pressure_per_rain = -25.0;     // Pa per mm/h
  double humidity_base = 0.6;
  double humidity_per_rain = 0.04;      // per mm/h
  double field_amplitude = 1.0;         // amplitude of smooth background variation (relative)
};

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t n_sequences = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t frames_per_sequence = 16;
  BlobParams blobs;
  AdvectionParams advection;
  AuxCoupling coupling;

  void validate() const;
};

struct RawSequence {
  std::uint32_t id = 0;
  FrameSequence rain;
  std::array<FrameSequence, kAuxVariableCount> aux;
};

/// Gaussian rain blobs carried by a smooth per-sequence velocity field, plus coupled aux fields.
std::vector<RawSequence> synth_generate(const SyntheticConfig& cfg);

struct SampleSet {
  std::vector<Sample> samples;
  std::size_t skipped_sequences = 0;
};

SampleSet make_samples(const std::vector<RawSequence>& sequences, std::size_t window = kInputFrames,
                       std::size_t horizon = kHorizon);

struct FilterRule {
  double pixel_threshold = 0.1;  // mm/h, strict >
  double min_fraction = 0.2;     // of first-input-frame pixels, >=
  void validate() const;
};

struct FilterResult {
  std::vector<Sample> kept;
  std::size_t total = 0;
  std::size_t retained = 0;
  double retention() const { return total == 0 ? 0.0 : double(retained) / double(total); }
};

bool passes_filter(const Sample& sample, const FilterRule& rule);
FilterResult apply_sample_filter(std::vector<Sample> samples, const FilterRule& rule);

struct SplitResult {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::size_t dropped = 0;  // windows straddling the split point
};

double sample_start_hour(const Sample& s);
double sample_end_hour(const Sample& s);

/// Samples starting at or after `split_hour` go to test; samples ending before it go to train;
/// windows straddling the boundary are dropped.
SplitResult split_train_test(std::vector<Sample> samples, double split_hour);

/// Per-variable min/max over every frame of the given samples (rel. humidity gets identity stats).
std::array<VariableStats, 6> compute_stats(const std::vector<Sample>& samples);
Sample normalize_sample(const Sample& s, const std::array<VariableStats, 6>& stats);
const VariableStats& stats_for(const std::array<VariableStats, 6>& stats, Variable v);

inline constexpr std::uint32_t kFormatVersion = 1;

struct DatasetManifest {
  std::uint32_t format_version = kFormatVersion;
  std::string stage = "raw";  // raw | normalized
  std::uint64_t seed = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  double step_hours = 1.0;
  double sequence_stride_hours = 0.0;
  std::map<std::string, std::uint64_t> counts;
  std::vector<Variable> variables{kAllVariables.begin(), kAllVariables.end()};
  bool has_stats = false;
  std::array<VariableStats, 6> stats{};
  FilterRule filter;
  std::uint64_t filter_total = 0;
  std::uint64_t filter_retained = 0;

  bool normalized() const { return stage == "normalized"; }
};

struct Dataset {
  DatasetManifest manifest;
  std::map<std::string, std::vector<Sample>> splits;
  const std::vector<Sample>& split(const std::string& name) const;
};

/// Writes manifest.json and one `<split>.nwc` record file per split, records sorted by key.
void write_dataset(const std::filesystem::path& dir, Dataset dataset);
Dataset read_dataset(const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<Sample> read_split(const std::filesystem::path& dir, const DatasetManifest& manifest,
                               const std::string& split);

}  // namespace nowcast
