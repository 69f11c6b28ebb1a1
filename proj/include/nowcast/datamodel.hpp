#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nowcast {

enum class Unit {
  mm_per_h,
  kelvin,
  pascal,
  fraction_0_1,
  m_per_s,
  dimensionless,
  kg_per_m2_accumulated,
};

enum class Variable {
  rain,
  temp_300m,
  pressure_msl,
  rel_humidity_2m,
  wind_u_300m,
  wind_v_300m,
};

inline constexpr std::size_t kInputFrames = 4;
inline constexpr std::size_t kHorizon = 4;
inline constexpr std::size_t kAuxVariableCount = 5;
inline constexpr std::size_t kAuxChannels = kAuxVariableCount * kInputFrames;

// Auxiliary variables in the channel order used everywhere (variable-major, then time).
inline constexpr std::array<Variable, kAuxVariableCount> kAuxVariables = {
    Variable::temp_300m, Variable::pressure_msl, Variable::rel_humidity_2m, Variable::wind_u_300m,
    Variable::wind_v_300m};

inline constexpr std::array<Variable, 6> kAllVariables = {
    Variable::rain,          Variable::temp_300m,   Variable::pressure_msl,
    Variable::rel_humidity_2m, Variable::wind_u_300m, Variable::wind_v_300m};

std::string_view to_string(Unit unit);
std::string_view to_string(Variable variable);
Unit parse_unit(std::string_view text);
Variable parse_variable(std::string_view text);
Unit natural_unit(Variable variable);

/// Single 2D scalar field, row-major with row 0 = north.
class Grid2D {
 public:
  Grid2D() = default;
  Grid2D(std::size_t height, std::size_t width, Unit unit, float fill = 0.0f);
  Grid2D(std::size_t height, std::size_t width, Unit unit, std::vector<float> values);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  Unit unit() const { return unit_; }
  void set_unit(Unit unit) { unit_ = unit; }

  float& at(std::size_t row, std::size_t col) { return values_[row * width_ + col]; }
  float at(std::size_t row, std::size_t col) const { return values_[row * width_ + col]; }
  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }

  bool congruent(const Grid2D& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }
  bool all_finite() const;
  // Throws InvalidInput when dims are zero or a value is not finite.
  void validate() const;

  friend bool operator==(const Grid2D&, const Grid2D&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  Unit unit_ = Unit::dimensionless;
  std::vector<float> values_;
};

class FrameSequence {
 public:
  FrameSequence() = default;
  FrameSequence(Variable variable, std::vector<Grid2D> frames, double step_hours = 1.0,
                double start_hour = 0.0);

  Variable variable() const { return variable_; }
  const std::vector<Grid2D>& frames() const { return frames_; }
  std::vector<Grid2D>& frames() { return frames_; }
  std::size_t size() const { return frames_.size(); }
  const Grid2D& operator[](std::size_t i) const { return frames_[i]; }
  Grid2D& operator[](std::size_t i) { return frames_[i]; }
  double step_hours() const { return step_hours_; }
  double start_hour() const { return start_hour_; }
  std::vector<double> timestamps() const;

  std::size_t height() const { return frames_.empty() ? 0 : frames_.front().height(); }
  std::size_t width() const { return frames_.empty() ? 0 : frames_.front().width(); }
  // Checks shared dims/units and a positive step.
  void validate() const;

  friend bool operator==(const FrameSequence&, const FrameSequence&) = default;

 private:
  Variable variable_ = Variable::rain;
  std::vector<Grid2D> frames_;
  double step_hours_ = 1.0;
  double start_hour_ = 0.0;
};

struct SampleKey {
  std::uint32_t sequence_id = 0;
  std::uint32_t window_start = 0;
  friend auto operator<=>(const SampleKey&, const SampleKey&) = default;
};

struct Sample {
  SampleKey key;
  FrameSequence rain_in;
  FrameSequence rain_target;
  std::array<FrameSequence, kAuxVariableCount> aux_in;

  std::size_t height() const { return rain_in.height(); }
  std::size_t width() const { return rain_in.width(); }
  void validate() const;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct VariableStats {
  Variable variable = Variable::rain;
  double min = 0.0;
  double max = 1.0;

  static VariableStats identity(Variable variable) { return {variable, 0.0, 1.0}; }
  void validate() const;
};

struct CropRegion {
  double lat_min = 0.0;
  double lat_max = 0.0;
  double lon_min = 0.0;
  double lon_max = 0.0;
  double lat_step = 0.0;
  double lon_step = 0.0;

  std::size_t rows() const;
  std::size_t cols() const;
};

// Geographic reference of a source grid: coordinates of the north-west pixel corner.
struct GeoReference {
  double north_lat = 0.0;
  double west_lon = 0.0;
  double lat_step = 0.0;
  double lon_step = 0.0;
};

FrameSequence accumulated_to_rate(const FrameSequence& accumulated);

Grid2D crop(const Grid2D& grid, const CropRegion& region, const GeoReference& origin);

FrameSequence normalize(const FrameSequence& seq, const VariableStats& stats);
FrameSequence denormalize(const FrameSequence& seq, const VariableStats& stats);
float normalize_value(double x, const VariableStats& stats);
float denormalize_value(double x, const VariableStats& stats);

}  // namespace nowcast
