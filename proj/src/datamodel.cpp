#include "nowcast/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "nowcast/error.hpp"

namespace nowcast {

namespace {

constexpr std::array<std::pair<Unit, std::string_view>, 7> kUnitNames = {{
    {Unit::mm_per_h, "mm_per_h"},
    {Unit::kelvin, "kelvin"},
    {Unit::pascal, "pascal"},
    {Unit::fraction_0_1, "fraction_0_1"},
    {Unit::m_per_s, "m_per_s"},
    {Unit::dimensionless, "dimensionless"},
    {Unit::kg_per_m2_accumulated, "kg_per_m2_accumulated"},
}};

constexpr std::array<std::pair<Variable, std::string_view>, 6> kVariableNames = {{
    {Variable::rain, "rain"},
    {Variable::temp_300m, "temp_300m"},
    {Variable::pressure_msl, "pressure_msl"},
    {Variable::rel_humidity_2m, "rel_humidity_2m"},
    {Variable::wind_u_300m, "wind_u_300m"},
    {Variable::wind_v_300m, "wind_v_300m"},
}};

// 1 kg of water per m^2 is a 1 mm column at 1000 kg/m^3.
constexpr float kKgPerM2ToMm = 1.0f;

}  // namespace

std::string_view to_string(Unit unit) {
  for (const auto& [u, name] : kUnitNames) {
    if (u == unit) return name;
  }
  return "unknown";
}

std::string_view to_string(Variable variable) {
  for (const auto& [v, name] : kVariableNames) {
    if (v == variable) return name;
  }
  return "unknown";
}

Unit parse_unit(std::string_view text) {
  for (const auto& [u, name] : kUnitNames) {
    if (name == text) return u;
  }
  throw InvalidInput(fmt::format("unknown unit '{}'", text));
}

Variable parse_variable(std::string_view text) {
  for (const auto& [v, name] : kVariableNames) {
    if (name == text) return v;
  }
  throw InvalidInput(fmt::format("unknown variable '{}'", text));
}

Unit natural_unit(Variable variable) {
  switch (variable) {
    case Variable::rain: return Unit::mm_per_h;
    case Variable::temp_300m: return Unit::kelvin;
    case Variable::pressure_msl: return Unit::pascal;
    case Variable::rel_humidity_2m: return Unit::fraction_0_1;
    case Variable::wind_u_300m:
    case Variable::wind_v_300m: return Unit::m_per_s;
  }
  return Unit::dimensionless;
}

Grid2D::Grid2D(std::size_t height, std::size_t width, Unit unit, float fill)
    : height_(height), width_(width), unit_(unit), values_(height * width, fill) {}

Grid2D::Grid2D(std::size_t height, std::size_t width, Unit unit, std::vector<float> values)
    : height_(height), width_(width), unit_(unit), values_(std::move(values)) {
  if (values_.size() != height_ * width_) {
    throw ShapeError(fmt::format("grid {}x{} needs {} values, got {}", height_, width_,
                                 height_ * width_, values_.size()));
  }
}

bool Grid2D::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

void Grid2D::validate() const {
  if (height_ == 0 || width_ == 0) throw InvalidInput("grid has zero extent");
  if (!all_finite()) throw InvalidInput("grid contains non-finite values");
}

FrameSequence::FrameSequence(Variable variable, std::vector<Grid2D> frames, double step_hours,
                             double start_hour)
    : variable_(variable),
      frames_(std::move(frames)),
      step_hours_(step_hours),
      start_hour_(start_hour) {}

std::vector<double> FrameSequence::timestamps() const {
  std::vector<double> out(frames_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = start_hour_ + step_hours_ * double(i);
  return out;
}

void FrameSequence::validate() const {
  if (!(step_hours_ > 0.0)) throw InvalidInput("frame step must be positive");
  for (const auto& f : frames_) {
    if (!f.congruent(frames_.front()) || f.unit() != frames_.front().unit()) {
      throw ShapeError(fmt::format("sequence '{}' mixes frame shapes or units", to_string(variable_)));
    }
  }
}

void Sample::validate() const {
  if (rain_in.size() != kInputFrames || rain_target.size() != kHorizon) {
    throw ShapeError(fmt::format("sample needs {} input and {} target rain frames, got {} and {}",
                                 kInputFrames, kHorizon, rain_in.size(), rain_target.size()));
  }
  rain_in.validate();
  rain_target.validate();
  const Grid2D& ref = rain_in[0];
  auto check = [&](const FrameSequence& s) {
    for (const auto& f : s.frames()) {
      if (!f.congruent(ref)) throw ShapeError("sample sequences are not spatially congruent");
    }
  };
  check(rain_target);
  for (std::size_t v = 0; v < kAuxVariableCount; ++v) {
    const auto& aux = aux_in[v];
    if (aux.variable() != kAuxVariables[v]) {
      throw InvalidInput(fmt::format("aux slot {} holds '{}', expected '{}'", v,
                                     to_string(aux.variable()), to_string(kAuxVariables[v])));
    }
    if (aux.size() != kInputFrames) {
      throw ShapeError(fmt::format("aux '{}' has {} frames, expected {}", to_string(aux.variable()),
                                   aux.size(), kInputFrames));
    }
    aux.validate();
    check(aux);
  }
}

void VariableStats::validate() const {
  if (!std::isfinite(min) || !std::isfinite(max)) {
    throw DegenerateStats(fmt::format("non-finite stats for '{}'", to_string(variable)));
  }
  if (!(max > min)) {
    throw DegenerateStats(
        fmt::format("stats for '{}' are degenerate (min {} max {})", to_string(variable), min, max));
  }
}

std::size_t CropRegion::rows() const {
  return static_cast<std::size_t>(std::llround((lat_max - lat_min) / lat_step)) + 1;
}

std::size_t CropRegion::cols() const {
  return static_cast<std::size_t>(std::llround((lon_max - lon_min) / lon_step)) + 1;
}

FrameSequence accumulated_to_rate(const FrameSequence& accumulated) {
  const auto& acc = accumulated.frames();
  if (acc.size() < 2) {
    throw InvalidInput(fmt::format("accumulated series needs at least 2 frames, got {}", acc.size()));
  }
  accumulated.validate();
  std::vector<Grid2D> out;
  out.reserve(acc.size() - 1);
  for (std::size_t i = 0; i + 1 < acc.size(); ++i) {
    Grid2D rate(acc[i].height(), acc[i].width(), Unit::mm_per_h);
    auto prev = acc[i].values();
    auto next = acc[i + 1].values();
    auto dst = rate.values();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = std::max(0.0f, (next[k] - prev[k]) * kKgPerM2ToMm);
    }
    out.push_back(std::move(rate));
  }
  return FrameSequence(accumulated.variable(), std::move(out), accumulated.step_hours(),
                       accumulated.start_hour() + accumulated.step_hours());
}

Grid2D crop(const Grid2D& grid, const CropRegion& region, const GeoReference& origin) {
  if (!(region.lat_max > region.lat_min) || !(region.lon_max > region.lon_min)) {
    throw InvalidInput("crop region must have lat_max > lat_min and lon_max > lon_min");
  }
  if (!(region.lat_step > 0.0) || !(region.lon_step > 0.0)) {
    throw InvalidInput("crop region steps must be positive");
  }
  // Bounds are pixel-centre coordinates, inclusive on both ends.
  const auto rows = static_cast<long long>(region.rows());
  const auto cols = static_cast<long long>(region.cols());
  const long long row0 = std::llround((origin.north_lat - region.lat_max) / origin.lat_step);
  const long long col0 = std::llround((region.lon_min - origin.west_lon) / origin.lon_step);
  const auto h = static_cast<long long>(grid.height());
  const auto w = static_cast<long long>(grid.width());
  if (row0 < 0) throw OutOfBounds(fmt::format("crop north edge {} lies outside the grid", region.lat_max));
  if (row0 + rows > h) {
    throw OutOfBounds(fmt::format("crop south edge {} lies outside the grid", region.lat_min));
  }
  if (col0 < 0) throw OutOfBounds(fmt::format("crop west edge {} lies outside the grid", region.lon_min));
  if (col0 + cols > w) {
    throw OutOfBounds(fmt::format("crop east edge {} lies outside the grid", region.lon_max));
  }
  Grid2D out(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), grid.unit());
  for (long long r = 0; r < rows; ++r) {
    for (long long c = 0; c < cols; ++c) {
      out.at(r, c) = grid.at(row0 + r, col0 + c);
    }
  }
  return out;
}

float normalize_value(double x, const VariableStats& stats) {
  if (stats.variable == Variable::rel_humidity_2m) return static_cast<float>(x);
  return static_cast<float>((x - stats.min) / (stats.max - stats.min));
}

float denormalize_value(double x, const VariableStats& stats) {
  if (stats.variable == Variable::rel_humidity_2m) return static_cast<float>(x);
  return static_cast<float>(x * (stats.max - stats.min) + stats.min);
}

FrameSequence normalize(const FrameSequence& seq, const VariableStats& stats) {
  if (stats.variable != seq.variable()) {
    throw InvalidInput(fmt::format("stats for '{}' applied to '{}'", to_string(stats.variable),
                                   to_string(seq.variable())));
  }
  stats.validate();
  std::vector<Grid2D> frames;
  frames.reserve(seq.size());
  for (const auto& f : seq.frames()) {
    Grid2D g(f.height(), f.width(), Unit::dimensionless);
    auto src = f.values();
    auto dst = g.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = normalize_value(src[k], stats);
    frames.push_back(std::move(g));
  }
  return FrameSequence(seq.variable(), std::move(frames), seq.step_hours(), seq.start_hour());
}

FrameSequence denormalize(const FrameSequence& seq, const VariableStats& stats) {
  if (stats.variable != seq.variable()) {
    throw InvalidInput(fmt::format("stats for '{}' applied to '{}'", to_string(stats.variable),
                                   to_string(seq.variable())));
  }
  stats.validate();
  std::vector<Grid2D> frames;
  frames.reserve(seq.size());
  for (const auto& f : seq.frames()) {
    Grid2D g(f.height(), f.width(), natural_unit(seq.variable()));
    auto src = f.values();
    auto dst = g.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = denormalize_value(src[k], stats);
    frames.push_back(std::move(g));
  }
  return FrameSequence(seq.variable(), std::move(frames), seq.step_hours(), seq.start_hour());
}

}  // namespace nowcast
