#include "nowcast/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include <fmt/format.h>
#include <json.hpp>
#include <zlib.h>

#include "nowcast/error.hpp"

namespace nowcast {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Rng = std::mt19937_64;

void SyntheticConfig::validate() const {
  if (height < 1 || width < 1) throw ConfigError("synthetic grid must be at least 1x1");
  if (frames_per_sequence < kInputFrames + kHorizon) {
    throw ConfigError(fmt::format("frames_per_sequence must be >= {}", kInputFrames + kHorizon));
  }
  if (blobs.count_min < 0 || blobs.count_max < blobs.count_min) throw ConfigError("bad blob count range");
  if (!(blobs.radius_min > 0.0) || blobs.radius_max < blobs.radius_min) throw ConfigError("bad blob radius range");
  if (blobs.intensity_min < 0.0 || blobs.intensity_max < blobs.intensity_min) {
    throw ConfigError("bad blob intensity range");
  }
  if (blobs.growth_max < 0.0 || blobs.growth_max >= 1.0) throw ConfigError("growth_max must lie in [0,1)");
  if (advection.speed_min < 0.0 || advection.speed_max < advection.speed_min) {
    throw ConfigError("bad advection speed range");
  }
  if (advection.direction_max < advection.direction_min) throw ConfigError("bad advection direction range");
  const double extent = 0.5 * double(std::max(height, width));
  if (advection.speed_max + advection.rotation_max + advection.shear_max > extent) {
    throw ConfigError("advection speeds exceed half the domain per step");
  }
}

namespace {

double uniform(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Flow {
  double u0, v0, rotation, shear, cx, cy, scale;
  // Velocity in px/step at (x = column, y = row).
  std::pair<double, double> at(double x, double y) const {
    const double dx = (x - cx) / scale, dy = (y - cy) / scale;
    return {u0 - rotation * dy + shear * dy, v0 + rotation * dx};
  }
};

struct Blob {
  double x, y, radius, intensity, growth;
};

RawSequence generate_sequence(const SyntheticConfig& cfg, std::uint32_t id) {
  std::seed_seq seq{std::uint32_t(cfg.seed), std::uint32_t(cfg.seed >> 32), id};
  Rng rng(seq);
  const auto H = cfg.height, W = cfg.width;
  const auto L = cfg.frames_per_sequence;
  const auto& ap = cfg.advection;
  const auto& cp = cfg.coupling;

  const double speed = uniform(rng, ap.speed_min, ap.speed_max);
  const double dir = uniform(rng, ap.direction_min, ap.direction_max) * std::numbers::pi / 180.0;
  Flow flow{speed * std::cos(dir), speed * std::sin(dir), uniform(rng, -ap.rotation_max, ap.rotation_max),
            uniform(rng, -ap.shear_max, ap.shear_max), 0.5 * double(W - 1), 0.5 * double(H - 1),
            0.5 * double(std::max(H, W))};

  const int n_blobs = std::uniform_int_distribution<int>(cfg.blobs.count_min, cfg.blobs.count_max)(rng);
  std::vector<Blob> blobs;
  for (int b = 0; b < n_blobs; ++b) {
    blobs.push_back({uniform(rng, 0.0, double(W - 1)), uniform(rng, 0.0, double(H - 1)),
                     uniform(rng, cfg.blobs.radius_min, cfg.blobs.radius_max),
                     uniform(rng, cfg.blobs.intensity_min, cfg.blobs.intensity_max),
                     uniform(rng, -cfg.blobs.growth_max, cfg.blobs.growth_max)});
  }
  const double kx = uniform(rng, 0.5, 1.5) * 2.0 * std::numbers::pi / double(W);
  const double ky = uniform(rng, 0.5, 1.5) * 2.0 * std::numbers::pi / double(H);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);

  RawSequence out;
  out.id = id;
  const double start = double(id) * double(L);
  std::vector<Grid2D> rain;
  std::array<std::vector<Grid2D>, kAuxVariableCount> aux;
  for (std::size_t t = 0; t < L; ++t) {
    Grid2D r(H, W, Unit::mm_per_h);
    for (const auto& b : blobs) {
      const double inv = 1.0 / (2.0 * b.radius * b.radius);
      const double reach = 4.0 * b.radius;
      const auto y0 = std::size_t(std::clamp(std::floor(b.y - reach), 0.0, double(H)));
      const auto y1 = std::size_t(std::clamp(std::ceil(b.y + reach) + 1.0, 0.0, double(H)));
      const auto x0 = std::size_t(std::clamp(std::floor(b.x - reach), 0.0, double(W)));
      const auto x1 = std::size_t(std::clamp(std::ceil(b.x + reach) + 1.0, 0.0, double(W)));
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          const double d2 = (double(x) - b.x) * (double(x) - b.x) + (double(y) - b.y) * (double(y) - b.y);
          r.at(y, x) += float(b.intensity * std::exp(-d2 * inv));
        }
      }
    }
    // Background pattern drifts with the mean flow.
    const double sx = flow.u0 * double(t), sy = flow.v0 * double(t);
    Grid2D temp(H, W, Unit::kelvin), pres(H, W, Unit::pascal), hum(H, W, Unit::fraction_0_1);
    Grid2D wu(H, W, Unit::m_per_s), wv(H, W, Unit::m_per_s);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double bg =
            cp.field_amplitude * std::sin(kx * (double(x) - sx) + ky * (double(y) - sy) + phase);
        const double rr = r.at(y, x);
        temp.at(y, x) = float(cp.temp_base + 2.0 * bg + cp.temp_per_rain * rr);
        pres.at(y, x) = float(cp.pressure_base + 200.0 * bg + cp.pressure_per_rain * rr);
        hum.at(y, x) = float(std::clamp(cp.humidity_base + 0.1 * bg + cp.humidity_per_rain * rr, 0.0, 1.0));
        const auto [u, v] = flow.at(double(x), double(y));
        wu.at(y, x) = float(u * cp.wind_per_px + cp.wind_noise * noise(rng));
        wv.at(y, x) = float(v * cp.wind_per_px + cp.wind_noise * noise(rng));
      }
    }
    rain.push_back(std::move(r));
    aux[0].push_back(std::move(temp));
    aux[1].push_back(std::move(pres));
    aux[2].push_back(std::move(hum));
    aux[3].push_back(std::move(wu));
    aux[4].push_back(std::move(wv));
    // Midpoint step of each blob centre through the flow.
    for (auto& b : blobs) {
      const auto [u1, v1] = flow.at(b.x, b.y);
      const auto [u2, v2] = flow.at(b.x + 0.5 * u1, b.y + 0.5 * v1);
      b.x += u2;
      b.y += v2;
      b.intensity *= 1.0 + b.growth;
    }
  }
  out.rain = FrameSequence(Variable::rain, std::move(rain), 1.0, start);
  for (std::size_t v = 0; v < kAuxVariableCount; ++v) {
    out.aux[v] = FrameSequence(kAuxVariables[v], std::move(aux[v]), 1.0, start);
  }
  return out;
}

FrameSequence sub_sequence(const FrameSequence& s, std::size_t begin, std::size_t count) {
  std::vector<Grid2D> frames(s.frames().begin() + std::ptrdiff_t(begin),
                             s.frames().begin() + std::ptrdiff_t(begin + count));
  return FrameSequence(s.variable(), std::move(frames), s.step_hours(),
                       s.start_hour() + s.step_hours() * double(begin));
}

}  // namespace

std::vector<RawSequence> synth_generate(const SyntheticConfig& cfg) {
  cfg.validate();
  std::vector<RawSequence> out(cfg.n_sequences);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < cfg.n_sequences; ++i) out[i] = generate_sequence(cfg, std::uint32_t(i));
  return out;
}

SampleSet make_samples(const std::vector<RawSequence>& sequences, std::size_t window, std::size_t horizon) {
  if (window != kInputFrames || horizon != kHorizon) {
    throw ConfigError(fmt::format("samples use {} input and {} target frames", kInputFrames, kHorizon));
  }
  SampleSet out;
  for (const auto& seq : sequences) {
    const std::size_t n = seq.rain.size();
    if (n < window + horizon) {
      ++out.skipped_sequences;
      continue;
    }
    for (std::size_t s = 0; s + window + horizon <= n; ++s) {
      Sample smp;
      smp.key = {seq.id, std::uint32_t(s)};
      smp.rain_in = sub_sequence(seq.rain, s, window);
      smp.rain_target = sub_sequence(seq.rain, s + window, horizon);
      for (std::size_t v = 0; v < kAuxVariableCount; ++v) smp.aux_in[v] = sub_sequence(seq.aux[v], s, window);
      out.samples.push_back(std::move(smp));
    }
  }
  return out;
}

void FilterRule::validate() const {
  if (!(pixel_threshold > 0.0)) throw ConfigError("filter pixel threshold must be > 0");
  if (!(min_fraction > 0.0) || min_fraction > 1.0) throw ConfigError("filter fraction must lie in (0,1]");
}

bool passes_filter(const Sample& sample, const FilterRule& rule) {
  const auto v = sample.rain_in[0].values();
  if (v.empty()) return false;
  std::size_t wet = 0;
  const auto thr = static_cast<float>(rule.pixel_threshold);
  for (float x : v) wet += x > thr;
  // Tolerance absorbs the binary rounding of fractions like 0.2.
  return double(wet) >= rule.min_fraction * double(v.size()) - 1e-9 * double(v.size());
}

FilterResult apply_sample_filter(std::vector<Sample> samples, const FilterRule& rule) {
  rule.validate();
  FilterResult out;
  out.total = samples.size();
  for (auto& s : samples) {
    if (passes_filter(s, rule)) out.kept.push_back(std::move(s));
  }
  out.retained = out.kept.size();
  return out;
}

double sample_start_hour(const Sample& s) { return s.rain_in.start_hour(); }
double sample_end_hour(const Sample& s) {
  return s.rain_target.start_hour() + s.rain_target.step_hours() * double(s.rain_target.size() - 1);
}

SplitResult split_train_test(std::vector<Sample> samples, double split_hour) {
  if (!std::isfinite(split_hour)) throw InvalidInput("split point must be finite");
  if (!samples.empty()) {
    double last = sample_start_hour(samples.front());
    for (const auto& s : samples) last = std::max(last, sample_start_hour(s));
    if (split_hour > last) {
      throw InvalidInput(fmt::format("split point {} lies after the last sample start {}", split_hour, last));
    }
  }
  SplitResult out;
  for (auto& s : samples) {
    if (sample_start_hour(s) >= split_hour) {
      out.test.push_back(std::move(s));
    } else if (sample_end_hour(s) < split_hour) {
      out.train.push_back(std::move(s));
    } else {
      ++out.dropped;
    }
  }
  return out;
}

const VariableStats& stats_for(const std::array<VariableStats, 6>& stats, Variable v) {
  for (const auto& s : stats) {
    if (s.variable == v) return s;
  }
  throw InvalidInput(fmt::format("no stats for '{}'", to_string(v)));
}

std::array<VariableStats, 6> compute_stats(const std::vector<Sample>& samples) {
  std::array<double, 6> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  auto scan = [&](std::size_t k, const FrameSequence& seq) {
    for (const auto& f : seq.frames()) {
      for (float x : f.values()) {
        lo[k] = std::min(lo[k], double(x));
        hi[k] = std::max(hi[k], double(x));
      }
    }
  };
  for (const auto& s : samples) {
    scan(0, s.rain_in);
    scan(0, s.rain_target);
    for (std::size_t v = 0; v < kAuxVariableCount; ++v) scan(v + 1, s.aux_in[v]);
  }
  std::array<VariableStats, 6> out;
  for (std::size_t k = 0; k < 6; ++k) {
    out[k] = {kAllVariables[k], lo[k], hi[k]};
    if (kAllVariables[k] == Variable::rel_humidity_2m) out[k] = VariableStats::identity(kAllVariables[k]);
  }
  return out;
}

Sample normalize_sample(const Sample& s, const std::array<VariableStats, 6>& stats) {
  Sample out;
  out.key = s.key;
  const auto& rs = stats_for(stats, Variable::rain);
  out.rain_in = normalize(s.rain_in, rs);
  out.rain_target = normalize(s.rain_target, rs);
  for (std::size_t v = 0; v < kAuxVariableCount; ++v) {
    out.aux_in[v] = normalize(s.aux_in[v], stats_for(stats, kAuxVariables[v]));
  }
  return out;
}

const std::vector<Sample>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw InvalidInput(fmt::format("dataset has no '{}' split", name));
  return it->second;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

constexpr char kMagic[4] = {'N', 'W', 'C', '1'};
constexpr std::size_t kFileHeader = 16;
constexpr std::size_t kRecordHeader = 12;
constexpr std::size_t kFramesPerRecord = kInputFrames + kHorizon + kAuxChannels;

void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back(v >> 8);
}
void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
std::uint16_t get_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }
std::uint64_t get_u64(const unsigned char* p) {
  return std::uint64_t(get_u32(p)) | std::uint64_t(get_u32(p + 4)) << 32;
}

void put_frames(std::vector<unsigned char>& b, const FrameSequence& seq) {
  for (const auto& f : seq.frames()) {
    for (float x : f.values()) put_u32(b, std::bit_cast<std::uint32_t>(x));
  }
}

std::uint32_t crc(const unsigned char* p, std::size_t n) {
  return std::uint32_t(crc32(crc32(0L, Z_NULL, 0), p, uInt(n)));
}

std::string split_file(const std::string& split) { return split + ".nwc"; }

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["stage"] = m.stage;
  j["seed"] = m.seed;
  j["height"] = m.height;
  j["width"] = m.width;
  j["step_hours"] = m.step_hours;
  j["sequence_stride_hours"] = m.sequence_stride_hours;
  j["counts"] = m.counts;
  j["variables"] = json::array();
  for (auto v : m.variables) j["variables"].push_back(std::string(to_string(v)));
  if (m.has_stats) {
    for (const auto& s : m.stats) j["stats"][std::string(to_string(s.variable))] = {{"min", s.min}, {"max", s.max}};
  }
  j["filter"] = {{"pixel_threshold", m.filter.pixel_threshold},
                 {"min_fraction", m.filter.min_fraction},
                 {"total", m.filter_total},
                 {"retained", m.filter_retained},
                 {"retention", m.filter_total ? double(m.filter_retained) / double(m.filter_total) : 0.0}};
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<std::uint32_t>();
  m.stage = j.at("stage").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.height = j.at("height").get<std::size_t>();
  m.width = j.at("width").get<std::size_t>();
  m.step_hours = j.at("step_hours").get<double>();
  m.sequence_stride_hours = j.at("sequence_stride_hours").get<double>();
  m.counts = j.at("counts").get<std::map<std::string, std::uint64_t>>();
  m.variables.clear();
  for (const auto& v : j.at("variables")) m.variables.push_back(parse_variable(v.get<std::string>()));
  if (j.contains("stats")) {
    m.has_stats = true;
    for (std::size_t k = 0; k < 6; ++k) {
      const auto& e = j.at("stats").at(std::string(to_string(kAllVariables[k])));
      m.stats[k] = {kAllVariables[k], e.at("min").get<double>(), e.at("max").get<double>()};
    }
  }
  const auto& f = j.at("filter");
  m.filter.pixel_threshold = f.at("pixel_threshold").get<double>();
  m.filter.min_fraction = f.at("min_fraction").get<double>();
  m.filter_total = f.at("total").get<std::uint64_t>();
  m.filter_retained = f.at("retained").get<std::uint64_t>();
  return m;
}

void write_split(const fs::path& file, std::vector<Sample>& samples, const DatasetManifest& m) {
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.key < b.key; });
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput(fmt::format("cannot write {}", file.string()));
  std::vector<unsigned char> buf(kMagic, kMagic + 4);
  put_u32(buf, m.format_version);
  put_u64(buf, samples.size());
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  for (const auto& s : samples) {
    s.validate();
    if (s.height() != m.height || s.width() != m.width) {
      throw ShapeError(fmt::format("sample {}x{} does not match dataset {}x{}", s.height(), s.width(), m.height,
                                   m.width));
    }
    if (s.height() > 0xffff || s.width() > 0xffff) throw ShapeError("grid too large for the record format");
    buf.clear();
    put_u32(buf, s.key.sequence_id);
    put_u32(buf, s.key.window_start);
    put_u16(buf, std::uint16_t(s.height()));
    put_u16(buf, std::uint16_t(s.width()));
    put_frames(buf, s.rain_in);
    put_frames(buf, s.rain_target);
    for (const auto& a : s.aux_in) put_frames(buf, a);
    put_u32(buf, crc(buf.data(), buf.size()));
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  }
  if (!out) throw InvalidInput(fmt::format("write failed for {}", file.string()));
}

FrameSequence read_frames(const unsigned char*& p, Variable var, std::size_t count, std::size_t h, std::size_t w,
                          Unit unit, double step, double start) {
  std::vector<Grid2D> frames;
  for (std::size_t f = 0; f < count; ++f) {
    std::vector<float> values(h * w);
    for (auto& x : values) {
      x = std::bit_cast<float>(get_u32(p));
      p += 4;
    }
    frames.emplace_back(h, w, unit, std::move(values));
  }
  return FrameSequence(var, std::move(frames), step, start);
}

}  // namespace

void write_dataset(const fs::path& dir, Dataset dataset) {
  fs::create_directories(dir);
  auto& m = dataset.manifest;
  m.counts.clear();
  for (auto& [name, samples] : dataset.splits) {
    write_split(dir / split_file(name), samples, m);
    m.counts[name] = samples.size();
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest_to_json(m).dump(2) << "\n";
  if (!out) throw InvalidInput(fmt::format("cannot write {}", (dir / "manifest.json").string()));
}

DatasetManifest read_manifest(const fs::path& dir) {
  const fs::path file = dir / "manifest.json";
  std::ifstream in(file);
  if (!in) throw CorruptData(fmt::format("{}: missing or unreadable", file.string()));
  try {
    DatasetManifest m = manifest_from_json(json::parse(in));
    if (m.format_version != kFormatVersion) {
      throw CorruptData(fmt::format("{}: unsupported format version {}", file.string(), m.format_version));
    }
    return m;
  } catch (const json::exception& e) {
    throw CorruptData(fmt::format("{}: malformed manifest ({})", file.string(), e.what()));
  } catch (const InvalidInput& e) {
    throw CorruptData(fmt::format("{}: {}", file.string(), e.what()));
  }
}

std::vector<Sample> read_split(const fs::path& dir, const DatasetManifest& m, const std::string& split) {
  auto cit = m.counts.find(split);
  if (cit == m.counts.end()) throw InvalidInput(fmt::format("dataset has no '{}' split", split));
  const fs::path file = dir / split_file(split);
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CorruptData(fmt::format("{}: missing or unreadable", file.string()));
  const std::string name = file.string();
  unsigned char head[kFileHeader];
  in.read(reinterpret_cast<char*>(head), kFileHeader);
  if (in.gcount() != std::streamsize(kFileHeader)) throw CorruptData(fmt::format("{}: truncated header at offset 0", name));
  if (std::memcmp(head, kMagic, 4) != 0) throw CorruptData(fmt::format("{}: bad magic at offset 0", name));
  const std::uint32_t version = get_u32(head + 4);
  if (version != kFormatVersion) {
    throw CorruptData(fmt::format("{}: unsupported version {} at offset 4", name, version));
  }
  const std::uint64_t count = get_u64(head + 8);
  if (count != cit->second) {
    throw CountMismatch(fmt::format("{}: file holds {} records but manifest says {}", name, count, cit->second));
  }
  const Unit rain_unit = m.normalized() ? Unit::dimensionless : Unit::mm_per_h;
  const std::size_t payload = kFramesPerRecord * m.height * m.width * 4;
  std::vector<unsigned char> buf(kRecordHeader + payload + 4);
  std::vector<Sample> out;
  out.reserve(count);
  std::uint64_t offset = kFileHeader;
  for (std::uint64_t r = 0; r < count; ++r) {
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (in.gcount() != std::streamsize(buf.size())) {
      throw CorruptData(fmt::format("{}: truncated record {} at offset {}", name, r, offset));
    }
    const std::size_t h = get_u16(buf.data() + 8), w = get_u16(buf.data() + 10);
    if (h != m.height || w != m.width) {
      throw CorruptData(fmt::format("{}: record {} at offset {} is {}x{}, manifest says {}x{}", name, r, offset, h,
                                    w, m.height, m.width));
    }
    if (crc(buf.data(), buf.size() - 4) != get_u32(buf.data() + buf.size() - 4)) {
      throw CorruptData(fmt::format("{}: checksum mismatch in record {} at offset {}", name, r, offset));
    }
    Sample s;
    s.key = {get_u32(buf.data()), get_u32(buf.data() + 4)};
    const double start = double(s.key.sequence_id) * m.sequence_stride_hours + double(s.key.window_start) * m.step_hours;
    const unsigned char* p = buf.data() + kRecordHeader;
    s.rain_in = read_frames(p, Variable::rain, kInputFrames, h, w, rain_unit, m.step_hours, start);
    s.rain_target = read_frames(p, Variable::rain, kHorizon, h, w, rain_unit, m.step_hours,
                                start + m.step_hours * double(kInputFrames));
    for (std::size_t v = 0; v < kAuxVariableCount; ++v) {
      const Unit u = m.normalized() ? Unit::dimensionless : natural_unit(kAuxVariables[v]);
      s.aux_in[v] = read_frames(p, kAuxVariables[v], kInputFrames, h, w, u, m.step_hours, start);
    }
    out.push_back(std::move(s));
    offset += buf.size();
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CountMismatch(fmt::format("{}: trailing bytes after {} records at offset {}", name, count, offset));
  }
  return out;
}

Dataset read_dataset(const fs::path& dir) {
  Dataset d;
  d.manifest = read_manifest(dir);
  for (const auto& [name, count] : d.manifest.counts) d.splits[name] = read_split(dir, d.manifest, name);
  return d;
}

}  // namespace nowcast
