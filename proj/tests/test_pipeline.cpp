#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <cstring>
#include <iterator>

#include <unistd.h>

#include "nowcast/error.hpp"
#include "nowcast/pipeline.hpp"
#include "support/oracles.hpp"
#include "support/samples.hpp"

using namespace nowcast;
using namespace nowcast::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / fmt_name(tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static std::string fmt_name(const std::string& tag) {
    return "nowcast_test_" + tag + "_" + std::to_string(::getpid());
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SyntheticConfig small_cfg(std::uint64_t seed) {
  SyntheticConfig c;
  c.seed = seed;
  c.n_sequences = 4;
  c.height = 24;
  c.width = 24;
  c.frames_per_sequence = 10;
  return c;
}

Sample with_first_frame(Grid2D first) {
  std::mt19937_64 g(0);
  Sample s = random_sample(first.height(), first.width(), g);
  first.set_unit(Unit::mm_per_h);
  s.rain_in[0] = std::move(first);
  return s;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic in the seed") {
  auto a = synth_generate(small_cfg(3));
  auto b = synth_generate(small_cfg(3));
  auto c = synth_generate(small_cfg(4));
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].rain == b[i].rain);
    for (std::size_t v = 0; v < kAuxVariableCount; ++v) CHECK(a[i].aux[v] == b[i].aux[v]);
  }
  CHECK_FALSE(a[0].rain == c[0].rain);
}

TEST_CASE("zero blobs give dry rain frames") {
  auto cfg = small_cfg(5);
  cfg.blobs.count_min = cfg.blobs.count_max = 0;
  for (const auto& s : synth_generate(cfg))
    for (const auto& f : s.rain.frames())
      for (float v : f.values()) CHECK(v == 0.0f);
}

TEST_CASE("zero sequences yield an empty set") {
  auto cfg = small_cfg(6);
  cfg.n_sequences = 0;
  CHECK(synth_generate(cfg).empty());
}

TEST_CASE("uniform translation moves the blob centroid two pixels per frame") {
  SyntheticConfig cfg;
  cfg.seed = 7;
  cfg.n_sequences = 12;
  cfg.height = cfg.width = 128;
  cfg.frames_per_sequence = 10;
  cfg.blobs = {1, 1, 3.0, 3.0, 4.0, 4.0, 0.0};
  cfg.advection = {2.0, 2.0, 0.0, 0.0, 0.0, 0.0};
  std::size_t checked = 0;
  for (const auto& s : synth_generate(cfg)) {
    std::vector<std::array<double, 2>> c;
    for (const auto& f : s.rain.frames()) {
      double m = 0, mx = 0, my = 0;
      for (std::size_t y = 0; y < 128; ++y)
        for (std::size_t x = 0; x < 128; ++x) {
          m += f.at(y, x);
          mx += f.at(y, x) * double(x);
          my += f.at(y, x) * double(y);
        }
      c.push_back({mx / m, my / m});
    }
    for (std::size_t t = 0; t + 1 < c.size(); ++t) {
      auto inside = [](std::array<double, 2> p) { return p[0] > 15 && p[0] < 112 && p[1] > 15 && p[1] < 112; };
      if (!inside(c[t]) || !inside(c[t + 1])) continue;
      CHECK(std::abs(c[t + 1][0] - c[t][0] - 2.0) <= 0.2);
      CHECK(std::abs(c[t + 1][1] - c[t][1]) <= 0.2);
      ++checked;
    }
  }
  CHECK(checked >= 20);
}

TEST_CASE("wind channels follow the advection field") {
  auto cfg = small_cfg(8);
  cfg.advection = {1.5, 1.5, 0.0, 0.0, 0.0, 0.0};
  auto seqs = synth_generate(cfg);
  double mean = 0.0;
  std::size_t n = 0;
  for (float v : seqs[0].aux[3][0].values()) {
    mean += v;
    ++n;
  }
  CHECK(mean / double(n) == doctest::Approx(1.5 * cfg.coupling.wind_per_px).epsilon(0.02));
  CHECK(seqs[0].aux[0][0].unit() == Unit::kelvin);
  CHECK(seqs[0].aux[1][0].unit() == Unit::pascal);
  CHECK(seqs[0].aux[2][0].unit() == Unit::fraction_0_1);
}

TEST_CASE("sliding windows per sequence") {
  auto cfg = small_cfg(9);
  cfg.frames_per_sequence = 8;
  CHECK(make_samples(synth_generate(cfg)).samples.size() == 4);
  cfg.frames_per_sequence = 10;
  auto set = make_samples(synth_generate(cfg));
  CHECK(set.samples.size() == 12);
  for (const auto& s : set.samples) {
    CHECK_NOTHROW(s.validate());
    const auto rt = s.rain_in.timestamps();
    for (const auto& a : s.aux_in) CHECK(a.timestamps() == rt);
    CHECK(s.rain_target.start_hour() == rt.back() + 1.0);
  }
  auto seqs = synth_generate(cfg);
  seqs[1].rain.frames().resize(7);
  for (auto& a : seqs[1].aux) a.frames().resize(7);
  auto short_set = make_samples(seqs);
  CHECK(short_set.skipped_sequences == 1);
  CHECK(short_set.samples.size() == 9);
}

TEST_CASE("wet-pixel filter boundaries") {
  FilterRule rule;
  CHECK_FALSE(passes_filter(with_first_frame(Grid2D(10, 10, Unit::mm_per_h)), rule));

  Grid2D g(115, 115, Unit::mm_per_h);
  for (std::size_t k = 0; k < 2645; ++k) g.values()[k] = 0.2f;
  CHECK(passes_filter(with_first_frame(g), rule));
  g.values()[2644] = 0.0f;
  CHECK_FALSE(passes_filter(with_first_frame(g), rule));

  // exactly at the pixel threshold does not count as wet
  Grid2D at(10, 10, Unit::mm_per_h, 0.1f);
  CHECK_FALSE(passes_filter(with_first_frame(at), rule));

  CHECK_THROWS_AS((FilterRule{0.0, 0.2}.validate()), ConfigError);
  CHECK_THROWS_AS((FilterRule{0.1, 1.5}.validate()), ConfigError);
}

TEST_CASE("filter retention is exact and monotone in the fraction") {
  std::mt19937_64 g(10);
  std::vector<Sample> samples;
  for (int i = 0; i < 60; ++i) {
    Grid2D f = random_grid(8, 8, g, 0.0, 0.3, Unit::mm_per_h);
    samples.push_back(with_first_frame(f));
  }
  std::size_t prev = samples.size() + 1;
  for (double frac : {0.05, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    FilterRule rule{0.1, frac};
    std::size_t oracle = 0;
    for (const auto& s : samples) {
      std::size_t wet = 0;
      for (float v : s.rain_in[0].values()) wet += v > 0.1f;
      oracle += 64.0 * frac <= double(wet) + 1e-9;
    }
    auto r = apply_sample_filter(samples, rule);
    CHECK(r.retained == oracle);
    CHECK(r.total == samples.size());
    CHECK(r.retention() == double(oracle) / double(samples.size()));
    CHECK(r.retained <= prev);
    prev = r.retained;
  }
}

TEST_CASE("temporal split") {
  auto set = make_samples(synth_generate(small_cfg(11))).samples;
  SUBCASE("split before all data") {
    auto r = split_train_test(set, -5.0);
    CHECK(r.train.empty());
    CHECK(r.test.size() == set.size());
  }
  SUBCASE("split after the data is an error") {
    CHECK_THROWS_AS(split_train_test(set, 1e6), InvalidInput);
  }
  SUBCASE("no window straddles the boundary") {
    for (double split : {5.0, 10.0, 13.0, 20.0, 27.5}) {
      auto r = split_train_test(set, split);
      CHECK(r.train.size() + r.test.size() + r.dropped == set.size());
      for (const auto& s : r.test)
        for (double t : s.rain_in.timestamps()) CHECK(t >= split);
      for (const auto& s : r.train)
        for (double t : s.rain_target.timestamps()) CHECK(t < split);
    }
  }
}

TEST_CASE("normalization stats come from the given split") {
  auto set = make_samples(synth_generate(small_cfg(12))).samples;
  auto r = split_train_test(set, 20.0);
  auto train_stats = compute_stats(r.train);
  auto test_stats = compute_stats(r.test);
  CHECK(stats_for(train_stats, Variable::rel_humidity_2m).min == 0.0);
  CHECK(stats_for(train_stats, Variable::rel_humidity_2m).max == 1.0);
  CHECK(stats_for(train_stats, Variable::pressure_msl).min != stats_for(test_stats, Variable::pressure_msl).min);
  double lo = 1e30, hi = -1e30;
  for (const auto& s : r.train)
    for (const auto* seq : {&s.rain_in, &s.rain_target})
      for (const auto& f : seq->frames())
        for (float v : f.values()) {
          lo = std::min(lo, double(v));
          hi = std::max(hi, double(v));
        }
  CHECK(stats_for(train_stats, Variable::rain).min == lo);
  CHECK(stats_for(train_stats, Variable::rain).max == hi);
  auto n = normalize_sample(r.train.front(), train_stats);
  CHECK(n.rain_in[0].unit() == Unit::dimensionless);
}

TEST_CASE("dataset round trip and corruption") {
  TempDir tmp("dataset");
  auto set = make_samples(synth_generate(small_cfg(13))).samples;
  Dataset d;
  d.manifest.seed = 13;
  d.manifest.height = d.manifest.width = 24;
  d.manifest.sequence_stride_hours = 10.0;
  d.splits["all"] = set;
  d.splits["empty"] = {};
  write_dataset(tmp.path / "a", d);
  write_dataset(tmp.path / "b", d);

  auto back = read_dataset(tmp.path / "a");
  CHECK(back.split("all") == set);
  CHECK(back.split("empty").empty());
  CHECK(back.manifest.counts.at("all") == set.size());
  CHECK(slurp(tmp.path / "a" / "all.nwc") == slurp(tmp.path / "b" / "all.nwc"));
  CHECK(slurp(tmp.path / "a" / "manifest.json") == slurp(tmp.path / "b" / "manifest.json"));

  SUBCASE("record header layout") {
    auto bytes = slurp(tmp.path / "a" / "all.nwc");
    CHECK(bytes.substr(0, 4) == "NWC1");
    std::uint64_t count = 0;
    std::memcpy(&count, bytes.data() + 8, 8);
    CHECK(count == set.size());
    const std::size_t rec = 12 + 4 * (8 + 20) * 24 * 24 + 4;
    CHECK(bytes.size() == 16 + rec * set.size());
  }
  SUBCASE("manifest count mutated") {
    auto text = slurp(tmp.path / "a" / "manifest.json");
    const auto key = "\"all\": " + std::to_string(set.size());
    auto pos = text.find(key);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, key.size(), "\"all\": " + std::to_string(set.size() + 1));
    std::ofstream(tmp.path / "a" / "manifest.json") << text;
    CHECK_THROWS_AS(read_dataset(tmp.path / "a"), CountMismatch);
  }
  SUBCASE("bad magic") {
    auto bytes = slurp(tmp.path / "a" / "all.nwc");
    bytes[0] = 'X';
    std::ofstream(tmp.path / "a" / "all.nwc", std::ios::binary) << bytes;
    try {
      read_dataset(tmp.path / "a");
      FAIL("expected CorruptData");
    } catch (const CorruptData& e) {
      CHECK(std::string(e.what()).find("all.nwc") != std::string::npos);
      CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }
  }
  SUBCASE("flipped payload byte") {
    auto bytes = slurp(tmp.path / "a" / "all.nwc");
    bytes[100] ^= 0x40;
    std::ofstream(tmp.path / "a" / "all.nwc", std::ios::binary) << bytes;
    CHECK_THROWS_AS(read_dataset(tmp.path / "a"), CorruptData);
  }
  SUBCASE("truncation") {
    auto bytes = slurp(tmp.path / "a" / "all.nwc");
    bytes.resize(bytes.size() - 7);
    std::ofstream(tmp.path / "a" / "all.nwc", std::ios::binary) << bytes;
    CHECK_THROWS_AS(read_dataset(tmp.path / "a"), CorruptData);
  }
}
