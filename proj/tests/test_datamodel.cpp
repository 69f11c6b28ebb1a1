#include <doctest.h>

#include <random>

#include "nowcast/datamodel.hpp"
#include "nowcast/error.hpp"
#include "support/oracles.hpp"

using namespace nowcast;
using nowcast::testing::random_grid;

namespace {

FrameSequence accumulated(const std::vector<float>& series) {
  std::vector<Grid2D> frames;
  for (float v : series) frames.emplace_back(1, 1, Unit::kg_per_m2_accumulated, v);
  return FrameSequence(Variable::rain, frames);
}

std::vector<float> pixel_series(const FrameSequence& s) {
  std::vector<float> out;
  for (const auto& f : s.frames()) out.push_back(f.at(0, 0));
  return out;
}

}  // namespace

TEST_CASE("accumulated_to_rate differences consecutive frames") {
  auto r = accumulated_to_rate(accumulated({0.0f, 1.5f, 1.5f, 2.0f}));
  CHECK(pixel_series(r) == std::vector<float>{1.5f, 0.0f, 0.5f});
  CHECK(r[0].unit() == Unit::mm_per_h);
}

TEST_CASE("accumulated_to_rate clamps negative differences") {
  CHECK(pixel_series(accumulated_to_rate(accumulated({1.0f, 0.8f}))) == std::vector<float>{0.0f});
}

TEST_CASE("accumulated_to_rate converts kg/m2 to mm one to one") {
  CHECK(pixel_series(accumulated_to_rate(accumulated({2.0f, 5.25f})))[0] == 3.25f);
}

TEST_CASE("accumulated_to_rate needs two frames") {
  CHECK_THROWS_AS(accumulated_to_rate(accumulated({1.0f})), InvalidInput);
}

TEST_CASE("accumulated_to_rate is non-negative and telescopes where unclamped") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> step(-0.05, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Grid2D> frames;
    Grid2D acc(3, 3, Unit::kg_per_m2_accumulated);
    for (int t = 0; t < 6; ++t) {
      frames.push_back(acc);
      for (auto& v : acc.values()) v += float(step(rng));
    }
    FrameSequence seq(Variable::rain, frames);
    auto rate = accumulated_to_rate(seq);
    for (std::size_t k = 0; k < 9; ++k) {
      bool clamped = false;
      double total = frames[0].values()[k];
      for (std::size_t t = 0; t < rate.size(); ++t) {
        CHECK(rate[t].values()[k] >= 0.0f);
        clamped = clamped || frames[t + 1].values()[k] < frames[t].values()[k];
        total += rate[t].values()[k];
      }
      if (!clamped) CHECK(total == doctest::Approx(frames.back().values()[k]).epsilon(1e-5));
    }
  }
}

TEST_CASE("crop of the reference box yields 115 x 115") {
  CropRegion box{50.84, 53.462, 3.182, 7.4, 0.023, 0.037};
  CHECK(box.rows() == 115);
  CHECK(box.cols() == 115);
  GeoReference origin{54.0, 2.0, 0.023, 0.037};
  Grid2D src(200, 200, Unit::mm_per_h);
  for (std::size_t r = 0; r < 200; ++r)
    for (std::size_t c = 0; c < 200; ++c) src.at(r, c) = float(r * 1000 + c);
  auto out = crop(src, box, origin);
  CHECK(out.height() == 115);
  CHECK(out.width() == 115);
  // north-west pixel of the box
  const auto r0 = std::size_t(std::llround((54.0 - 53.462) / 0.023));
  const auto c0 = std::size_t(std::llround((3.182 - 2.0) / 0.037));
  CHECK(out.at(0, 0) == src.at(r0, c0));
}

TEST_CASE("crop over the full extent is the identity") {
  std::mt19937_64 rng(1);
  Grid2D g = random_grid(6, 9, rng);
  GeoReference o{10.0, 20.0, 0.5, 0.25};
  CropRegion full{10.0 - 5 * 0.5, 10.0, 20.0, 20.0 + 8 * 0.25, 0.5, 0.25};
  CHECK(crop(g, full, o) == g);
}

TEST_CASE("crop of an interior box equals index slicing") {
  std::mt19937_64 rng(2);
  Grid2D g = random_grid(10, 10, rng);
  GeoReference o{0.0, 0.0, 1.0, 1.0};
  // rows 2..4, cols 5..8
  CropRegion box{-4.0, -2.0, 5.0, 8.0, 1.0, 1.0};
  auto out = crop(g, box, o);
  REQUIRE(out.height() == 3);
  REQUIRE(out.width() == 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(r, c) == g.at(2 + r, 5 + c));
  // crop again with its own full extent
  GeoReference inner{-2.0, 5.0, 1.0, 1.0};
  CHECK(crop(out, CropRegion{-4.0, -2.0, 5.0, 8.0, 1.0, 1.0}, inner) == out);
}

TEST_CASE("crop outside the grid names the edge") {
  Grid2D g(10, 10, Unit::mm_per_h);
  GeoReference o{0.0, 0.0, 1.0, 1.0};
  try {
    crop(g, CropRegion{-4.0, 1.0, 0.0, 3.0, 1.0, 1.0}, o);
    FAIL("expected OutOfBounds");
  } catch (const OutOfBounds& e) {
    CHECK(std::string(e.what()).find("north") != std::string::npos);
  }
  CHECK_THROWS_AS(crop(g, CropRegion{-4.0, -1.0, 5.0, 12.0, 1.0, 1.0}, o), OutOfBounds);
}

TEST_CASE("normalize maps min and max to 0 and 1 without clamping") {
  VariableStats s{Variable::temp_300m, 250.0, 300.0};
  Grid2D g(1, 4, Unit::kelvin, std::vector<float>{250.0f, 300.0f, 275.0f, 310.0f});
  auto n = normalize(FrameSequence(Variable::temp_300m, {g}), s);
  CHECK(n[0].values()[0] == 0.0f);
  CHECK(n[0].values()[1] == 1.0f);
  CHECK(n[0].values()[2] == doctest::Approx(0.5));
  CHECK(n[0].values()[3] == doctest::Approx(1.2));
}

TEST_CASE("relative humidity passes through normalization") {
  Grid2D g(3, 3, Unit::fraction_0_1, 0.37f);
  auto n = normalize(FrameSequence(Variable::rel_humidity_2m, {g}), VariableStats::identity(Variable::rel_humidity_2m));
  for (float v : n[0].values()) CHECK(v == 0.37f);
}

TEST_CASE("denormalize inverts normalize") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    VariableStats s{Variable::pressure_msl, 98000.0, 103000.0};
    Grid2D g = random_grid(5, 5, rng, 97000.0, 104000.0, Unit::pascal);
    auto back = denormalize(normalize(FrameSequence(Variable::pressure_msl, {g}), s), s);
    for (std::size_t k = 0; k < g.size(); ++k) {
      CHECK(std::abs(back[0].values()[k] - g.values()[k]) <= 1e-5 * std::abs(g.values()[k]));
    }
  }
}

TEST_CASE("degenerate stats are rejected") {
  Grid2D g(2, 2, Unit::kelvin, 1.0f);
  CHECK_THROWS_AS(normalize(FrameSequence(Variable::temp_300m, {g}), VariableStats{Variable::temp_300m, 5.0, 5.0}),
                  DegenerateStats);
}

TEST_CASE("grid invariants") {
  Grid2D g(2, 2, Unit::mm_per_h, 1.0f);
  CHECK_NOTHROW(g.validate());
  g.at(1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(g.validate(), InvalidInput);
  CHECK_THROWS_AS(Grid2D(0, 3, Unit::mm_per_h).validate(), InvalidInput);
}
