#include <doctest.h>

#include "nowcast/evolution.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace nowcast;
using namespace nowcast::testing;

namespace {

MotionField constant_motion(std::size_t steps, std::size_t h, std::size_t w, float u, float v) {
  MotionField m;
  for (std::size_t t = 0; t < steps; ++t) {
    m.u.emplace_back(h, w, Unit::dimensionless, u);
    m.v.emplace_back(h, w, Unit::dimensionless, v);
  }
  return m;
}

IntensityResidual constant_residual(std::size_t steps, std::size_t h, std::size_t w, float r, float gamma) {
  IntensityResidual res;
  for (std::size_t t = 0; t < steps; ++t) res.r.emplace_back(h, w, Unit::dimensionless, r);
  res.gamma.assign(steps, gamma);
  return res;
}

}  // namespace

TEST_CASE("evolution net field shapes") {
  Rng rng(1);
  EvolutionNet<float> net(4, 4, rng);
  Var<float> x(Tensor<float>({1, 4, 64, 64}, 0.1f));
  auto f = net.predict_fields(x);
  CHECK(f.motion.shape() == Shape{1, 8, 64, 64});
  CHECK(f.residual.shape() == Shape{1, 4, 64, 64});
  CHECK(net.forward(x).shape() == Shape{1, 4, 64, 64});
  CHECK(net.gamma().shape() == Shape{4});
}

TEST_CASE("zero gamma zeroes every residual map") {
  Rng rng(2);
  EvolutionNet<float> net(4, 4, rng);
  std::mt19937_64 g(3);
  auto f = net.predict_fields(Var<float>(random_tensor({1, 4, 32, 32}, g).cast<float>()));
  for (float v : net.gamma().value().data()) CHECK(v == 0.0f);
  for (float v : f.residual.value().data()) CHECK(v == 0.0f);
  bool raw_nonzero = false;
  for (float v : f.raw_residual.value().data()) raw_nonzero = raw_nonzero || v != 0.0f;
  CHECK(raw_nonzero);
}

TEST_CASE("encoder channel progression") {
  Rng rng(4);
  EvolutionNet<float> net(4, 4, rng);
  // the top stage stays at 128; see README
  CHECK(net.encoder_channels() == std::vector<std::int64_t>{16, 32, 64, 128, 128});
}

TEST_CASE("spatial dims too small to pool four times") {
  CHECK_THROWS_AS(check_poolable(15, 64), ConfigError);
  CHECK_NOTHROW(check_poolable(16, 16));
  CHECK(pooled_dims(115, 115, 4) == std::array<std::int64_t, 2>{7, 7});
  CHECK(pooled_dims(115, 115, 1) == std::array<std::int64_t, 2>{57, 57});
  CHECK(pooled_dims(115, 115, 2) == std::array<std::int64_t, 2>{28, 28});
  CHECK(pooled_dims(115, 115, 3) == std::array<std::int64_t, 2>{14, 14});
}

TEST_CASE("warp with zero motion is the identity") {
  std::mt19937_64 g(5);
  Grid2D f = random_grid(6, 7, g);
  Grid2D z(6, 7, Unit::dimensionless);
  CHECK(warp_bilinear(f, z, z) == f);
}

TEST_CASE("uniform unit motion shifts one column with border clamp") {
  std::mt19937_64 g(6);
  Grid2D f = random_grid(5, 6, g);
  Grid2D u(5, 6, Unit::dimensionless, 1.0f), v(5, 6, Unit::dimensionless);
  auto out = warp_bilinear(f, u, v);
  for (std::size_t y = 0; y < 5; ++y) {
    CHECK(out.at(y, 0) == f.at(y, 0));
    for (std::size_t x = 1; x < 6; ++x) CHECK(out.at(y, x) == f.at(y, x - 1));
  }
}

TEST_CASE("half-pixel motion on a two-pixel ramp") {
  Grid2D f(1, 2, Unit::dimensionless, std::vector<float>{0.0f, 1.0f});
  Grid2D u(1, 2, Unit::dimensionless, std::vector<float>{0.0f, 0.5f});
  Grid2D v(1, 2, Unit::dimensionless);
  auto out = warp_bilinear(f, u, v);
  CHECK(out.at(0, 1) == 0.5f);
  CHECK(out.at(0, 0) == 0.0f);
}

TEST_CASE("integer motion fields match the index-shift oracle") {
  std::mt19937_64 g(7);
  std::uniform_int_distribution<int> d(-3, 3);
  for (int trial = 0; trial < 200; ++trial) {
    Grid2D f = random_grid(8, 8, g);
    std::vector<int> du(64), dv(64);
    Grid2D u(8, 8, Unit::dimensionless), v(8, 8, Unit::dimensionless);
    for (std::size_t k = 0; k < 64; ++k) {
      du[k] = d(g);
      dv[k] = d(g);
      u.values()[k] = float(du[k]);
      v.values()[k] = float(dv[k]);
    }
    CHECK(warp_bilinear(f, u, v) == shift_oracle(f, du, dv));
  }
}

TEST_CASE("fractional motion matches hand bilinear arithmetic") {
  std::mt19937_64 g(8);
  std::uniform_real_distribution<double> d(-2.5, 2.5);
  for (int trial = 0; trial < 50; ++trial) {
    Grid2D f = random_grid(8, 8, g);
    Grid2D u = random_grid(8, 8, g, -2.5, 2.5), v = random_grid(8, 8, g, -2.5, 2.5);
    auto out = warp_bilinear(f, u, v);
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const double e = bilinear_oracle(f, double(y) - v.at(y, x), double(x) - u.at(y, x));
        CHECK(std::abs(out.at(y, x) - e) <= 1e-6);
      }
  }
}

TEST_CASE("rollout with no motion and no residual repeats the last frame") {
  std::mt19937_64 g(9);
  Grid2D last = random_grid(5, 5, g);
  auto frames = evolution_rollout(last, constant_motion(4, 5, 5, 0, 0), constant_residual(4, 5, 5, 0.0f, 0.0f));
  REQUIRE(frames.size() == 4);
  for (const auto& f : frames) CHECK(f == last);
}

TEST_CASE("rollout with a constant residual telescopes") {
  std::mt19937_64 g(10);
  Grid2D last = random_grid(4, 4, g);
  const float c = 0.25f;
  auto frames = evolution_rollout(last, constant_motion(4, 4, 4, 0, 0), constant_residual(4, 4, 4, c, 1.0f));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < 16; ++k)
      CHECK(frames[t].values()[k] == doctest::Approx(last.values()[k] + double(t + 1) * c).epsilon(1e-6));
}

TEST_CASE("rollout rejects mismatched step counts") {
  Grid2D last(4, 4, Unit::dimensionless);
  CHECK_THROWS_AS(evolution_rollout(last, constant_motion(4, 4, 4, 0, 0), constant_residual(3, 4, 4, 0, 0)),
                  InvalidInput);
}

TEST_CASE("rollout frames depend only on fields up to their own step") {
  std::mt19937_64 g(11);
  Grid2D last = random_grid(6, 6, g);
  MotionField m;
  IntensityResidual r;
  for (int t = 0; t < 4; ++t) {
    m.u.push_back(random_grid(6, 6, g, -1, 1));
    m.v.push_back(random_grid(6, 6, g, -1, 1));
    r.r.push_back(random_grid(6, 6, g, -0.1, 0.1));
  }
  r.gamma = {0.5f, 0.7f, 0.9f, 1.1f};
  auto full = evolution_rollout(last, m, r);
  for (std::size_t cut = 1; cut < 4; ++cut) {
    auto m2 = m;
    auto r2 = r;
    for (std::size_t t = cut; t < 4; ++t) {
      m2.u[t] = Grid2D(6, 6, Unit::dimensionless);
      m2.v[t] = Grid2D(6, 6, Unit::dimensionless);
      r2.r[t] = Grid2D(6, 6, Unit::dimensionless);
    }
    auto part = evolution_rollout(last, m2, r2);
    for (std::size_t t = 0; t < cut; ++t) CHECK(part[t] == full[t]);
  }
}

TEST_CASE("zero motion and zero gamma conserve mass") {
  std::mt19937_64 g(12);
  Grid2D last = random_grid(7, 7, g);
  auto frames = evolution_rollout(last, constant_motion(4, 7, 7, 0, 0), constant_residual(4, 7, 7, 3.0f, 0.0f));
  double m0 = 0.0;
  for (float v : last.values()) m0 += v;
  for (const auto& f : frames) {
    double m = 0.0;
    for (float v : f.values()) m += v;
    CHECK(m == doctest::Approx(m0).epsilon(1e-12));
  }
}

TEST_CASE("inject_features pools to decoder dims") {
  Var<float> x112(Tensor<float>({1, 4, 112, 112}, 1.0f));
  CHECK(evo::inject_features(x112, InjectLevel::bottleneck).shape() == Shape{1, 4, 7, 7});
  CHECK(evo::inject_features(x112, InjectLevel::first_up).shape() == Shape{1, 4, 14, 14});
  Var<float> x115(Tensor<float>({1, 4, 115, 115}, 1.0f));
  CHECK(evo::inject_features(x115, InjectLevel::bottleneck).shape() == Shape{1, 4, 7, 7});
  CHECK(evo::inject_features(x115, InjectLevel::first_up).shape() == Shape{1, 4, 14, 14});
  CHECK(evo::inject_features(x115, InjectLevel::final).shape() == Shape{1, 4, 115, 115});
  CHECK(parse_inject_level("first_up") == InjectLevel::first_up);
  CHECK_THROWS_AS(parse_inject_level("middle"), ConfigError);
}

TEST_CASE("warp and rollout gradients match central differences") {
  std::mt19937_64 g(13);
  VarD frame(random_tensor({1, 1, 5, 5}, g), true);
  // fractional displacements keep every sample away from a grid line
  auto frac = [&](Shape s, int sign_seed) {
    Tensor<double> t(s);
    std::uniform_real_distribution<double> d(0.15, 0.4);
    std::bernoulli_distribution b(0.5);
    for (auto& x : t.data()) x = (b(g) ? 1 : -1) * (d(g) + double(sign_seed % 2));
    return t;
  };
  SUBCASE("warp_bilinear") {
    VarD u(frac({1, 1, 5, 5}, 0), true), v(frac({1, 1, 5, 5}, 1), true);
    auto r = random_tensor({1, 1, 5, 5}, g);
    auto res = check_gradients([&] { return ops::dot(ops::warp_bilinear(frame, u, v), r); }, {&frame, &u, &v});
    CHECK(res.worst < 1e-3);
  }
  SUBCASE("evolution_rollout") {
    VarD motion(frac({1, 8, 5, 5}, 0), true);
    VarD residual(random_tensor({1, 4, 5, 5}, g, -0.2, 0.2), true);
    auto r = random_tensor({1, 4, 5, 5}, g);
    auto res = check_gradients([&] { return ops::dot(evo::rollout(frame, motion, residual), r); },
                               {&frame, &motion, &residual});
    CHECK(res.worst < 1e-3);
  }
}
