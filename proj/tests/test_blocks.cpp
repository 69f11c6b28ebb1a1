#include <doctest.h>

#include <Eigen/SVD>

#include "nowcast/blocks.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace nowcast;
using nowcast::testing::check_gradients;
using nowcast::testing::random_tensor;
using nowcast::testing::VarD;

namespace {

std::vector<VarD*> leaves_of(Module<double>& m, VarD& x) {
  auto p = m.parameters();
  p.push_back(&x);
  return p;
}

double max_abs(const Tensor<double>& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

double leading_singular_value(const Tensor<double>& w) {
  const auto rows = w.dim(0);
  const auto cols = w.numel() / rows;
  Eigen::MatrixXd m(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) m(r, c) = w[r * cols + c];
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace

TEST_CASE("dsc_double_conv shape contract") {
  Rng rng(1);
  DscDoubleConv<float> b(4, 32, 32, rng);
  Var<float> x(Tensor<float>({1, 4, 8, 8}, 0.5f));
  CHECK(b.forward(x).shape() == Shape{1, 32, 8, 8});
}

TEST_CASE("dsc_double_conv on zero input stays finite") {
  Rng rng(2);
  DscDoubleConv<float> b(3, 8, 8, rng);
  auto y = b.forward(Var<float>(Tensor<float>({2, 3, 5, 5})));
  CHECK(y.value().all_finite());
}

TEST_CASE("dsc_double_conv rejects a channel mismatch") {
  Rng rng(3);
  DscDoubleConv<float> b(4, 8, 8, rng);
  CHECK_THROWS_AS(b.forward(Var<float>(Tensor<float>({1, 5, 4, 4}))), ShapeError);
}

TEST_CASE("dsc parameter counts match the per-layer enumeration") {
  Rng rng(4);
  for (auto [cin, cout, mid] : std::vector<std::array<std::int64_t, 3>>{{4, 32, 32}, {64, 128, 128}, {3, 5, 7}}) {
    DscDoubleConv<float> b(cin, cout, mid, rng);
    const auto oracle = nowcast::testing::dsc_double_oracle(cin, cout, mid, kKernelsPerLayer);
    CHECK(b.parameter_count() == oracle);
    CHECK(DscDoubleConv<float>::parameter_formula(cin, cout, mid) == oracle);
  }
  DepthwiseSeparableConv<float> pair(4, 32, kKernelsPerLayer, rng);
  CHECK(pair.parameter_count() == nowcast::testing::dsc_pair_oracle(4, 32, kKernelsPerLayer));
}

TEST_CASE("cbam preserves shape and gates lie in (0,1)") {
  Rng rng(5);
  Cbam<float> c(32, rng);
  std::mt19937_64 g(6);
  Var<float> x(random_tensor({2, 32, 16, 16}, g).cast<float>());
  auto gates = c.forward_with_gates(x);
  CHECK(gates.output.shape() == x.shape());
  for (float v : gates.channel.value().data()) CHECK((v > 0.0f && v < 1.0f));
  for (float v : gates.spatial.value().data()) CHECK((v > 0.0f && v < 1.0f));
}

TEST_CASE("cbam of zero is zero") {
  Rng rng(7);
  Cbam<float> c(16, rng);
  auto y = c.forward(Var<float>(Tensor<float>({1, 16, 6, 6})));
  for (float v : y.value().data()) CHECK(v == 0.0f);
}

TEST_CASE("cbam reduction larger than channels is a configuration error") {
  Rng rng(8);
  CHECK_THROWS_AS(Cbam<float>(8, rng, 16), ConfigError);
}

TEST_CASE("spade with zero modulation returns the normalized input") {
  Rng rng(9);
  Spade<double> s(4, 3, rng);
  for (auto* conv : {&s.gamma_conv(), &s.beta_conv()}) {
    conv->weight().mutable_value().fill(0.0);
    if (conv->bias()) conv->bias()->mutable_value().fill(0.0);
  }
  std::mt19937_64 g(10);
  VarD x(random_tensor({2, 4, 5, 5}, g));
  VarD cond(random_tensor({2, 3, 3, 3}, g));
  auto y = s.forward(x, cond);
  // per-channel batch normalisation by hand
  for (std::int64_t c = 0; c < 4; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < 25; ++i) mean += x.value().at(n, c, i / 5, i % 5);
    mean /= 50.0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < 25; ++i) var += std::pow(x.value().at(n, c, i / 5, i % 5) - mean, 2);
    var /= 50.0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < 25; ++i) {
        const double expect = (x.value().at(n, c, i / 5, i % 5) - mean) / std::sqrt(var + 1e-5);
        CHECK(y.value().at(n, c, i / 5, i % 5) == doctest::Approx(expect).epsilon(1e-12));
      }
  }
}

TEST_CASE("spade shape contract resizes the condition") {
  Rng rng(11);
  Spade<float> s(64, 128, rng);
  auto y = s.forward(Var<float>(Tensor<float>({1, 64, 14, 14}, 1.0f)), Var<float>(Tensor<float>({1, 128, 7, 7}, 0.3f)));
  CHECK(y.shape() == Shape{1, 64, 14, 14});
}

TEST_CASE("spade on a constant channel is finite and equals the shift map") {
  Rng rng(12);
  Spade<double> s(2, 2, rng);
  VarD x(Tensor<double>({1, 2, 4, 4}, 3.0));
  std::mt19937_64 g(13);
  VarD cond(random_tensor({1, 2, 4, 4}, g));
  auto y = s.forward(x, cond);
  CHECK(y.value().all_finite());
  // xhat = (3 - 3) / sqrt(0 + 1e-5) = 0, so out = beta
  auto* shared = dynamic_cast<Conv2d<double>*>(s.child("shared"));
  REQUIRE(shared);
  auto h = ops::relu(shared->forward(cond));
  auto beta = s.beta_conv().forward(h);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == doctest::Approx(beta.value()[i]).epsilon(1e-12));
}

TEST_CASE("spade rejects an empty condition") {
  Rng rng(14);
  Spade<float> s(4, 2, rng);
  CHECK_THROWS_AS(s.forward(Var<float>(Tensor<float>({1, 4, 4, 4}, 1.0f)), Var<float>(Tensor<float>({1, 2, 0, 0}))),
                  InvalidInput);
}

TEST_CASE("spectral normalisation bounds the leading singular value") {
  Rng rng(15);
  SpectralResidualBlock<double> b(8, 16, 16, rng);
  VarD x(Tensor<double>({1, 8, 6, 6}, 0.1));
  b.forward(x);
  for (auto* sn : b.spectral_convs()) {
    const double s = leading_singular_value(sn->normalized_weight());
    CHECK(s <= 1.0 + 1e-2);
    CHECK(s >= 1.0 - 1e-2);
    CHECK(sn->sigma_estimate() == doctest::Approx(leading_singular_value(sn->weight().value())).epsilon(1e-2));
  }
}

TEST_CASE("spectral residual block with zero weights leaves only conv biases") {
  Rng rng(16);
  SpectralResidualBlock<double> b(3, 4, 4, rng);
  for (auto* sn : b.spectral_convs()) sn->weight().mutable_value().fill(0.0);
  std::mt19937_64 g(17);
  auto y = b.forward(VarD(random_tensor({1, 3, 5, 5}, g)));
  auto sc = b.spectral_convs();
  for (std::int64_t c = 0; c < 4; ++c) {
    const double expect = sc[1]->bias().value()[c] + sc[2]->bias().value()[c];
    for (std::int64_t i = 0; i < 25; ++i) CHECK(y.value().at(0, c, i / 5, i % 5) == doctest::Approx(expect));
  }
}

TEST_CASE("spectral residual block shape") {
  Rng rng(18);
  SpectralResidualBlock<float> b(16, 32, 32, rng);
  CHECK(b.forward(Var<float>(Tensor<float>({1, 16, 32, 32}, 0.2f))).shape() == Shape{1, 32, 32, 32});
}

TEST_CASE("blocks preserve odd and even spatial sizes") {
  Rng rng(19);
  DscDoubleConv<float> d(2, 4, 4, rng);
  Cbam<float> c(4, rng, 2);
  SpectralResidualBlock<float> r(2, 4, 4, rng);
  Spade<float> s(4, 3, rng, 8);
  for (std::int64_t n : {7, 14, 57, 115}) {
    Var<float> x(Tensor<float>({1, 2, n, n}, 0.5f));
    Var<float> y = d.forward(x);
    CHECK(y.shape() == Shape{1, 4, n, n});
    CHECK(c.forward(y).shape() == Shape{1, 4, n, n});
    CHECK(r.forward(x).shape() == Shape{1, 4, n, n});
    CHECK(s.forward(y, Var<float>(Tensor<float>({1, 3, 7, 7}, 1.0f))).shape() == Shape{1, 4, n, n});
  }
}

TEST_CASE("block gradients match central differences") {
  std::mt19937_64 g(20);
  auto reduce_with = [&](Shape shape) { return random_tensor(shape, g); };

  SUBCASE("dsc_double_conv") {
    Rng rng(21);
    DscDoubleConv<double> b(3, 4, 4, rng);
    VarD x(random_tensor({2, 3, 4, 4}, g), true);
    auto r = reduce_with({2, 4, 4, 4});
    auto res = check_gradients([&] { return ops::dot(b.forward(x), r); }, leaves_of(b, x));
    CHECK(res.worst < 1e-3);
  }
  SUBCASE("cbam_apply") {
    Rng rng(22);
    Cbam<double> b(8, rng, 4);
    VarD x(random_tensor({2, 8, 4, 4}, g), true);
    auto r = reduce_with({2, 8, 4, 4});
    auto res = check_gradients([&] { return ops::dot(b.forward(x), r); }, leaves_of(b, x));
    CHECK(res.worst < 1e-3);
  }
  SUBCASE("spade_modulate") {
    Rng rng(23);
    Spade<double> b(3, 2, rng, 4);
    VarD x(random_tensor({2, 3, 4, 4}, g), true);
    VarD cond(random_tensor({2, 2, 3, 3}, g), true);
    auto r = reduce_with({2, 3, 4, 4});
    auto leaves = leaves_of(b, x);
    leaves.push_back(&cond);
    auto res = check_gradients([&] { return ops::dot(b.forward(x, cond), r); }, leaves);
    CHECK(res.worst < 1e-3);
  }
  SUBCASE("spectral_residual_block") {
    Rng rng(24);
    SpectralResidualBlock<double> b(3, 4, 4, rng);
    set_power_iteration(b, false);
    VarD x(random_tensor({2, 3, 4, 4}, g), true);
    auto r = reduce_with({2, 4, 4, 4});
    auto res = check_gradients([&] { return ops::dot(b.forward(x), r); }, leaves_of(b, x));
    CHECK(res.worst < 1e-3);
  }
}

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 g(30);
  VarD a(random_tensor({1, 2, 5, 5}, g), true);
  SUBCASE("resize_bilinear") {
    auto r = random_tensor({1, 2, 3, 4}, g);
    CHECK(check_gradients([&] { return ops::dot(ops::resize_bilinear(a, 3, 4), r); }, {&a}).worst < 1e-3);
  }
  SUBCASE("adaptive_max_pool2d") {
    auto r = random_tensor({1, 2, 2, 2}, g);
    CHECK(check_gradients([&] { return ops::dot(ops::adaptive_max_pool2d(a, 2, 2), r); }, {&a}).worst < 1e-3);
  }
  SUBCASE("linear") {
    VarD x(random_tensor({3, 4}, g), true), w(random_tensor({2, 4}, g), true), b(random_tensor({2}, g), true);
    auto r = random_tensor({3, 2}, g);
    CHECK(check_gradients([&] { return ops::dot(ops::linear(x, w, b), r); }, {&x, &w, &b}).worst < 1e-3);
  }
  SUBCASE("spectral_normalize") {
    VarD w(random_tensor({3, 2, 3, 3}, g), true);
    auto u = random_tensor({3}, g), v = random_tensor({18}, g);
    auto r = random_tensor({3, 2, 3, 3}, g);
    CHECK(check_gradients([&] { return ops::dot(ops::spectral_normalize(w, u, v), r); }, {&w}).worst < 1e-3);
  }
  SUBCASE("max_pool2d") {
    auto r = random_tensor({1, 2, 2, 2}, g);
    CHECK(check_gradients([&] { return ops::dot(ops::max_pool2d(a), r); }, {&a}).worst < 1e-3);
  }
  CHECK(max_abs(a.value()) > 0.0);
}
