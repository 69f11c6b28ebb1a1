#include <doctest.h>

#include "nowcast/models.hpp"
#include "support/gradcheck.hpp"
#include "support/samples.hpp"

using namespace nowcast;
using namespace nowcast::testing;

namespace {

std::unique_ptr<Forecaster<float>> small_model(ModelVariant v, std::int64_t h = 32, std::int64_t w = 32,
                                               std::uint64_t seed = 1) {
  return build_model<float>(ModelConfig::defaults(v, h, w), seed);
}

struct Inputs {
  Var<float> rain, aux;
};

Inputs random_inputs(std::int64_t b, std::int64_t h, std::int64_t w, std::mt19937_64& g) {
  return {Var<float>(random_tensor({b, 4, h, w}, g, 0, 1).cast<float>()),
          Var<float>(random_tensor({b, 20, h, w}, g, 0, 1).cast<float>())};
}

}  // namespace

TEST_CASE("variant names round-trip and unknown names are rejected") {
  for (auto v : kAllVariants) CHECK(parse_variant(to_string(v)) == v);
  CHECK(to_string(ModelVariant::mad_smaat_gnet) == "mad_smaat_gnet");
  CHECK_THROWS_AS(parse_variant("unet"), ConfigError);
}

TEST_CASE("default widths per variant") {
  CHECK(ModelConfig::defaults(ModelVariant::smaat_unet, 64, 64).rain_base_channels == 64);
  for (auto v : {ModelVariant::mad_smaat_gnet, ModelVariant::smaat_evo, ModelVariant::smaat_2stream}) {
    auto c = ModelConfig::defaults(v, 64, 64);
    CHECK(c.rain_base_channels == 32);
    CHECK(c.aux_base_channels == 2 * c.rain_base_channels);
  }
}

TEST_CASE("configuration errors") {
  auto c = ModelConfig::defaults(ModelVariant::mad_smaat_gnet, 64, 64);
  c.aux_channels = 19;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(build_model<float>(ModelConfig::defaults(ModelVariant::smaat_unet, 12, 64), 0), ConfigError);
}

TEST_CASE("persistence has no parameters and repeats the last input") {
  auto m = small_model(ModelVariant::persistence);
  CHECK(count_parameters(*m).total == 0);
  std::mt19937_64 g(2);
  Sample s = random_sample(32, 32, g);
  Forecast f = forward(*m, s);
  REQUIRE(f.frames.size() == 4);
  for (const auto& fr : f.frames) CHECK(fr.values().size() == s.rain_in[3].values().size());
  for (const auto& fr : f.frames) CHECK(std::equal(fr.values().begin(), fr.values().end(), s.rain_in[3].values().begin()));
  CHECK(f.provenance == ModelVariant::persistence);
}

TEST_CASE("submodule layout") {
  auto mad = small_model(ModelVariant::mad_smaat_gnet);
  CHECK(mad->child("rain_encoder") != nullptr);
  CHECK(mad->child("aux_encoder") != nullptr);
  CHECK(mad->evolution() != nullptr);
  auto unet = small_model(ModelVariant::smaat_unet);
  CHECK(unet->child("aux_encoder") == nullptr);
  CHECK(unet->evolution() == nullptr);
  CHECK(unet->child("spade0") == nullptr);
  auto two = small_model(ModelVariant::smaat_2stream);
  CHECK(two->child("aux_encoder") != nullptr);
  CHECK(two->evolution() == nullptr);
  auto se = small_model(ModelVariant::smaat_evo);
  CHECK(se->child("aux_encoder") == nullptr);
  CHECK(se->evolution() != nullptr);
}

TEST_CASE("construction is deterministic in the seed") {
  for (auto v : {ModelVariant::smaat_unet, ModelVariant::mad_smaat_gnet, ModelVariant::evo_net}) {
    auto a = small_model(v, 32, 32, 9);
    auto b = small_model(v, 32, 32, 9);
    auto c = small_model(v, 32, 32, 10);
    auto pa = a->named_parameters(), pb = b->named_parameters(), pc = c->named_parameters();
    REQUIRE(pa.size() == pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(pa[i].second->value() == pb[i].second->value());
      differs = differs || !(pa[i].second->value() == pc[i].second->value());
    }
    CHECK(differs);
  }
}

TEST_CASE("every variant maps (B,4,H,W) to (B,4,H,W)") {
  std::mt19937_64 g(3);
  auto in = random_inputs(2, 32, 32, g);
  for (auto v : kAllVariants) {
    auto m = small_model(v);
    m->eval();
    auto y = m->forward(in.rain, in.aux);
    CHECK(y.shape() == Shape{2, 4, 32, 32});
    CHECK(y.value().all_finite());
  }
}

TEST_CASE("odd 115 x 115 input runs through the skip-matched decoder") {
  std::mt19937_64 g(4);
  auto in = random_inputs(1, 115, 115, g);
  auto m = small_model(ModelVariant::smaat_evo, 115, 115);
  m->eval();
  CHECK(m->forward(in.rain, in.aux).shape() == Shape{1, 4, 115, 115});
}

TEST_CASE("wrong input dims raise a shape error") {
  std::mt19937_64 g(5);
  auto m = small_model(ModelVariant::smaat_2stream);
  auto in = random_inputs(1, 32, 32, g);
  CHECK_THROWS_AS(m->forward(Var<float>(Tensor<float>({1, 4, 16, 16})), in.aux), ShapeError);
  CHECK_THROWS_AS(m->forward(in.rain, Var<float>(Tensor<float>({1, 12, 32, 32}))), ShapeError);
}

TEST_CASE("inference is deterministic") {
  std::mt19937_64 g(6);
  auto in = random_inputs(1, 32, 32, g);
  auto m = small_model(ModelVariant::mad_smaat_gnet);
  m->eval();
  CHECK(m->forward(in.rain, in.aux).value() == m->forward(in.rain, in.aux).value());
}

TEST_CASE("the auxiliary path is live in mad_smaat_gnet") {
  std::mt19937_64 g(7);
  auto in = random_inputs(1, 32, 32, g);
  auto m = small_model(ModelVariant::mad_smaat_gnet);
  m->eval();
  auto a = m->forward(in.rain, in.aux);
  auto b = m->forward(in.rain, Var<float>(Tensor<float>({1, 20, 32, 32})));
  CHECK_FALSE(a.value() == b.value());
}

TEST_CASE("zero gamma keeps outputs finite and gradients reaching the motion head") {
  std::mt19937_64 g(8);
  auto in = random_inputs(2, 32, 32, g);
  for (auto v : {ModelVariant::smaat_evo, ModelVariant::mad_smaat_gnet}) {
    auto m = small_model(v);
    m->evolution()->gamma().mutable_value().fill(0.0f);
    auto y = m->forward(in.rain, in.aux);
    CHECK(y.value().all_finite());
    ops::sum(ops::mul(y, y)).backward();
    Var<float>* head = nullptr;
    for (auto& [name, p] : m->named_parameters())
      if (name == "evolution.motion_head.weight") head = p;
    REQUIRE(head != nullptr);
    double norm = 0.0;
    for (float x : head->grad().data()) norm += double(x) * x;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("parameter counts: breakdown, reference tolerance and monotonicity") {
  const std::vector<std::pair<ModelVariant, std::int64_t>> table = {
      {ModelVariant::smaat_unet, 4110400},     {ModelVariant::mad_smaat_gnet, 7453676},
      {ModelVariant::smaat_evo, 3745936},      {ModelVariant::smaat_2stream, 4766624},
      {ModelVariant::evo_net, 2219500}};
  for (auto [v, ref] : table) {
    auto m = small_model(v, 64, 64);
    auto b = count_parameters(*m);
    std::int64_t sum = 0;
    for (auto& [name, n] : b.per_submodule) sum += n;
    CHECK(sum == b.total);
    CHECK(b.total == m->parameter_count());
    CHECK(std::abs(double(b.total - ref)) <= 0.15 * double(ref));
  }
  std::int64_t prev = 0;
  for (std::int64_t base : {16, 24, 32}) {
    auto c = ModelConfig::defaults(ModelVariant::smaat_2stream, 32, 32);
    c.rain_base_channels = base;
    c.aux_base_channels = 2 * base;
    auto n = count_parameters(*build_model<float>(c, 0)).total;
    CHECK(n > prev);
    prev = n;
  }
}

TEST_CASE("batches stack aux variable-major") {
  std::mt19937_64 g(9);
  Sample a = random_sample(16, 16, g), b = random_sample(16, 16, g);
  auto batch = make_batch<float>({&a, &b});
  CHECK(batch.rain_in.shape() == Shape{2, 4, 16, 16});
  CHECK(batch.aux.shape() == Shape{2, 20, 16, 16});
  CHECK(batch.aux.at(1, 2 * 4 + 3, 5, 6) == b.aux_in[2][3].at(5, 6));
  CHECK(batch.target.at(0, 1, 0, 0) == a.rain_target[1].at(0, 0));
}
