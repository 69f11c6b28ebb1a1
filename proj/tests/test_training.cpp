#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "nowcast/training.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/samples.hpp"
#include "support/synthetic.hpp"

using namespace nowcast;
using namespace nowcast::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("nowcast_train_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

const NormalizedSplits& tiny_data() {
  static const NormalizedSplits d = [] {
    SyntheticConfig cfg;
    cfg.seed = 21;
    cfg.n_sequences = 10;
    cfg.height = cfg.width = 16;
    cfg.frames_per_sequence = 10;
    cfg.blobs.radius_min = 3.0;
    cfg.blobs.radius_max = 5.0;
    cfg.advection.speed_max = 1.0;
    return synthetic_splits(cfg, 0.2, 0.25, FilterRule{0.1, 0.05});
  }();
  return d;
}

TrainConfig quick(std::size_t epochs, std::uint64_t seed = 3) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

std::vector<Tensor<float>> snapshot(Module<float>& m) {
  std::vector<Tensor<float>> out;
  for (auto& [n, p] : m.named_parameters()) out.push_back(p->value());
  return out;
}

}  // namespace

TEST_CASE("mse_loss") {
  std::mt19937_64 g(1);
  std::vector<Grid2D> target = {random_grid(2, 2, g), random_grid(2, 2, g)};
  Forecast same{target, ModelVariant::persistence};
  CHECK(mse_loss(same, target) == 0.0);
  Forecast plus = same;
  for (auto& f : plus.frames)
    for (auto& v : f.values()) v += 1.0f;
  CHECK(mse_loss(plus, target) == doctest::Approx(1.0).epsilon(1e-6));
  Forecast rnd{{random_grid(2, 2, g), random_grid(2, 2, g)}, ModelVariant::persistence};
  CHECK(mse_loss(rnd, target) == doctest::Approx(mse_triple_loop({rnd.frames}, {target})).epsilon(1e-12));
  CHECK_THROWS_AS(mse_loss(Forecast{{rnd.frames[0]}, ModelVariant::persistence}, target), ShapeError);

  Tensor<float> a = random_tensor({2, 2, 2, 2}, g).cast<float>(), b = random_tensor({2, 2, 2, 2}, g).cast<float>();
  std::vector<std::vector<Grid2D>> pa(2), pb(2);
  for (int n = 0; n < 2; ++n)
    for (int t = 0; t < 2; ++t) {
      Grid2D ga(2, 2, Unit::dimensionless), gb(2, 2, Unit::dimensionless);
      for (int k = 0; k < 4; ++k) {
        ga.values()[k] = a.at(n, t, k / 2, k % 2);
        gb.values()[k] = b.at(n, t, k / 2, k % 2);
      }
      pa[n].push_back(ga);
      pb[n].push_back(gb);
    }
  CHECK(mse(a, b) == doctest::Approx(mse_triple_loop(pa, pb)).epsilon(1e-12));
}

TEST_CASE("plateau scheduler") {
  SUBCASE("five non-improving epochs cut the rate tenfold") {
    auto s = PlateauScheduler::from(TrainConfig{});
    CHECK_FALSE(s.step(1.0));
    for (int i = 0; i < 4; ++i) {
      CHECK_FALSE(s.step(1.0));
      CHECK(s.lr == 1e-3);
    }
    CHECK(s.step(1.0));
    CHECK(s.lr == doctest::Approx(1e-4));
    CHECK(s.bad_epochs == 0);
  }
  SUBCASE("improvement at the fifth epoch resets the counter") {
    auto s = PlateauScheduler::from(TrainConfig{});
    s.step(1.0);
    for (int i = 0; i < 4; ++i) s.step(1.0);
    CHECK_FALSE(s.step(0.9));
    CHECK(s.lr == 1e-3);
    CHECK(s.bad_epochs == 0);
  }
  SUBCASE("two plateaus") {
    auto s = PlateauScheduler::from(TrainConfig{});
    s.step(1.0);
    for (int i = 0; i < 10; ++i) s.step(1.0);
    CHECK(s.lr == doctest::Approx(1e-5));
  }
}

TEST_CASE("early stopping") {
  SUBCASE("fifteen straight non-improvements stop") {
    EarlyStopState e;
    e.update(1.0);
    for (int i = 0; i < 14; ++i) {
      e.update(1.0);
      CHECK_FALSE(e.stopped);
    }
    e.update(1.0);
    CHECK(e.stopped);
    CHECK(e.epochs_since_best == 15);
  }
  SUBCASE("improvement at epoch 14 resets") {
    EarlyStopState e;
    e.update(1.0);
    for (int i = 0; i < 13; ++i) e.update(2.0);
    CHECK(e.update(0.5));
    CHECK(e.epochs_since_best == 0);
    CHECK_FALSE(e.stopped);
    CHECK(e.best_val == 0.5);
  }
  SUBCASE("steady decrease never stops") {
    EarlyStopState e;
    for (int i = 0; i < 100; ++i) e.update(100.0 - i);
    CHECK_FALSE(e.stopped);
  }
}

TEST_CASE("adam") {
  Var<double> p(Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}), true);
  Adam<double> opt({&p}, 1e-3);
  const auto before = p.value();
  p.mutable_grad().fill(0.0);
  opt.step();
  CHECK(p.value() == before);

  p.mutable_grad()[0] = 0.3;
  p.mutable_grad()[1] = -4.0;
  p.mutable_grad()[2] = 0.0;
  const auto prev = p.value();
  opt.step();
  // second step: m = 0.1 g, v = 0.001 g^2, bias corrections 1 - beta^2
  for (int i = 0; i < 3; ++i) {
    const double gi = p.grad()[i];
    const double mh = 0.1 * gi / (1 - 0.81);
    const double vh = 0.001 * gi * gi / (1 - 0.999 * 0.999);
    CHECK(p.value()[i] == doctest::Approx(prev[i] - 1e-3 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("fit smoke run, determinism and history invariants") {
  const auto& d = tiny_data();
  REQUIRE(!d.train.empty());
  REQUIRE(!d.val.empty());
  auto a = build_model<float>(ModelConfig::defaults(ModelVariant::evo_net, 16, 16), 5);
  auto b = build_model<float>(ModelConfig::defaults(ModelVariant::evo_net, 16, 16), 5);
  auto ra = fit(*a, d.train, d.val, quick(2));
  auto rb = fit(*b, d.train, d.val, quick(2));
  REQUIRE(ra.history.epochs.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(std::isfinite(ra.history.epochs[i].train_mse));
    CHECK(ra.history.epochs[i].train_mse == rb.history.epochs[i].train_mse);
    CHECK(ra.history.epochs[i].val_mse == rb.history.epochs[i].val_mse);
  }
  CHECK(snapshot(*a) == snapshot(*b));
  CHECK(ra.best_val <= ra.history.epochs.back().val_mse);
  CHECK(dataset_mse(*a, d.val) == doctest::Approx(ra.best_val).epsilon(1e-9));
  for (std::size_t i = 1; i < ra.history.epochs.size(); ++i)
    CHECK(ra.history.epochs[i].lr <= ra.history.epochs[i - 1].lr);
}

TEST_CASE("fit rejects empty splits and parameter-free models") {
  const auto& d = tiny_data();
  auto m = build_model<float>(ModelConfig::defaults(ModelVariant::evo_net, 16, 16), 5);
  CHECK_THROWS_AS(fit(*m, {}, d.val, quick(1)), InvalidInput);
  CHECK_THROWS_AS(fit(*m, d.train, {}, quick(1)), InvalidInput);
  auto p = build_model<float>(ModelConfig::defaults(ModelVariant::persistence, 16, 16), 5);
  CHECK_THROWS_AS(fit(*p, d.train, d.val, quick(1)), ConfigError);
}

TEST_CASE("non-finite loss raises divergence and restores finite parameters") {
  auto train = tiny_data().train;
  train[0].rain_in[1].values()[3] = std::numeric_limits<float>::infinity();
  auto m = build_model<float>(ModelConfig::defaults(ModelVariant::evo_net, 16, 16), 5);
  CHECK_THROWS_AS(fit(*m, train, tiny_data().val, quick(1)), Divergence);
  for (auto& t : snapshot(*m)) CHECK(t.all_finite());
}

TEST_CASE("pretraining, checkpoints and frozen evolution") {
  const auto& d = tiny_data();
  const auto dir = temp_path("evo");
  FitResult pr;
  auto evo = pretrain_evolution(d.train, d.val, quick(3), 16, 16, &pr);
  {
    auto fresh = build_model<float>(ModelConfig::defaults(ModelVariant::evo_net, 16, 16), 3);
    CHECK(pr.best_val < dataset_mse(*fresh, d.val));
  }
  save_checkpoint(dir, *evo, 3);

  SUBCASE("round trip is bit exact") {
    auto back = load_checkpoint(dir);
    CHECK(back->config().variant == ModelVariant::evo_net);
    CHECK(snapshot(*back) == snapshot(*evo));
    CHECK(read_checkpoint_config(dir).height == 16);
  }
  SUBCASE("loads into the evolution submodule of mad_smaat_gnet") {
    auto mad = build_model<float>(ModelConfig::defaults(ModelVariant::mad_smaat_gnet, 16, 16), 8);
    auto rep = load_submodule(dir, *mad, "evolution.");
    CHECK(rep.missing.empty());
    CHECK(rep.unexpected.empty());
    CHECK(rep.loaded > 0);
    CHECK(snapshot(*mad->evolution()) == snapshot(*evo->evolution()));
  }
  SUBCASE("frozen evolution stays bit identical") {
    auto m = build_model<float>(ModelConfig::defaults(ModelVariant::smaat_evo, 16, 16), 8);
    auto cfg = quick(1);
    cfg.pretrained_evo = dir;
    cfg.freeze_evo = true;
    fit(*m, d.train, d.val, cfg);
    CHECK(snapshot(*m->evolution()) == snapshot(*evo->evolution()));
  }
  SUBCASE("unfrozen evolution moves") {
    auto m = build_model<float>(ModelConfig::defaults(ModelVariant::smaat_evo, 16, 16), 8);
    auto cfg = quick(1);
    cfg.pretrained_evo = dir;
    fit(*m, d.train, d.val, cfg);
    CHECK_FALSE(snapshot(*m->evolution()) == snapshot(*evo->evolution()));
  }
  SUBCASE("corrupted blob is detected") {
    std::fstream f(dir / "parameters.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(17);
    f.put('\x7f');
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir), CorruptData);
  }
  fs::remove_all(dir);
}

TEST_CASE("history csv") {
  TrainHistory h;
  h.epochs.push_back({1, 0.5, 0.25, 1e-3, 2.0});
  const auto file = temp_path("hist");
  h.write_csv(file);
  std::ifstream in(file);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,train_mse,val_mse,lr,seconds");
  fs::remove(file);
}
