#include <doctest.h>

#include <cmath>
#include <sstream>

#include "stimpute/training.hpp"
#include "support/oracles.hpp"

using namespace stimpute;
using stimpute::testing::ScriptedAdam;
using T = Tensor<double>;

namespace {

double loss_of(const T& pred, const T& target, const T& valid) {
  ad::Graph<double> g;
  return mse_loss(g.constant(pred), g.constant(target), g.constant(valid)).value()[0];
}

ad::Gradients<double> gradients(std::map<std::string, T> g) { return ad::Gradients<double>(g.begin(), g.end()); }

/// Smooth two-sensor series in [0, 1] with no missing data.
WindowSet toy_windows(Index steps, Index sensors = 2, Index window = 3) {
  SpatioTemporalSeries s;
  s.values.resize(sensors, steps);
  for (Index i = 0; i < sensors; ++i) {
    s.sensor_ids.push_back("s" + std::to_string(i));
    for (Index t = 0; t < steps; ++t) s.values(i, t) = 0.5 + 0.4 * std::sin(0.05 * t + i);
  }
  return slide_windows(s, MissingMask::from_blocks(sensors, steps, {}), window);
}

ModelSpec toy_spec() {
  ModelSpec spec = ModelSpec::defaults(Variant::kFcNn, {2, 3, 1});
  spec.hidden_layers = {12};
  return spec;
}

}  // namespace

TEST_CASE("masked mse") {
  const T ones = T::constant({2}, 1.0);
  CHECK(loss_of(T({2}, {1, 3}), T({2}, {1, 3}), ones) == 0.0);
  CHECK(loss_of(T::zeros({2}), T({2}, {1, 3}), ones) == 5.0);
  CHECK(loss_of(T::zeros({2}), T({2}, {1, 3}), T({2}, {0, 1})) == 9.0);
  CHECK_THROWS_AS(loss_of(T::zeros({2}), T({2}, {1, 3}), T::zeros({2})), ContractError);
  CHECK_THROWS_AS(loss_of(T::zeros({2}), T::zeros({3}), ones), DimensionError);

  ad::Graph<double> g;
  auto p = g.parameter("p", T({3}, {0.5, 2.0, -1.0}));
  auto grads = g.backward(mse_loss(p, g.constant(T({3}, {0, 0, 0})), g.constant(T({3}, {1, 0, 1}))));
  CHECK(grads.at("p")[0] == doctest::Approx(0.5));
  CHECK(grads.at("p")[1] == 0.0);
  CHECK(grads.at("p")[2] == doctest::Approx(-1.0));
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParameterSet<double> p{{"w", T({2}, {0.3, -0.7})}};
    auto state = AdamState<double>::init(p);
    adam_step(state, p, gradients({{"w", T::zeros({2})}}));
    CHECK(p.at("w")[0] == 0.3);
    CHECK(p.at("w")[1] == -0.7);
    CHECK(state.step == 1);
  }
  SUBCASE("first step from p = 1 with g = 1") {
    ParameterSet<double> p{{"w", T::constant({1}, 1.0)}};
    auto state = AdamState<double>::init(p);
    adam_step(state, p, gradients({{"w", T::constant({1}, 1.0)}}));
    CHECK(p.at("w")[0] == doctest::Approx(0.999).epsilon(1e-9));
  }
  SUBCASE("two steps match a scripted oracle") {
    ParameterSet<double> p{{"w", T({3}, {1.0, -2.0, 0.5})}};
    auto state = AdamState<double>::init(p, 0.01, 0.8, 0.95, 1e-7);
    ScriptedAdam oracle{0.01, 0.8, 0.95, 1e-7, {}, {}, 0};
    std::vector<double> q{1.0, -2.0, 0.5};
    const std::vector<double> g{0.3, -1.2, 2e-4};
    for (int step = 0; step < 2; ++step) {
      adam_step(state, p, gradients({{"w", T({3}, {g[0], g[1], g[2]})}}));
      oracle.step(q, g);
    }
    for (Index i = 0; i < 3; ++i) CHECK(std::abs(p.at("w")[i] - q[static_cast<std::size_t>(i)]) < 1e-12);
    CHECK(state.first_moment.at("w").shape() == Shape{3});
    CHECK(state.second_moment.at("w").shape() == Shape{3});
  }
  SUBCASE("first update moves against the gradient sign") {
    for (double lr : {1e-6, 1e-3, 0.5}) {
      ParameterSet<double> p{{"w", T::zeros({4})}};
      auto state = AdamState<double>::init(p, lr);
      adam_step(state, p, gradients({{"w", T({4}, {3.0, -0.001, 1e-9, -50.0})}}));
      CHECK(p.at("w")[0] < 0.0);
      CHECK(p.at("w")[1] > 0.0);
      CHECK(p.at("w")[2] < 0.0);
      CHECK(p.at("w")[3] > 0.0);
    }
  }
  SUBCASE("shape mismatch") {
    ParameterSet<double> p{{"w", T::zeros({2})}};
    auto state = AdamState<double>::init(p);
    CHECK_THROWS_AS(adam_step(state, p, gradients({{"w", T::zeros({3})}})), DimensionError);
    CHECK_THROWS_AS(adam_step(state, p, gradients({{"v", T::zeros({2})}})), DimensionError);
  }
}

TEST_CASE("train records one loss per epoch and is deterministic") {
  const WindowSet windows = toy_windows(120);
  TrainConfig config;
  config.epochs = 100;
  config.batch_size = 256;
  config.seed = 4;
  const auto spec = toy_spec();
  int callbacks = 0;
  auto a = train(build_model<double>(spec, 1), windows, config, [&](const EpochLoss&) { ++callbacks; });
  auto b = train(build_model<double>(spec, 1), windows, config);
  REQUIRE(a.trace.size() == 100);
  CHECK(callbacks == 100);
  for (std::size_t e = 0; e < a.trace.size(); ++e) {
    CHECK(a.trace[e].epoch == static_cast<int>(e + 1));
    CHECK(std::isfinite(a.trace[e].train_mse));
    CHECK(std::isfinite(a.trace[e].val_mse));
    CHECK(a.trace[e].train_mse == b.trace[e].train_mse);
    CHECK(a.trace[e].val_mse == b.trace[e].val_mse);
  }
  double best = a.trace[0].val_mse;
  for (const auto& e : a.trace) best = std::min(best, e.val_mse);
  CHECK(a.trace[static_cast<std::size_t>(a.best_epoch - 1)].val_mse == best);
  CHECK(evaluate_loss(a.best_model, windows.subset(windows.size() - validation_count(windows.size(), 0.1),
                                                   validation_count(windows.size(), 0.1))) ==
        doctest::Approx(best).epsilon(1e-12));

  std::ostringstream csv;
  write_loss_csv(a.trace, csv);
  const std::string text = csv.str();
  CHECK(text.rfind("epoch,train_mse,val_mse\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 101);
}

TEST_CASE("identity toy task converges") {
  TrainConfig config;
  config.epochs = 300;
  config.batch_size = 32;
  config.learning_rate = 5e-3;
  config.validation_fraction = 0.0;
  auto result = train(build_model<double>(toy_spec(), 2), toy_windows(400), config);
  CHECK(result.trace.back().train_mse < 1e-3);
  CHECK(result.trace.back().train_mse < result.trace.front().train_mse);
}

TEST_CASE("32-bit training also runs") {
  TrainConfig config;
  config.epochs = 3;
  auto result = train(build_model<float>(stimpute::testing::tiny_spec(Variant::kCnnBiLstmRes), 2), toy_windows(60),
                      config);
  CHECK(result.trace.size() == 3);
  CHECK(std::isfinite(result.trace.back().val_mse));
}

TEST_CASE("training errors") {
  TrainConfig config;
  config.epochs = 2;
  const auto spec = toy_spec();
  SUBCASE("empty window set") {
    CHECK_THROWS_AS(train(build_model<double>(spec, 1), toy_windows(60).subset(0, 0), config), ContractError);
  }
  SUBCASE("non-finite input aborts with the epoch and batch") {
    WindowSet windows = toy_windows(60);
    windows.corrupted(5, 2) = std::nan("");
    try {
      train(build_model<double>(spec, 1), windows, config);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(e.epoch() == 1);
      CHECK(e.batch() == 0);
      CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
  }
  SUBCASE("window width mismatch") {
    CHECK_THROWS_AS(train(build_model<double>(spec, 1), toy_windows(60, 3), config), DimensionError);
  }
  SUBCASE("bad config") {
    config.learning_rate = 0.0;
    CHECK_THROWS_AS(train(build_model<double>(spec, 1), toy_windows(60), config), ConfigError);
  }
}
