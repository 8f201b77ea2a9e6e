#include <doctest.h>

#include "stimpute/container.hpp"
#include "stimpute/model.hpp"
#include "support/oracles.hpp"

using namespace stimpute;
using stimpute::testing::model_gradient_error;
using stimpute::testing::random_tensor;
using T = Tensor<double>;

namespace {

LstmWeights<double> constant_weights(ad::Graph<double>& g, Index in, Index units, double forget_bias = 0.0) {
  T bias = T::zeros({4 * units});
  for (Index u = 0; u < units; ++u) bias[units + u] = forget_bias;
  return {g.constant(T::zeros({in, 4 * units})), g.constant(T::zeros({units, 4 * units})), g.constant(bias)};
}

LstmWeights<double> random_weights(ad::Graph<double>& g, Index in, Index units, Rng& rng) {
  return {g.constant(random_tensor({in, 4 * units}, rng)), g.constant(random_tensor({units, 4 * units}, rng)),
          g.constant(random_tensor({4 * units}, rng))};
}

double max_abs_diff(const T& a, const T& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.data() - b.data()).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("default specs") {
  const auto fc = ModelSpec::defaults(Variant::kFcNn);
  auto model = build_model<double>(fc, 1);
  const std::vector<std::pair<Index, Index>> widths = {{60, 32}, {32, 16}, {16, 12}, {12, 16}, {16, 32}};
  for (std::size_t k = 0; k < widths.size(); ++k) {
    CHECK(model.parameters.at("dense_" + std::to_string(k) + "/kernel").shape() ==
          Shape{widths[k].first, widths[k].second});
  }
  CHECK(model.parameters.at("output/kernel").shape() == Shape{32, 60});
  CHECK(fc.latent_size() == 12);

  CHECK(ModelSpec::defaults(Variant::kCnnBiLstm).conv_channels() == 32);
  CHECK(ModelSpec::defaults(Variant::kLstm).lstm_units == 32);
  CHECK(ModelSpec::defaults(Variant::kBiLstm).lstm_units == 16);
  CHECK(ModelSpec::defaults(Variant::kBiLstm).latent_size() == 64);
  CHECK(ModelSpec::defaults(Variant::kCnnBiLstm).latent_size() == 64);
  CHECK(ModelSpec::defaults(Variant::kCnnBiLstmRes).latent_size() == 64);
  CHECK(ModelSpec::defaults(Variant::kLstm).latent_size() == 64);
  for (Variant v : kAllVariants) {
    CHECK(ModelSpec::defaults(v).dropout == 0.2);
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("transformer"), ConfigError);
}

TEST_CASE("residual kernel only when widths differ") {
  auto spec = ModelSpec::defaults(Variant::kCnnBiLstmRes);
  CHECK(build_model<double>(spec, 1).parameters.count("residual/kernel") == 0);
  spec.filters_per_kernel = 5;
  CHECK(build_model<double>(spec, 1).parameters.at("residual/kernel").shape() == Shape{20, 32});
}

TEST_CASE("same spec and seed give identical parameters") {
  for (Variant v : kAllVariants) {
    const auto spec = ModelSpec::defaults(v);
    const auto a = build_model<double>(spec, 42);
    const auto b = build_model<double>(spec, 42);
    const auto c = build_model<double>(spec, 43);
    CHECK(a.parameter_count() == c.parameter_count());
    bool any_different = false;
    for (const auto& [name, t] : a.parameters) {
      CHECK(t.data() == b.parameters.at(name).data());
      any_different = any_different || t.data() != c.parameters.at(name).data();
    }
    CHECK(any_different);
  }
}

TEST_CASE("invalid specs are configuration errors") {
  auto spec = ModelSpec::defaults(Variant::kFcNn);
  spec.hidden_layers = {};
  CHECK_THROWS_AS(build_model<double>(spec, 0), ConfigError);
  spec = ModelSpec::defaults(Variant::kCnnBiLstm);
  spec.kernel_widths = {1, 7};
  CHECK_THROWS_AS(build_model<double>(spec, 0), ConfigError);
  spec = ModelSpec::defaults(Variant::kBiLstm);
  spec.lstm_units = 0;
  CHECK_THROWS_AS(build_model<double>(spec, 0), ConfigError);
  spec = ModelSpec::defaults(Variant::kBiLstm);
  spec.dropout = 1.0;
  CHECK_THROWS_AS(build_model<double>(spec, 0), ConfigError);
  spec = ModelSpec::defaults(Variant::kBiLstm, {0, 6, 1});
  CHECK_THROWS_AS(build_model<double>(spec, 0), ConfigError);
}

TEST_CASE("lstm cell") {
  ad::Graph<double> g;
  SUBCASE("zero parameters and state give zero output") {
    auto w = constant_weights(g, 3, 4);
    auto s = lstm_cell_step(g.constant(T::constant({2, 3}, 0.7)), zero_state(g, 2, 4), w);
    CHECK(s.h.value().data().isZero());
    CHECK(s.c.value().data().isZero());
  }
  SUBCASE("saturated forget gate keeps the cell") {
    Rng rng(1);
    auto w = constant_weights(g, 3, 4, 50.0);
    LstmState<double> prev{g.constant(random_tensor({2, 4}, rng)), g.constant(random_tensor({2, 4}, rng))};
    auto s = lstm_cell_step(g.constant(random_tensor({2, 3}, rng)), prev, w);
    CHECK(max_abs_diff(s.c.value(), prev.c.value()) < 1e-8);
  }
  SUBCASE("matches the scalar update") {
    Rng rng(5);
    auto w = random_weights(g, 2, 1, rng);
    const T x = random_tensor({1, 2}, rng);
    const double h0 = 0.3, c0 = -0.4;
    auto s = lstm_cell_step(g.constant(x), {g.constant(T::constant({1, 1}, h0)), g.constant(T::constant({1, 1}, c0))},
                            w);
    auto pre = [&](Index gate) {
      return x[0] * w.kernel.value()[gate] + x[1] * w.kernel.value()[4 + gate] + h0 * w.recurrent_kernel.value()[gate] +
             w.bias.value()[gate];
    };
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double c = sig(pre(1)) * c0 + sig(pre(0)) * std::tanh(pre(2));
    CHECK(s.c.value()[0] == doctest::Approx(c).epsilon(1e-12));
    CHECK(s.h.value()[0] == doctest::Approx(sig(pre(3)) * std::tanh(c)).epsilon(1e-12));
  }
  SUBCASE("dimension errors") {
    auto w = constant_weights(g, 3, 4);
    CHECK_THROWS_AS(lstm_cell_step(g.constant(T::zeros({2, 2})), zero_state(g, 2, 4), w), DimensionError);
    CHECK_THROWS_AS(lstm_cell_step(g.constant(T::zeros({2, 3})), zero_state(g, 2, 5), w), DimensionError);
  }
}

TEST_CASE("lstm state sums have correct gradients") {
  Rng rng(8);
  ParameterSet<double> p{{"k", random_tensor({2, 12}, rng)},
                         {"r", random_tensor({3, 12}, rng)},
                         {"b", random_tensor({12}, rng)},
                         {"x", random_tensor({2, 2}, rng)}};
  CHECK(stimpute::testing::max_gradient_error(p, [](ad::Graph<double>& g, const BoundParameters<double>& b) {
          LstmWeights<double> w{b.at("k"), b.at("r"), b.at("b")};
          std::vector<ad::Var<double>> seq{b.at("x"), ad::tanh(b.at("x")), b.at("x")};
          auto r = lstm_forward(seq, w);
          return ad::sum(r.final_state.h) + ad::sum(r.final_state.c) + ad::sum(ad::square(r.outputs[0]));
        }) < 1e-3);
}

TEST_CASE("bilstm") {
  ad::Graph<double> g;
  Rng rng(13);
  SUBCASE("single step") {
    auto r = bilstm_forward<double>({g.constant(random_tensor({2, 3}, rng))}, random_weights(g, 3, 4, rng),
                                    random_weights(g, 3, 4, rng));
    REQUIRE(r.outputs.size() == 1);
    CHECK(r.outputs[0].shape() == Shape{2, 8});
    CHECK(r.latent.shape() == Shape{2, 16});
  }
  SUBCASE("zero parameters give zero outputs") {
    std::vector<ad::Var<double>> seq;
    for (int t = 0; t < 4; ++t) seq.push_back(g.constant(random_tensor({2, 3}, rng)));
    auto r = bilstm_forward(seq, constant_weights(g, 3, 4), constant_weights(g, 3, 4));
    for (const auto& o : r.outputs) CHECK(o.value().data().isZero());
  }
  SUBCASE("empty sequence") {
    CHECK_THROWS_AS(bilstm_forward<double>({}, constant_weights(g, 3, 4), constant_weights(g, 3, 4)), ContractError);
  }
  SUBCASE("latent layout is h_fw, c_fw, h_bw, c_bw") {
    std::vector<ad::Var<double>> seq;
    for (int t = 0; t < 3; ++t) seq.push_back(g.constant(random_tensor({1, 2}, rng)));
    auto r = bilstm_forward(seq, random_weights(g, 2, 3, rng), random_weights(g, 2, 3, rng));
    const auto& z = r.latent.value();
    for (Index u = 0; u < 3; ++u) {
      CHECK(z[u] == r.forward_final.h.value()[u]);
      CHECK(z[3 + u] == r.forward_final.c.value()[u]);
      CHECK(z[6 + u] == r.backward_final.h.value()[u]);
      CHECK(z[9 + u] == r.backward_final.c.value()[u]);
    }
    CHECK(r.outputs[2].value().data().head(3) == r.forward_final.h.value().data());
    CHECK(r.outputs[0].value().data().tail(3) == r.backward_final.h.value().data());
  }
  SUBCASE("reversing the sequence swaps the directions") {
    auto a = random_weights(g, 3, 4, rng);
    auto b = random_weights(g, 3, 4, rng);
    std::vector<ad::Var<double>> seq;
    for (int t = 0; t < 5; ++t) seq.push_back(g.constant(random_tensor({2, 3}, rng)));
    std::vector<ad::Var<double>> reversed(seq.rbegin(), seq.rend());
    auto r = bilstm_forward(seq, a, b);
    auto q = bilstm_forward(reversed, b, a);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const auto& o = r.outputs[seq.size() - 1 - t].value();
      const auto& p = q.outputs[t].value();
      for (Index row = 0; row < 2; ++row) {
        CHECK((p.matrix().row(row).head(4) - o.matrix().row(row).tail(4)).cwiseAbs().maxCoeff() < 1e-14);
        CHECK((p.matrix().row(row).tail(4) - o.matrix().row(row).head(4)).cwiseAbs().maxCoeff() < 1e-14);
      }
    }
  }
}

TEST_CASE("forward keeps the window shape for every variant") {
  const InputDims dims{9, 6, 1};
  Rng rng(3);
  const T window = random_tensor({9, 6, 1}, rng, 0.0, 1.0);
  for (Variant v : kAllVariants) {
    CAPTURE(to_string(v));
    const auto spec = ModelSpec::defaults(v, dims);
    const auto model = build_model<double>(spec, 5);
    Rng unused(0);
    auto [recon, latent] = forward(model, window, false, unused);
    CHECK(recon.shape() == window.shape());
    CHECK(latent.size() == spec.latent_size());
    auto [again, latent_again] = forward(model, window, false, unused);
    CHECK(again.data() == recon.data());
    CHECK(latent_again.data() == latent.data());

    auto [batch_recon, batch_latent] = infer(model, random_tensor({4, dims.flat()}, rng));
    CHECK(batch_recon.shape() == Shape{4, 54});
    CHECK(batch_latent.shape() == Shape{4, spec.latent_size()});

    CHECK_THROWS_AS(forward(model, T::zeros({9, 5, 1}), false, unused), DimensionError);
    CHECK_THROWS_AS(infer(model, T::zeros({1, 60})), DimensionError);
  }
}

TEST_CASE("dropout only acts in training mode") {
  const auto model = build_model<double>(ModelSpec::defaults(Variant::kBiLstm, {4, 6, 1}), 2);
  Rng rng(1);
  const T window = random_tensor({4, 6, 1}, rng, 0.0, 1.0);
  Rng a(7), b(7), c(8);
  auto [ta, la] = forward(model, window, true, a);
  auto [tb, lb] = forward(model, window, true, b);
  auto [tc, lc] = forward(model, window, true, c);
  auto [inf, li] = forward(model, window, false, c);
  CHECK(ta.data() == tb.data());
  CHECK(ta.data() != tc.data());
  CHECK(ta.data() != inf.data());
}

TEST_CASE("residual path alone is conv then dense") {
  const InputDims dims{3, 6, 1};
  const auto spec = ModelSpec::defaults(Variant::kCnnBiLstmRes, dims);
  auto model = build_model<double>(spec, 9);
  for (auto& [name, t] : model.parameters) {
    if (name.rfind("encoder", 0) == 0 || name.rfind("decoder", 0) == 0) t = T::zeros(t.shape());
  }
  Rng rng(2);
  const T batch = random_tensor({2, dims.flat()}, rng, 0.0, 1.0);
  const T actual = infer(model, batch).first;

  ad::Graph<double> g;
  auto image = g.constant(batch.reshaped({2, 3, 6, 1}));
  std::vector<ad::Var<double>> maps;
  for (std::size_t k = 0; k < spec.kernel_widths.size(); ++k) {
    const std::string prefix = "conv_" + std::to_string(k);
    maps.push_back(ad::leaky_relu(ad::conv_time(image, g.constant(model.parameters.at(prefix + "/kernel")),
                                                g.constant(model.parameters.at(prefix + "/bias"))),
                                  spec.leaky_alpha));
  }
  const Eigen::MatrixXd features = ad::concat(maps, 3).value().reshaped({2 * 6, 32}).matrix();
  const Eigen::MatrixXd kernel = model.parameters.at("output/kernel").matrix();
  const Eigen::RowVectorXd bias = model.parameters.at("output/bias").data().transpose();
  for (Index n = 0; n < 2; ++n) {
    for (Index t = 0; t < 6; ++t) {
      const Eigen::RowVectorXd step = features.row(n * 6 + t) * kernel + bias;
      for (Index i = 0; i < 3; ++i) CHECK(actual.at({n, i * 6 + t}) == doctest::Approx(step(i)).epsilon(1e-12));
    }
  }
}

TEST_CASE("checkpoint container") {
  for (Variant v : kAllVariants) {
    const auto model = build_model<double>(ModelSpec::defaults(v), 17);
    const auto bytes = to_container(model).serialize();
    CHECK(bytes == to_container(build_model<double>(ModelSpec::defaults(v), 17)).serialize());
    const auto restored = model_from_container<double>(Container::deserialize(bytes));
    CHECK(restored.spec == model.spec);
    CHECK(restored.seed == model.seed);
    for (const auto& [name, t] : model.parameters) CHECK(restored.parameters.at(name).data() == t.data());
    CHECK(to_container(restored).serialize() == bytes);
  }
  const auto f32 = build_model<float>(ModelSpec::defaults(Variant::kFcNn), 3);
  const auto back = model_from_container<float>(Container::deserialize(to_container(f32).serialize()));
  CHECK(back.parameters.at("dense_0/kernel").data() == f32.parameters.at("dense_0/kernel").data());

  CHECK_THROWS_AS(Container::deserialize("not a container"), ParseError);
  auto bytes = to_container(f32).serialize();
  CHECK_THROWS_AS(Container::deserialize(bytes.substr(0, bytes.size() / 2)), ParseError);
}

TEST_CASE("model gradients match central differences") {
  for (Variant v : kAllVariants) {
    for (bool training : {false, true}) {
      CAPTURE(to_string(v));
      CAPTURE(training);
      CHECK(model_gradient_error(v, training) < 1e-3);
    }
  }
}
