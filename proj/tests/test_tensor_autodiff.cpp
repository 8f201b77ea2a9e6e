#include <doctest.h>

#include <thread>

#include "stimpute/autodiff.hpp"
#include "support/oracles.hpp"

using namespace stimpute;
using stimpute::testing::max_gradient_error;
using stimpute::testing::primitive_gradient_errors;
using stimpute::testing::random_tensor;
using T = Tensor<double>;
using V = ad::Var<double>;

namespace {

constexpr double kGradTol = 1e-3;

T values(Shape shape, std::initializer_list<double> v) { return T(std::move(shape), v); }

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  T t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.matrix().rows() == 2);
  T scalar(Shape{});
  CHECK(scalar.size() == 1);
  CHECK_FALSE(scalar.empty());
  CHECK(T().empty());
  CHECK_THROWS_AS(T({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  auto r = values({2, 2}, {1, 2, 3, 4});
  CHECK(r.at({1, 0}) == 3.0);
  CHECK(r.reshaped({4})[3] == 4.0);
  CHECK_THROWS_AS(r.reshaped({3}), DimensionError);
}

TEST_CASE("matmul") {
  ad::Graph<double> g;
  auto id = g.constant(values({2, 2}, {1, 0, 0, 1}));
  auto m = g.constant(values({2, 2}, {1, 2, 3, 4}));
  CHECK(ad::matmul(id, m).value().data() == m.value().data());

  auto row = g.constant(values({1, 2}, {1, 2}));
  auto col = g.constant(values({2, 1}, {3, 4}));
  CHECK(ad::matmul(row, col).value()[0] == 11.0);

  auto zeros = g.constant(T::zeros({2, 3}));
  auto any = g.constant(T::constant({3, 4}, 5.0));
  auto z = ad::matmul(zeros, any);
  CHECK(z.shape() == Shape{2, 4});
  CHECK(z.value().data().isZero());

  try {
    ad::matmul(row, m.graph->constant(T::zeros({3, 2})));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x2]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("elementwise definitions") {
  ad::Graph<double> g;
  auto x = g.constant(values({3}, {-1, 0, 2}));
  auto y = ad::leaky_relu(x, 0.01);
  CHECK(y.value()[0] == doctest::Approx(-0.01));
  CHECK(y.value()[1] == 0.0);
  CHECK(y.value()[2] == 2.0);
  CHECK(ad::sigmoid(g.constant(T::zeros({1}))).value()[0] == 0.5);
  CHECK(ad::tanh(g.constant(T::zeros({1}))).value()[0] == 0.0);
  CHECK_THROWS_AS(ad::add(x, g.constant(T::zeros({2}))), DimensionError);
  CHECK_THROWS_AS(ad::multiply(x, g.constant(T::zeros({2}))), DimensionError);

  auto big = ad::sigmoid(g.constant(values({2}, {-800, 800})));
  CHECK(big.value().all_finite());
  CHECK(big.value()[0] == doctest::Approx(0.0));
  CHECK(big.value()[1] == doctest::Approx(1.0));
}

TEST_CASE("leaky relu gradient at zero is alpha") {
  ad::Graph<double> g;
  auto p = g.parameter("p", values({3}, {-1, 0, 2}));
  auto grads = g.backward(ad::sum(ad::leaky_relu(p, 0.25)));
  CHECK(grads.at("p")[0] == 0.25);
  CHECK(grads.at("p")[1] == 0.25);
  CHECK(grads.at("p")[2] == 1.0);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    ad::Graph<double> g;
    auto p = g.parameter("p", T::constant({2, 3}, 0.7));
    auto grads = g.backward(ad::sum(p));
    CHECK(grads.at("p").shape() == Shape{2, 3});
    CHECK(grads.at("p").data().isOnes());
  }
  SUBCASE("sum of squares") {
    ad::Graph<double> g;
    auto p = g.parameter("p", values({2}, {1, 2}));
    auto grads = g.backward(ad::sum(ad::square(p)));
    CHECK(grads.at("p")[0] == 2.0);
    CHECK(grads.at("p")[1] == 4.0);
  }
  SUBCASE("graph without ops gives zero gradients") {
    ad::Graph<double> g;
    auto p = g.parameter("p", T::constant({1}, 3.0));
    auto q = g.parameter("q", T::constant({2}, 1.0));
    auto grads = g.backward(p);
    CHECK(grads.at("p")[0] == 1.0);
    CHECK(grads.at("q").data().isZero());
  }
  SUBCASE("non-scalar loss is rejected") {
    ad::Graph<double> g;
    auto p = g.parameter("p", T::constant({2}, 1.0));
    CHECK_THROWS_AS(g.backward(ad::square(p)), ContractError);
  }
  SUBCASE("duplicate parameter names are rejected") {
    ad::Graph<double> g;
    g.parameter("p", T::constant({1}, 1.0));
    CHECK_THROWS_AS(g.parameter("p", T::constant({1}, 1.0)), ContractError);
  }
  SUBCASE("backward can run twice") {
    ad::Graph<double> g;
    auto p = g.parameter("p", values({2}, {1, 2}));
    auto loss = ad::sum(ad::square(p));
    auto first = g.backward(loss);
    auto second = g.backward(loss);
    CHECK(first.at("p").data() == second.at("p").data());
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(3);
  const T init = random_tensor({2, 3}, rng);
  const T w = random_tensor({3, 2}, rng);
  auto grad_of = [&](double a, double b) {
    ad::Graph<double> g;
    auto p = g.parameter("p", init);
    auto f = ad::sum(ad::tanh(ad::matmul(p, g.constant(w))));
    auto h = ad::mean(ad::square(ad::sigmoid(p)));
    return g.backward(a * f + b * h).at("p").data().eval();
  };
  const auto combined = grad_of(2.0, -3.0);
  const auto separate = (2.0 * grad_of(1.0, 0.0) - 3.0 * grad_of(0.0, 1.0)).eval();
  CHECK((combined - separate).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("primitive gradients match central differences") {
  for (const auto& [name, error] : primitive_gradient_errors()) {
    CAPTURE(name);
    CHECK(error < kGradTol);
  }
}

TEST_CASE("conv_time examples") {
  ad::Graph<double> g;
  SUBCASE("zero kernel") {
    auto y = ad::conv_time(g.constant(T::constant({3, 5, 2}, 1.5)), g.constant(T::zeros({3, 2, 2, 4})),
                           g.constant(T::zeros({4})));
    CHECK(y.shape() == Shape{1, 5, 4});
    CHECK(y.value().data().isZero());
  }
  SUBCASE("selector kernel") {
    auto x = g.constant(values({2, 3, 1}, {5, 6, 7, 1, 1, 1}));
    auto y = ad::conv_time(x, g.constant(values({2, 1, 1, 1}, {1, 0})), g.constant(T::zeros({1})));
    CHECK(y.value().data() == values({3}, {5, 6, 7}).data());
  }
  SUBCASE("width 2 pads one step on the right") {
    auto y = ad::conv_time(g.constant(values({1, 3, 1}, {1, 2, 3})), g.constant(values({1, 2, 1, 1}, {1, 1})),
                           g.constant(T::zeros({1})));
    CHECK(y.value().data() == values({3}, {3, 5, 3}).data());
  }
  SUBCASE("output keeps the window length") {
    for (Index m = 1; m <= 6; ++m) {
      auto y = ad::conv_time(g.constant(T::constant({4, 6, 1}, 1.0)), g.constant(T::constant({4, m, 1, 2}, 1.0)),
                             g.constant(T::zeros({2})));
      CHECK(y.shape() == Shape{1, 6, 2});
      CHECK(ad::same_padding(m).left + ad::same_padding(m).right == m - 1);
    }
    CHECK(ad::same_padding(4).left == 1);
    CHECK(ad::same_padding(4).right == 2);
  }
  SUBCASE("errors") {
    auto x = g.constant(T::zeros({2, 3, 1}));
    CHECK_THROWS_AS(ad::conv_time(x, g.constant(T::zeros({2, 4, 1, 1})), g.constant(T::zeros({1}))), ConfigError);
    CHECK_THROWS_AS(ad::conv_time(x, g.constant(T::zeros({2, 2, 2, 1})), g.constant(T::zeros({1}))), DimensionError);
    CHECK_THROWS_AS(ad::conv_time(x, g.constant(T::zeros({3, 2, 1, 1})), g.constant(T::zeros({1}))), DimensionError);
  }
}

TEST_CASE("conv_time gradients, single and batched") {
  Rng rng(21);
  for (Index m : {1, 2, 3}) {
    CAPTURE(m);
    ParameterSet<double> p{{"x", random_tensor({3, 4, 2}, rng)},
                           {"xb", random_tensor({2, 3, 4, 2}, rng)},
                           {"k", random_tensor({3, m, 2, 3}, rng)},
                           {"b", random_tensor({3}, rng)}};
    CHECK(max_gradient_error(p, [](auto&, const BoundParameters<double>& b) {
            return ad::sum(ad::square(ad::conv_time(b.at("x"), b.at("k"), b.at("b")))) +
                   ad::sum(ad::tanh(ad::conv_time(b.at("xb"), b.at("k"), b.at("b"))));
          }) < kGradTol);
  }
}

TEST_CASE("batched conv_time equals per-window conv_time") {
  Rng rng(4);
  const T xb = random_tensor({2, 3, 5, 1}, rng);
  const T k = random_tensor({3, 3, 1, 2}, rng);
  const T b = random_tensor({2}, rng);
  ad::Graph<double> g;
  auto batched = ad::conv_time(g.constant(xb), g.constant(k), g.constant(b)).value();
  for (Index n = 0; n < 2; ++n) {
    T single({3, 5, 1}, xb.data().segment(n * 15, 15));
    auto y = ad::conv_time(g.constant(single), g.constant(k), g.constant(b)).value();
    CHECK((y.data() - batched.data().segment(n * 10, 10)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("concat") {
  ad::Graph<double> g;
  std::vector<V> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(g.constant(T::constant({1, 6, 8}, i)));
  auto all = ad::concat(parts, 2);
  CHECK(all.shape() == Shape{1, 6, 32});
  CHECK(all.value().at({0, 2, 17}) == 2.0);
  auto one = ad::concat<double>({parts[1]}, 2);
  CHECK(one.value().data() == parts[1].value().data());
  CHECK_THROWS_AS(ad::concat<double>({g.constant(T::zeros({1, 6, 8})), g.constant(T::zeros({1, 5, 8}))}, 2),
                  DimensionError);
}

TEST_CASE("dropout") {
  ad::Graph<double> g;
  Rng rng(9);
  auto x = g.constant(T::constant({50, 40}, 2.0));
  CHECK(ad::dropout(x, 0.0, true, rng).value().data() == x.value().data());
  CHECK(ad::dropout(x, 0.2, false, rng).value().data() == x.value().data());
  Rng a(17), b(17);
  auto first = ad::dropout(x, 0.5, true, a).value();
  auto second = ad::dropout(x, 0.5, true, b).value();
  CHECK(first.data() == second.data());
  const double zeros = (first.data().array() == 0.0).cast<double>().mean();
  CHECK(zeros == doctest::Approx(0.5).epsilon(0.05));
  CHECK(((first.data().array() == 0.0) || (first.data().array() == 4.0)).all());
  CHECK_THROWS_AS(ad::dropout(x, 1.0, true, rng), ConfigError);
  CHECK_THROWS_AS(ad::dropout(x, -0.1, true, rng), ConfigError);
}

TEST_CASE("identical inputs give bitwise identical results, also across threads") {
  Rng rng(2);
  const T a = random_tensor({5, 4}, rng);
  const T w = random_tensor({4, 3}, rng);
  auto run = [&] {
    ad::Graph<double> g;
    auto p = g.parameter("w", w);
    auto loss = ad::mean(ad::square(ad::tanh(ad::matmul(g.constant(a), p))));
    auto grads = g.backward(loss);
    return std::make_pair(loss.value()[0], grads.at("w").data().eval());
  };
  const auto reference = run();
  std::vector<std::pair<double, Eigen::VectorXd>> results(4);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < results.size(); ++i) threads.emplace_back([&, i] { results[i] = run(); });
  for (auto& t : threads) t.join();
  for (const auto& r : results) {
    CHECK(r.first == reference.first);
    CHECK(r.second == reference.second);
  }
}
