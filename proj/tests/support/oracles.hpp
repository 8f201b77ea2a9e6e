#ifndef STIMPUTE_TESTS_ORACLES_HPP
#define STIMPUTE_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stimpute/layers.hpp"
#include "stimpute/model.hpp"

namespace stimpute::testing {

using LossFn = std::function<ad::Var<double>(ad::Graph<double>&, const BoundParameters<double>&)>;

/// Largest elementwise relative error between backward() and central differences.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline double max_gradient_error(ParameterSet<double> params, const LossFn& loss_fn, double eps = 1e-4,
                                 double floor = 1e-4) {
  ad::Graph<double> graph;
  const auto bound = bind_parameters(graph, params, true);
  const auto grads = graph.backward(loss_fn(graph, bound));
  auto eval = [&] {
    ad::Graph<double> g;
    return loss_fn(g, bind_parameters(g, params, false)).value()[0];
  };
  double worst = 0.0;
  for (auto& [name, tensor] : params) {
    const auto& analytic = grads.at(name);
    for (Index i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + eps;
      const double up = eval();
      tensor[i] = saved - eps;
      const double down = eval();
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Finite-difference errors of each autodiff primitive on small random inputs.
inline std::vector<std::pair<std::string, double>> primitive_gradient_errors() {
  Rng rng(11);
  ParameterSet<double> p{{"a", random_tensor({3, 4}, rng)},
                         {"b", random_tensor({4, 2}, rng)},
                         {"c", random_tensor({3, 4}, rng)},
                         {"bias", random_tensor({4}, rng)}};
  using Fn = std::function<ad::Var<double>(ad::Graph<double>&, const BoundParameters<double>&)>;
  auto at = [](const BoundParameters<double>& b, const char* n) { return b.at(n); };
  const std::vector<std::pair<const char*, Fn>> cases = {
      {"matmul", [&](auto&, const auto& b) { return ad::sum(ad::square(ad::matmul(at(b, "a"), at(b, "b")))); }},
      {"add", [&](auto&, const auto& b) { return ad::sum(ad::square(at(b, "a") + at(b, "c"))); }},
      {"sub", [&](auto&, const auto& b) { return ad::sum(ad::square(at(b, "a") - at(b, "c"))); }},
      {"multiply", [&](auto&, const auto& b) { return ad::sum(at(b, "a") * at(b, "c")); }},
      {"scale", [&](auto&, const auto& b) { return ad::sum(ad::square(0.3 * at(b, "a"))); }},
      {"add_bias", [&](auto&, const auto& b) { return ad::sum(ad::square(ad::add_bias(at(b, "a"), at(b, "bias")))); }},
      {"leaky_relu", [&](auto&, const auto& b) { return ad::sum(ad::square(ad::leaky_relu(at(b, "a"), 0.01))); }},
      {"sigmoid", [&](auto&, const auto& b) { return ad::sum(ad::square(ad::sigmoid(at(b, "a")))); }},
      {"tanh", [&](auto&, const auto& b) { return ad::sum(ad::square(ad::tanh(at(b, "a")))); }},
      {"mean", [&](auto&, const auto& b) { return ad::mean(ad::square(at(b, "a"))); }},
      {"reshape", [&](auto&, const auto& b) {
         return ad::sum(ad::square(ad::matmul(ad::reshape(at(b, "a"), {4, 3}), ad::reshape(at(b, "c"), {3, 4}))));
       }},
      {"concat axis 0", [&](auto&, const auto& b) {
         return ad::sum(ad::square(ad::matmul(ad::concat<double>({at(b, "a"), at(b, "c")}, 0), at(b, "b"))));
       }},
      {"concat axis 1", [&](auto&, const auto& b) {
         return ad::sum(ad::tanh(ad::concat<double>({at(b, "a"), at(b, "c"), at(b, "a")}, 1)));
       }},
      {"slice", [&](auto&, const auto& b) {
         return ad::sum(ad::square(ad::slice(at(b, "a"), 1, 1, 2))) + ad::sum(ad::slice(at(b, "c"), 0, 2, 1));
       }},
      {"select_columns", [&](auto&, const auto& b) {
         return ad::sum(ad::square(ad::select_columns(at(b, "a"), {3, 0, 0, 2})));
       }},
      {"dropout replay", [&](auto&, const auto& b) {
         Rng replay(5);
         return ad::sum(ad::square(ad::dropout(at(b, "a"), 0.5, true, replay)));
       }},
  };
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [name, fn] : cases) out.emplace_back(name, max_gradient_error(p, fn));
  for (Index m : {1, 2, 3}) {
    ParameterSet<double> q{{"x", random_tensor({3, 4, 2}, rng)},
                           {"xb", random_tensor({2, 3, 4, 2}, rng)},
                           {"k", random_tensor({3, m, 2, 3}, rng)},
                           {"b", random_tensor({3}, rng)}};
    out.emplace_back("conv_time m=" + std::to_string(m), max_gradient_error(q, [](auto&, const BoundParameters<double>& b) {
                       return ad::sum(ad::square(ad::conv_time(b.at("x"), b.at("k"), b.at("b")))) +
                              ad::sum(ad::tanh(ad::conv_time(b.at("xb"), b.at("k"), b.at("b"))));
                     }));
  }
  return out;
}

/// Tiny specs (s = 2, w = 3, 3 units) for gradient checks.
inline ModelSpec tiny_spec(Variant variant) {
  ModelSpec spec = ModelSpec::defaults(variant, {2, 3, 1});
  spec.hidden_layers = {4, 3, 4};
  spec.kernel_widths = {1, 2};
  spec.filters_per_kernel = 2;
  spec.lstm_units = 3;
  return spec;
}

/// Gradient check of a full model: masked MSE of the reconstruction plus the mean squared latent.
/// With `training`, dropout masks are replayed from a fixed seed on every evaluation.
inline double model_gradient_error(Variant variant, bool training, std::uint64_t seed = 7) {
  const ModelSpec spec = tiny_spec(variant);
  auto model = build_model<double>(spec, seed);
  Rng data_rng(seed + 1);
  // Perturb biases away from zero so every parameter gets a generic gradient.
  for (auto& [name, t] : model.parameters)
    for (Index i = 0; i < t.size(); ++i) t[i] += data_rng.uniform(-0.2, 0.2);
  const Index batch = 3;
  const auto input = random_tensor({batch, spec.input.flat()}, data_rng, 0.0, 1.0);
  const auto target = random_tensor({batch, spec.input.flat()}, data_rng, 0.0, 1.0);
  auto valid = Tensor<double>::constant({batch, spec.input.flat()}, 1.0);
  valid[1] = 0.0;
  LossFn fn = [&](ad::Graph<double>& g, const BoundParameters<double>& params) {
    Rng dropout_rng(seed + 2);
    auto out = forward(model, params, g.constant(input), training, dropout_rng);
    auto diff = out.reconstruction - g.constant(target);
    auto masked = diff * g.constant(valid);
    return ad::sum(ad::square(masked)) + ad::mean(ad::square(out.latent));
  };
  return max_gradient_error(model.parameters, fn);
}

/// Minimum-cost alignment by enumerating every monotone warping path from (0,0) to (n-1,m-1).
inline double brute_force_dtw(const std::vector<double>& a, const std::vector<double>& b) {
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double cost) {
    cost += std::abs(a[i] - b[j]);
    if (i + 1 == a.size() && j + 1 == b.size()) {
      best = std::min(best, cost);
      return;
    }
    if (i + 1 < a.size()) walk(i + 1, j, cost);
    if (j + 1 < b.size()) walk(i, j + 1, cost);
    if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, cost);
  };
  walk(0, 0, 0.0);
  return best;
}

/// Every sequence of length 1..max_len over `alphabet`.
inline std::vector<std::vector<double>> all_sequences(std::size_t max_len, const std::vector<double>& alphabet) {
  std::vector<std::vector<double>> out;
  std::vector<std::vector<double>> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<double>> next;
    for (const auto& s : frontier)
      for (double v : alphabet) {
        auto e = s;
        e.push_back(v);
        next.push_back(e);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

/// Adam written out scalar by scalar, independent of the library.
struct ScriptedAdam {
  double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int t = 0;

  void step(std::vector<double>& p, const std::vector<double>& g) {
    if (m.empty()) m.assign(p.size(), 0.0), v.assign(p.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / (1.0 - std::pow(b1, t));
      const double vhat = v[i] / (1.0 - std::pow(b2, t));
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
};

/// k nearest rows by full scan: sort all (squared distance, index) pairs.
inline std::vector<Index> full_scan_knn(const Eigen::MatrixXd& reference, const Eigen::RowVectorXd& q, Index k) {
  std::vector<std::pair<double, Index>> all;
  for (Index r = 0; r < reference.rows(); ++r) all.emplace_back((reference.row(r) - q).squaredNorm(), r);
  std::sort(all.begin(), all.end());
  std::vector<Index> out;
  for (Index i = 0; i < k; ++i) out.push_back(all[static_cast<std::size_t>(i)].second);
  return out;
}

/// Windows with deliberate exact duplicates so that distance ties occur.
inline Eigen::MatrixXd tied_points(Index n, Index d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(n, d);
  for (Index r = 0; r < n; ++r) {
    if (r % 7 == 3 && r > 10) {
      m.row(r) = m.row(r - 10);
      continue;
    }
    for (Index c = 0; c < d; ++c) m(r, c) = static_cast<double>(rng.uniform_int(0, 3));
  }
  return m;
}

}  // namespace stimpute::testing

#endif  // STIMPUTE_TESTS_ORACLES_HPP
