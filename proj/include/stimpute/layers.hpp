#ifndef STIMPUTE_LAYERS_HPP
#define STIMPUTE_LAYERS_HPP

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "stimpute/autodiff.hpp"

namespace stimpute {

template <typename Scalar>
using ParameterSet = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
using BoundParameters = std::map<std::string, ad::Var<Scalar>>;

/// Registers every tensor of `params` on the graph, as trainable leaves or as constants.
template <typename Scalar>
BoundParameters<Scalar> bind_parameters(ad::Graph<Scalar>& graph, const ParameterSet<Scalar>& params, bool trainable) {
  BoundParameters<Scalar> bound;
  for (const auto& [name, value] : params) {
    bound.emplace(name, trainable ? graph.parameter(name, value) : graph.constant(value));
  }
  return bound;
}

template <typename Scalar>
const ad::Var<Scalar>& lookup(const BoundParameters<Scalar>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

/// Glorot-uniform initialisation with limit sqrt(6 / (fan_in + fan_out)).
template <typename Scalar>
Tensor<Scalar> glorot_uniform(Shape shape, Index fan_in, Index fan_out, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
  return t;
}

template <typename Scalar>
ad::Var<Scalar> dense(ad::Var<Scalar> x, ad::Var<Scalar> kernel, ad::Var<Scalar> bias) {
  return ad::add_bias(ad::matmul(x, kernel), bias);
}

/// Hidden and cell state of one LSTM direction, each [batch, units].
template <typename Scalar>
struct LstmState {
  ad::Var<Scalar> h;
  ad::Var<Scalar> c;
};

/// Gate layout along the 4*units axis is (input, forget, candidate, output).
template <typename Scalar>
struct LstmWeights {
  ad::Var<Scalar> kernel;            // [in, 4*units]
  ad::Var<Scalar> recurrent_kernel;  // [units, 4*units]
  ad::Var<Scalar> bias;              // [4*units]

  Index units() const { return recurrent_kernel.shape()[0]; }

  static LstmWeights from(const BoundParameters<Scalar>& params, const std::string& prefix) {
    return {lookup(params, prefix + "/kernel"), lookup(params, prefix + "/recurrent_kernel"),
            lookup(params, prefix + "/bias")};
  }
};

template <typename Scalar>
void init_lstm_parameters(ParameterSet<Scalar>& params, const std::string& prefix, Index inputs, Index units,
                          Rng& rng) {
  params[prefix + "/kernel"] = glorot_uniform<Scalar>({inputs, 4 * units}, inputs, 4 * units, rng);
  params[prefix + "/recurrent_kernel"] = glorot_uniform<Scalar>({units, 4 * units}, units, 4 * units, rng);
  params[prefix + "/bias"] = Tensor<Scalar>::zeros({4 * units});
}

template <typename Scalar>
LstmState<Scalar> zero_state(ad::Graph<Scalar>& graph, Index batch, Index units) {
  return {graph.constant(Tensor<Scalar>::zeros({batch, units})), graph.constant(Tensor<Scalar>::zeros({batch, units}))};
}

/**
 * One LSTM update:
 *   i = sigmoid(.), f = sigmoid(.), g = tanh(.), o = sigmoid(.)
 *   c' = f * c + i * g
 *   h' = o * tanh(c')
 * where each pre-activation is x W + h U + b restricted to that gate's block.
 */
template <typename Scalar>
LstmState<Scalar> lstm_cell_step(ad::Var<Scalar> x, const LstmState<Scalar>& prev, const LstmWeights<Scalar>& w) {
  const Index units = w.units();
  if (x.value().rank() != 2 || x.shape()[1] != w.kernel.shape()[0]) {
    throw DimensionError("lstm step: input " + shape_string(x.shape()) + " does not match kernel " +
                         shape_string(w.kernel.shape()));
  }
  if (prev.h.shape() != Shape{x.shape()[0], units} || prev.c.shape() != prev.h.shape()) {
    throw DimensionError("lstm step: state " + shape_string(prev.h.shape()) + " does not match " +
                         std::to_string(units) + " units");
  }
  auto gates = ad::add_bias(ad::matmul(x, w.kernel) + ad::matmul(prev.h, w.recurrent_kernel), w.bias);
  auto input_gate = ad::sigmoid(ad::slice(gates, 1, 0, units));
  auto forget_gate = ad::sigmoid(ad::slice(gates, 1, units, units));
  auto candidate = ad::tanh(ad::slice(gates, 1, 2 * units, units));
  auto output_gate = ad::sigmoid(ad::slice(gates, 1, 3 * units, units));
  auto c = forget_gate * prev.c + input_gate * candidate;
  auto h = output_gate * ad::tanh(c);
  return {h, c};
}

template <typename Scalar>
struct LstmSequence {
  std::vector<ad::Var<Scalar>> outputs;  // per step [batch, units]
  LstmState<Scalar> final_state;
};

/// Runs one direction over `sequence`, visiting steps in reverse when `reverse` is set.
/// Outputs stay aligned with input positions either way.
template <typename Scalar>
LstmSequence<Scalar> lstm_forward(const std::vector<ad::Var<Scalar>>& sequence, const LstmWeights<Scalar>& w,
                                  std::type_identity_t<std::optional<LstmState<Scalar>>> initial = std::nullopt,
                                  bool reverse = false) {
  if (sequence.empty()) throw ContractError("lstm: empty input sequence");
  ad::Graph<Scalar>& graph = *sequence.front().graph;
  LstmState<Scalar> state = initial ? *initial : zero_state(graph, sequence.front().shape()[0], w.units());
  LstmSequence<Scalar> result;
  result.outputs.resize(sequence.size());
  const std::size_t n = sequence.size();
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = reverse ? n - 1 - k : k;
    state = lstm_cell_step(sequence[t], state, w);
    result.outputs[t] = state.h;
  }
  result.final_state = state;
  return result;
}

template <typename Scalar>
struct BiLstmResult {
  std::vector<ad::Var<Scalar>> outputs;  // per step [batch, 2*units] = [h_forward, h_backward]
  LstmState<Scalar> forward_final;
  LstmState<Scalar> backward_final;
  ad::Var<Scalar> latent;                // [batch, 4*units] = [h_fw, c_fw, h_bw, c_bw]
};

/// Bidirectional LSTM. Each direction's final state is taken at its last processed step
/// (t = w-1 forward, t = 0 backward).
template <typename Scalar>
BiLstmResult<Scalar> bilstm_forward(const std::vector<ad::Var<Scalar>>& sequence, const LstmWeights<Scalar>& forward,
                                    const LstmWeights<Scalar>& backward,
                                    std::type_identity_t<std::optional<LstmState<Scalar>>> forward_initial = std::nullopt,
                                    std::type_identity_t<std::optional<LstmState<Scalar>>> backward_initial = std::nullopt) {
  if (sequence.empty()) throw ContractError("bilstm: empty input sequence");
  auto fw = lstm_forward(sequence, forward, forward_initial, false);
  auto bw = lstm_forward(sequence, backward, backward_initial, true);
  BiLstmResult<Scalar> result;
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    result.outputs.push_back(ad::concat<Scalar>({fw.outputs[t], bw.outputs[t]}, 1));
  }
  result.forward_final = fw.final_state;
  result.backward_final = bw.final_state;
  result.latent = ad::concat<Scalar>({fw.final_state.h, fw.final_state.c, bw.final_state.h, bw.final_state.c}, 1);
  return result;
}

}  // namespace stimpute

#endif  // STIMPUTE_LAYERS_HPP
