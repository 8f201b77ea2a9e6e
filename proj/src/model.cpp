#include "stimpute/model.hpp"

#include <algorithm>

namespace stimpute {

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::kFcNn: return "fc_nn";
    case Variant::kLstm: return "lstm";
    case Variant::kBiLstm: return "bilstm";
    case Variant::kCnnBiLstm: return "cnn_bilstm";
    case Variant::kCnnBiLstmRes: return "cnn_bilstm_res";
  }
  return "unknown";
}

std::string display_name(Variant variant) {
  switch (variant) {
    case Variant::kFcNn: return "FC-NN";
    case Variant::kLstm: return "LSTM";
    case Variant::kBiLstm: return "BiLSTM";
    case Variant::kCnnBiLstm: return "CNN-BiLSTM";
    case Variant::kCnnBiLstmRes: return "CNN-BiLSTM-Res";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown model variant '" + name + "'");
}

ModelSpec ModelSpec::defaults(Variant variant, InputDims input) {
  ModelSpec spec;
  spec.variant = variant;
  spec.input = input;
  spec.lstm_units = variant == Variant::kLstm ? 32 : 16;
  return spec;
}

namespace {

bool is_cnn(Variant v) { return v == Variant::kCnnBiLstm || v == Variant::kCnnBiLstmRes; }
bool is_bidirectional(Variant v) { return v != Variant::kFcNn && v != Variant::kLstm; }

}  // namespace

void ModelSpec::validate() const {
  if (input.sensors < 1 || input.window < 1 || input.features < 1) {
    throw ConfigError("input dims (s, w, f) must all be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(leaky_alpha >= 0.0)) throw ConfigError("leaky_alpha must be non-negative");
  switch (variant) {
    case Variant::kFcNn:
      if (hidden_layers.empty()) throw ConfigError("FC_NN requires at least one hidden layer");
      if (std::any_of(hidden_layers.begin(), hidden_layers.end(), [](Index n) { return n < 1; })) {
        throw ConfigError("FC_NN hidden layer widths must be positive");
      }
      break;
    case Variant::kCnnBiLstm:
    case Variant::kCnnBiLstmRes:
      if (kernel_widths.empty()) throw ConfigError("CNN variants require at least one kernel");
      if (filters_per_kernel < 1) throw ConfigError("filters_per_kernel must be positive");
      for (Index m : kernel_widths) {
        if (m < 1 || m > input.window) {
          throw ConfigError("kernel width " + std::to_string(m) + " must lie in [1, w=" +
                            std::to_string(input.window) + "]");
        }
      }
      [[fallthrough]];
    case Variant::kLstm:
    case Variant::kBiLstm:
      if (lstm_units < 1) throw ConfigError("lstm_units must be positive");
      break;
  }
}

Index ModelSpec::latent_size() const {
  switch (variant) {
    case Variant::kFcNn: return hidden_layers.at(static_cast<std::size_t>(bottleneck_index()));
    case Variant::kLstm: return 2 * lstm_units;
    default: return 4 * lstm_units;
  }
}

Index ModelSpec::conv_channels() const {
  return static_cast<Index>(kernel_widths.size()) * filters_per_kernel;
}

nlohmann::json to_json(const ModelSpec& spec) {
  return {
      {"variant", to_string(spec.variant)},
      {"sensors", spec.input.sensors},
      {"window", spec.input.window},
      {"features", spec.input.features},
      {"hidden_layers", spec.hidden_layers},
      {"kernel_widths", spec.kernel_widths},
      {"filters_per_kernel", spec.filters_per_kernel},
      {"lstm_units", spec.lstm_units},
      {"dropout", spec.dropout},
      {"leaky_alpha", spec.leaky_alpha},
  };
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.variant = parse_variant(j.at("variant").get<std::string>());
  spec.input = {j.at("sensors").get<Index>(), j.at("window").get<Index>(), j.at("features").get<Index>()};
  spec.hidden_layers = j.at("hidden_layers").get<std::vector<Index>>();
  spec.kernel_widths = j.at("kernel_widths").get<std::vector<Index>>();
  spec.filters_per_kernel = j.at("filters_per_kernel").get<Index>();
  spec.lstm_units = j.at("lstm_units").get<Index>();
  spec.dropout = j.at("dropout").get<double>();
  spec.leaky_alpha = j.at("leaky_alpha").get<double>();
  spec.validate();
  return spec;
}

std::vector<Index> timestep_columns(const InputDims& dims, Index t) {
  std::vector<Index> cols;
  cols.reserve(static_cast<std::size_t>(dims.sensors * dims.features));
  for (Index i = 0; i < dims.sensors; ++i)
    for (Index k = 0; k < dims.features; ++k) cols.push_back((i * dims.window + t) * dims.features + k);
  return cols;
}

namespace {

// Maps a time-major concatenation of per-step [s*f] blocks back to sensor-major order.
std::vector<Index> sensor_major_order(const InputDims& dims) {
  std::vector<Index> cols(static_cast<std::size_t>(dims.flat()));
  for (Index i = 0; i < dims.sensors; ++i)
    for (Index t = 0; t < dims.window; ++t)
      for (Index k = 0; k < dims.features; ++k)
        cols[static_cast<std::size_t>((i * dims.window + t) * dims.features + k)] =
            (t * dims.sensors + i) * dims.features + k;
  return cols;
}

template <typename Scalar>
void init_dense(ParameterSet<Scalar>& params, const std::string& prefix, Index in, Index out, Rng& rng) {
  params[prefix + "/kernel"] = glorot_uniform<Scalar>({in, out}, in, out, rng);
  params[prefix + "/bias"] = Tensor<Scalar>::zeros({out});
}

template <typename Scalar>
ad::Var<Scalar> apply_dense(const BoundParameters<Scalar>& p, const std::string& prefix, ad::Var<Scalar> x) {
  return dense(x, lookup(p, prefix + "/kernel"), lookup(p, prefix + "/bias"));
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> with_dropout(const std::vector<ad::Var<Scalar>>& seq, double rate, bool training,
                                          Rng& rng) {
  std::vector<ad::Var<Scalar>> out;
  out.reserve(seq.size());
  for (const auto& x : seq) out.push_back(ad::dropout(x, rate, training, rng));
  return out;
}

/// Per-step dense projection to s*f values, reassembled into a flattened window.
template <typename Scalar>
ad::Var<Scalar> decode_steps(const ModelSpec& spec, const BoundParameters<Scalar>& p,
                             const std::vector<ad::Var<Scalar>>& steps) {
  std::vector<ad::Var<Scalar>> projected;
  projected.reserve(steps.size());
  for (const auto& h : steps) projected.push_back(apply_dense(p, "output", h));
  return ad::select_columns(ad::concat(projected, 1), sensor_major_order(spec.input));
}

/// Conv block output as a per-step sequence of [batch, F] features.
template <typename Scalar>
std::vector<ad::Var<Scalar>> conv_block(const ModelSpec& spec, const BoundParameters<Scalar>& p,
                                        ad::Var<Scalar> input) {
  const Index batch = input.shape()[0];
  const InputDims& d = spec.input;
  auto image = ad::reshape(input, {batch, d.sensors, d.window, d.features});
  std::vector<ad::Var<Scalar>> maps;
  for (std::size_t k = 0; k < spec.kernel_widths.size(); ++k) {
    const std::string prefix = "conv_" + std::to_string(k);
    auto conv = ad::conv_time(image, lookup(p, prefix + "/kernel"), lookup(p, prefix + "/bias"));
    maps.push_back(ad::leaky_relu(conv, static_cast<Scalar>(spec.leaky_alpha)));
  }
  const Index channels = spec.conv_channels();
  auto features = ad::reshape(ad::concat(maps, 3), {batch, d.window * channels});
  std::vector<ad::Var<Scalar>> steps;
  for (Index t = 0; t < d.window; ++t) steps.push_back(ad::slice(features, 1, t * channels, channels));
  return steps;
}

}  // namespace

template <typename Scalar>
Model<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<Scalar> model{spec, {}, seed};
  Rng rng(seed);
  auto& params = model.parameters;
  const InputDims& d = spec.input;
  const Index step_width = d.sensors * d.features;
  const Index units = spec.lstm_units;

  switch (spec.variant) {
    case Variant::kFcNn: {
      Index in = d.flat();
      for (std::size_t k = 0; k < spec.hidden_layers.size(); ++k) {
        init_dense(params, "dense_" + std::to_string(k), in, spec.hidden_layers[k], rng);
        in = spec.hidden_layers[k];
      }
      init_dense(params, "output", in, d.flat(), rng);
      break;
    }
    case Variant::kLstm:
      init_lstm_parameters(params, "encoder", step_width, units, rng);
      init_lstm_parameters(params, "decoder", units, units, rng);
      init_dense(params, "output", units, step_width, rng);
      break;
    case Variant::kBiLstm:
    case Variant::kCnnBiLstm:
    case Variant::kCnnBiLstmRes: {
      Index seq_width = step_width;
      if (is_cnn(spec.variant)) {
        for (std::size_t k = 0; k < spec.kernel_widths.size(); ++k) {
          const Index m = spec.kernel_widths[k];
          const std::string prefix = "conv_" + std::to_string(k);
          params[prefix + "/kernel"] =
              glorot_uniform<Scalar>({d.sensors, m, d.features, spec.filters_per_kernel}, d.sensors * m * d.features,
                                     d.sensors * m * spec.filters_per_kernel, rng);
          params[prefix + "/bias"] = Tensor<Scalar>::zeros({spec.filters_per_kernel});
        }
        seq_width = spec.conv_channels();
      }
      init_lstm_parameters(params, "encoder_fw", seq_width, units, rng);
      init_lstm_parameters(params, "encoder_bw", seq_width, units, rng);
      init_lstm_parameters(params, "decoder_fw", 2 * units, units, rng);
      init_lstm_parameters(params, "decoder_bw", 2 * units, units, rng);
      if (spec.variant == Variant::kCnnBiLstmRes && spec.conv_channels() != 2 * units) {
        params["residual/kernel"] =
            glorot_uniform<Scalar>({spec.conv_channels(), 2 * units}, spec.conv_channels(), 2 * units, rng);
      }
      init_dense(params, "output", 2 * units, step_width, rng);
      break;
    }
  }
  return model;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& model, const BoundParameters<Scalar>& p, ad::Var<Scalar> input,
                              bool training, Rng& rng) {
  const ModelSpec& spec = model.spec;
  const InputDims& d = spec.input;
  if (input.value().rank() != 2 || input.shape()[1] != d.flat()) {
    throw DimensionError("model input " + shape_string(input.shape()) + " does not match expected [batch, " +
                         std::to_string(d.flat()) + "] for (s, w, f) = (" + std::to_string(d.sensors) + ", " +
                         std::to_string(d.window) + ", " + std::to_string(d.features) + ")");
  }
  const auto alpha = static_cast<Scalar>(spec.leaky_alpha);

  if (spec.variant == Variant::kFcNn) {
    ad::Var<Scalar> x = input;
    ad::Var<Scalar> latent;
    for (std::size_t k = 0; k < spec.hidden_layers.size(); ++k) {
      x = ad::leaky_relu(apply_dense(p, "dense_" + std::to_string(k), x), alpha);
      if (static_cast<Index>(k) == spec.bottleneck_index()) latent = x;
    }
    return {apply_dense(p, "output", x), latent};
  }

  std::vector<ad::Var<Scalar>> sequence;
  if (is_cnn(spec.variant)) {
    sequence = conv_block(spec, p, input);
  } else {
    for (Index t = 0; t < d.window; ++t) sequence.push_back(ad::select_columns(input, timestep_columns(d, t)));
  }
  const std::vector<ad::Var<Scalar>> conv_steps = is_cnn(spec.variant) ? sequence : std::vector<ad::Var<Scalar>>{};
  sequence = with_dropout(sequence, spec.dropout, training, rng);

  if (!is_bidirectional(spec.variant)) {
    auto encoder = lstm_forward(sequence, LstmWeights<Scalar>::from(p, "encoder"));
    auto decoder_in = with_dropout(encoder.outputs, spec.dropout, training, rng);
    auto decoder = lstm_forward(decoder_in, LstmWeights<Scalar>::from(p, "decoder"), encoder.final_state);
    auto latent = ad::concat<Scalar>({encoder.final_state.h, encoder.final_state.c}, 1);
    return {decode_steps(spec, p, decoder.outputs), latent};
  }

  auto encoder = bilstm_forward(sequence, LstmWeights<Scalar>::from(p, "encoder_fw"),
                                LstmWeights<Scalar>::from(p, "encoder_bw"));
  auto decoder_in = with_dropout(encoder.outputs, spec.dropout, training, rng);
  auto decoder = bilstm_forward(decoder_in, LstmWeights<Scalar>::from(p, "decoder_fw"),
                                LstmWeights<Scalar>::from(p, "decoder_bw"), encoder.forward_final,
                                encoder.backward_final);
  std::vector<ad::Var<Scalar>> steps = decoder.outputs;
  if (spec.variant == Variant::kCnnBiLstmRes) {
    auto it = p.find("residual/kernel");
    for (std::size_t t = 0; t < steps.size(); ++t) {
      ad::Var<Scalar> shortcut = it == p.end() ? conv_steps[t] : ad::matmul(conv_steps[t], it->second);
      steps[t] = steps[t] + shortcut;
    }
  }
  return {decode_steps(spec, p, steps), encoder.latent};
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> infer(const Model<Scalar>& model, const Tensor<Scalar>& batch) {
  ad::Graph<Scalar> graph;
  auto params = bind_parameters(graph, model.parameters, false);
  Rng unused(0);
  auto result = forward(model, params, graph.constant(batch), false, unused);
  return {result.reconstruction.value(), result.latent.value()};
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> forward(const Model<Scalar>& model, const Tensor<Scalar>& window,
                                                  bool training, Rng& rng) {
  const InputDims& d = model.spec.input;
  if (window.shape() != Shape{d.sensors, d.window, d.features}) {
    throw DimensionError("window " + shape_string(window.shape()) + " does not match expected (s, w, f) = " +
                         shape_string({d.sensors, d.window, d.features}));
  }
  ad::Graph<Scalar> graph;
  auto params = bind_parameters(graph, model.parameters, false);
  auto result = forward(model, params, graph.constant(window.reshaped({1, d.flat()})), training, rng);
  return {result.reconstruction.value().reshaped(window.shape()),
          result.latent.value().reshaped({result.latent.value().size()})};
}

#define STIMPUTE_INSTANTIATE_MODEL(Scalar)                                                                    \
  template Model<Scalar> build_model<Scalar>(const ModelSpec&, std::uint64_t);                                \
  template ForwardResult<Scalar> forward<Scalar>(const Model<Scalar>&, const BoundParameters<Scalar>&,        \
                                                 ad::Var<Scalar>, bool, Rng&);                                \
  template std::pair<Tensor<Scalar>, Tensor<Scalar>> forward<Scalar>(const Model<Scalar>&, const Tensor<Scalar>&, \
                                                                     bool, Rng&);                             \
  template std::pair<Tensor<Scalar>, Tensor<Scalar>> infer<Scalar>(const Model<Scalar>&, const Tensor<Scalar>&);

STIMPUTE_INSTANTIATE_MODEL(float)
STIMPUTE_INSTANTIATE_MODEL(double)

}  // namespace stimpute
