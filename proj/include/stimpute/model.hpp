#ifndef STIMPUTE_MODEL_HPP
#define STIMPUTE_MODEL_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stimpute/layers.hpp"

namespace stimpute {

enum class Variant { kFcNn, kLstm, kBiLstm, kCnnBiLstm, kCnnBiLstmRes };

inline constexpr Variant kAllVariants[] = {Variant::kFcNn, Variant::kLstm, Variant::kBiLstm, Variant::kCnnBiLstm,
                                           Variant::kCnnBiLstmRes};

std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);
/// Row label used in comparison tables ("FC-NN", "CNN-BiLSTM-Res", ...).
std::string display_name(Variant variant);

/// Window geometry (s, w, f).
struct InputDims {
  Index sensors = 10;
  Index window = 6;
  Index features = 1;

  Index flat() const { return sensors * window * features; }
  bool operator==(const InputDims&) const = default;
};

/**
 * Declarative autoencoder description. `defaults()` yields the reference
 * architectures: FC_NN hidden widths (32,16,12,16,32); LSTM 32 units;
 * BiLSTM-based variants 16 units per direction; CNN kernels of width
 * 1..4 with 8 filters each; dropout 0.2 on recurrent-layer inputs.
 */
struct ModelSpec {
  Variant variant = Variant::kCnnBiLstmRes;
  InputDims input;
  std::vector<Index> hidden_layers{32, 16, 12, 16, 32};
  std::vector<Index> kernel_widths{1, 2, 3, 4};
  Index filters_per_kernel = 8;
  Index lstm_units = 16;
  double dropout = 0.2;
  double leaky_alpha = 0.01;

  static ModelSpec defaults(Variant variant, InputDims input = {});

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  /// Width of the encoder's latent vector.
  Index latent_size() const;
  /// Total conv output channels F (CNN variants).
  Index conv_channels() const;
  Index bottleneck_index() const { return static_cast<Index>(hidden_layers.size() - 1) / 2; }

  bool operator==(const ModelSpec&) const = default;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

template <typename Scalar>
struct Model {
  ModelSpec spec;
  ParameterSet<Scalar> parameters;
  std::uint64_t seed = 0;

  Index parameter_count() const {
    Index n = 0;
    for (const auto& [name, t] : parameters) n += t.size();
    return n;
  }
};

/// Validates the spec and initialises parameters (Glorot-uniform weights, zero biases).
template <typename Scalar>
Model<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed);

template <typename Scalar>
struct ForwardResult {
  ad::Var<Scalar> reconstruction;  // [batch, s*w*f]
  ad::Var<Scalar> latent;          // [batch, d]
};

/**
 * Batched forward pass on a graph. `input` is [batch, s*w*f] with each row a
 * window flattened sensor-major, then time, then feature.
 */
template <typename Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& model, const BoundParameters<Scalar>& params,
                              ad::Var<Scalar> input, bool training, Rng& rng);

/// Single-window convenience: window [s, w, f] -> (reconstruction [s, w, f], latent [d]).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> forward(const Model<Scalar>& model, const Tensor<Scalar>& window,
                                                  bool training, Rng& rng);

/// Inference on a batch [batch, s*w*f]: returns (reconstructions, latents).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> infer(const Model<Scalar>& model, const Tensor<Scalar>& batch);

/// Column indices of time step t inside a flattened window, ordered (sensor, feature).
std::vector<Index> timestep_columns(const InputDims& dims, Index t);

}  // namespace stimpute

#endif  // STIMPUTE_MODEL_HPP
