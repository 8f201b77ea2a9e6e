#ifndef STIMPUTE_TRAINING_HPP
#define STIMPUTE_TRAINING_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "stimpute/data.hpp"
#include "stimpute/model.hpp"

namespace stimpute {

struct TrainConfig {
  Index batch_size = 256;
  int epochs = 100;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  int precision = 32;

  void validate() const;
};

/// Adam moments per parameter. Moments start at zero and t at 0.
template <typename Scalar>
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  ParameterSet<Scalar> first_moment;
  ParameterSet<Scalar> second_moment;

  static AdamState init(const ParameterSet<Scalar>& params, double learning_rate = 1e-3, double beta1 = 0.9,
                        double beta2 = 0.999, double epsilon = 1e-8);
};

/**
 * One bias-corrected Adam update:
 *   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2
 *   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
 */
template <typename Scalar>
void adam_step(AdamState<Scalar>& state, ParameterSet<Scalar>& params, const ad::Gradients<Scalar>& grads);

/// Mean of squared differences over entries where `valid` is nonzero.
template <typename Scalar>
ad::Var<Scalar> mse_loss(ad::Var<Scalar> prediction, ad::Var<Scalar> target, ad::Var<Scalar> valid);

struct EpochLoss {
  int epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
};

void write_loss_csv(const std::vector<EpochLoss>& trace, std::ostream& out);

template <typename Scalar>
struct TrainResult {
  Model<Scalar> final_model;
  Model<Scalar> best_model;  // lowest validation loss
  int best_epoch = 0;
  std::vector<EpochLoss> trace;
  double seconds = 0.0;
};

/// Validation windows: the chronologically last fraction (at least one when the fraction is positive).
Index validation_count(Index windows, double fraction);

/**
 * Denoising training: corrupted windows in, clean windows as targets, loss
 * restricted to entries whose ground truth is known. Mini-batches are
 * reshuffled every epoch from the config seed.
 */
template <typename Scalar>
TrainResult<Scalar> train(Model<Scalar> model, const WindowSet& windows, const TrainConfig& config,
                          const std::function<void(const EpochLoss&)>& on_epoch = {});

/// Mean masked reconstruction MSE of a model over a window set (inference mode).
template <typename Scalar>
double evaluate_loss(const Model<Scalar>& model, const WindowSet& windows, Index batch_size = 1024);

}  // namespace stimpute

#endif  // STIMPUTE_TRAINING_HPP
