#include "stimpute/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace stimpute {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
}

template <typename Scalar>
AdamState<Scalar> AdamState<Scalar>::init(const ParameterSet<Scalar>& params, double learning_rate, double beta1,
                                          double beta2, double epsilon) {
  AdamState state;
  state.learning_rate = learning_rate;
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.epsilon = epsilon;
  for (const auto& [name, p] : params) {
    state.first_moment.emplace(name, Tensor<Scalar>::zeros(p.shape()));
    state.second_moment.emplace(name, Tensor<Scalar>::zeros(p.shape()));
  }
  return state;
}

template <typename Scalar>
void adam_step(AdamState<Scalar>& state, ParameterSet<Scalar>& params, const ad::Gradients<Scalar>& grads) {
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw DimensionError("adam: no gradient for parameter '" + name + "'");
    if (g->second.shape() != p.shape()) {
      throw DimensionError("adam: gradient " + shape_string(g->second.shape()) + " does not match parameter '" + name +
                           "' " + shape_string(p.shape()));
    }
    if (!state.first_moment.count(name)) throw DimensionError("adam: state has no moments for '" + name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  const auto b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name).data().array();
    auto m = state.first_moment.at(name).data().array();
    auto v = state.second_moment.at(name).data().array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    auto m_hat = m / static_cast<Scalar>(correction1);
    auto v_hat = v / static_cast<Scalar>(correction2);
    p.data().array() -= static_cast<Scalar>(state.learning_rate) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(state.epsilon));
  }
}

template <typename Scalar>
ad::Var<Scalar> mse_loss(ad::Var<Scalar> prediction, ad::Var<Scalar> target, ad::Var<Scalar> valid) {
  if (prediction.shape() != target.shape() || prediction.shape() != valid.shape()) {
    throw DimensionError("mse_loss: shapes " + shape_string(prediction.shape()) + ", " + shape_string(target.shape()) +
                         ", " + shape_string(valid.shape()) + " must agree");
  }
  const auto mask = (valid.value().data().array() != Scalar(0)).template cast<Scalar>();
  const Scalar count = mask.sum();
  if (count == Scalar(0)) throw ContractError("mse_loss: no valid entries");
  typename Tensor<Scalar>::Vector diff = ((prediction.value().data() - target.value().data()).array() * mask).matrix();
  using Vector = typename Tensor<Scalar>::Vector;
  Tensor<Scalar> out(Shape{}, Vector::Constant(1, diff.squaredNorm() / count));
  const int ip = prediction.id;
  return prediction.graph->record(std::move(out), {prediction, target, valid},
                                  [ip, count, diff = std::move(diff)](ad::Graph<Scalar>& g, int self) {
                                    if (g.requires_grad(ip)) {
                                      g.grad(ip).data() += diff * (Scalar(2) * g.grad(self)[0] / count);
                                    }
                                  });
}

void write_loss_csv(const std::vector<EpochLoss>& trace, std::ostream& out) {
  out << "epoch,train_mse,val_mse\n";
  out.precision(17);
  for (const auto& e : trace) out << e.epoch << ',' << e.train_mse << ',' << e.val_mse << '\n';
}

Index validation_count(Index windows, double fraction) {
  if (fraction <= 0.0) return 0;
  return std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(windows) * fraction)));
}

namespace {

template <typename Scalar>
Tensor<Scalar> rows_to_tensor(const Eigen::MatrixXd& source, const std::vector<Index>& rows) {
  Tensor<Scalar> t({static_cast<Index>(rows.size()), source.cols()});
  auto m = t.matrix();
  for (std::size_t k = 0; k < rows.size(); ++k) m.row(static_cast<Index>(k)) = source.row(rows[k]).template cast<Scalar>();
  return t;
}

template <typename Scalar>
Tensor<Scalar> block_to_tensor(const Eigen::MatrixXd& source, Index begin, Index count) {
  Tensor<Scalar> t({count, source.cols()});
  t.matrix() = source.middleRows(begin, count).template cast<Scalar>();
  return t;
}

template <typename Scalar>
void clip_global_norm(ad::Gradients<Scalar>& grads, double max_norm) {
  double total = 0.0;
  for (const auto& [name, g] : grads) total += static_cast<double>(g.data().squaredNorm());
  const double norm = std::sqrt(total);
  if (norm <= max_norm || norm == 0.0) return;
  const auto factor = static_cast<Scalar>(max_norm / norm);
  for (auto& [name, g] : grads) g.data() *= factor;
}

}  // namespace

template <typename Scalar>
double evaluate_loss(const Model<Scalar>& model, const WindowSet& windows, Index batch_size) {
  double squared = 0.0, count = 0.0;
  for (Index begin = 0; begin < windows.size(); begin += batch_size) {
    const Index n = std::min(batch_size, windows.size() - begin);
    auto [recon, latent] = infer(model, block_to_tensor<Scalar>(windows.corrupted, begin, n));
    const Eigen::MatrixXd diff = recon.matrix().template cast<double>() - windows.clean.middleRows(begin, n);
    squared += (diff.array().square() * windows.valid.middleRows(begin, n).array()).sum();
    count += windows.valid.middleRows(begin, n).sum();
  }
  if (count == 0.0) throw ContractError("evaluate_loss: no valid entries");
  return squared / count;
}

template <typename Scalar>
TrainResult<Scalar> train(Model<Scalar> model, const WindowSet& windows, const TrainConfig& config,
                          const std::function<void(const EpochLoss&)>& on_epoch) {
  config.validate();
  if (windows.size() == 0) throw ContractError("train: empty window set");
  if (windows.width() != model.spec.input.flat()) {
    throw DimensionError("train: windows have " + std::to_string(windows.width()) + " entries, model expects " +
                         std::to_string(model.spec.input.flat()));
  }
  const auto start = std::chrono::steady_clock::now();
  const Index n_val = validation_count(windows.size(), config.validation_fraction);
  const Index n_train = windows.size() - n_val;
  if (n_train < 1) throw ContractError("train: no training windows left after the validation split");
  const WindowSet validation = windows.subset(n_train, n_val);

  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  AdamState<Scalar> adam =
      AdamState<Scalar>::init(model.parameters, config.learning_rate, config.beta1, config.beta2, config.epsilon);

  TrainResult<Scalar> result{model, model, 0, {}, 0.0};
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double weighted = 0.0, entries = 0.0;
    int batch_no = 0;
    for (Index begin = 0; begin < n_train; begin += config.batch_size, ++batch_no) {
      const Index end = std::min(n_train, begin + config.batch_size);
      const std::vector<Index> rows(order.begin() + begin, order.begin() + end);
      ad::Graph<Scalar> graph;
      auto params = bind_parameters(graph, model.parameters, true);
      auto input = graph.constant(rows_to_tensor<Scalar>(windows.corrupted, rows));
      auto target = graph.constant(rows_to_tensor<Scalar>(windows.clean, rows));
      auto valid = graph.constant(rows_to_tensor<Scalar>(windows.valid, rows));
      const double batch_entries = static_cast<double>(valid.value().data().sum());
      if (batch_entries == 0.0) continue;
      auto out = forward(model, params, input, true, dropout_rng);
      auto loss = mse_loss(out.reconstruction, target, valid);
      const double loss_value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_value)) {
        throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_no),
                               epoch, batch_no);
      }
      auto grads = graph.backward(loss);
      if (config.grad_clip > 0.0) clip_global_norm(grads, config.grad_clip);
      adam_step(adam, model.parameters, grads);
      weighted += loss_value * batch_entries;
      entries += batch_entries;
    }
    EpochLoss record{epoch, entries > 0.0 ? weighted / entries : 0.0, 0.0};
    record.val_mse = n_val > 0 ? evaluate_loss(model, validation) : record.train_mse;
    if (!std::isfinite(record.val_mse)) {
      throw TrainingDiverged("non-finite validation loss at epoch " + std::to_string(epoch), epoch, -1);
    }
    result.trace.push_back(record);
    if (record.val_mse < best_val) {
      best_val = record.val_mse;
      result.best_model = model;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(record);
  }
  result.final_model = std::move(model);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

#define STIMPUTE_INSTANTIATE_TRAINING(Scalar)                                                                   \
  template struct AdamState<Scalar>;                                                                            \
  template void adam_step<Scalar>(AdamState<Scalar>&, ParameterSet<Scalar>&, const ad::Gradients<Scalar>&);     \
  template ad::Var<Scalar> mse_loss<Scalar>(ad::Var<Scalar>, ad::Var<Scalar>, ad::Var<Scalar>);                 \
  template TrainResult<Scalar> train<Scalar>(Model<Scalar>, const WindowSet&, const TrainConfig&,               \
                                             const std::function<void(const EpochLoss&)>&);                     \
  template double evaluate_loss<Scalar>(const Model<Scalar>&, const WindowSet&, Index);

STIMPUTE_INSTANTIATE_TRAINING(float)
STIMPUTE_INSTANTIATE_TRAINING(double)

}  // namespace stimpute
