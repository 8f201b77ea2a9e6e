#ifndef STIMPUTE_EXPERIMENT_HPP
#define STIMPUTE_EXPERIMENT_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stimpute/baselines.hpp"
#include "stimpute/container.hpp"
#include "stimpute/imputation.hpp"
#include "stimpute/training.hpp"

namespace stimpute {

/// Imputation method ids accepted in configs and on the command line.
inline const std::vector<std::string> kMethods = {"multiple",    "single",         "latent_knn",
                                                  "wh_average",  "neighbor_value", "knn_pca"};
bool method_needs_model(const std::string& method);

/// Optional architecture overrides on top of `ModelSpec::defaults(variant)`.
struct ModelOverrides {
  Variant variant = Variant::kCnnBiLstmRes;
  std::optional<std::vector<Index>> hidden_layers;
  std::optional<std::vector<Index>> kernel_widths;
  std::optional<Index> filters_per_kernel;
  std::optional<Index> lstm_units;
  std::optional<double> dropout;
  std::optional<double> leaky_alpha;

  ModelSpec resolve(InputDims input) const;
  ModelSpec resolve(InputDims input, Variant variant) const;
};

struct ImputeConfig {
  std::vector<std::string> methods = kMethods;
  Index latent_k = 13;
  Index knn_pca_k = 20;
  Index pca_components = 10;
  Index single_position = -1;  // -1 = last window position
  bool clip_negative = true;
  NeighborConfig neighbor;
};

struct SweepConfig {
  std::string driver = "variant";  // k | latent_size | variant
  std::vector<Index> k{1, 5, 13};
  std::vector<Index> latent_size{2, 4, 6, 8, 10, 12, 14, 16, 18, 20};
  std::vector<Variant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
};

/**
 * One experiment, read from a JSON document. Unknown keys are errors; unset
 * fields keep their defaults. Every run artifact lands in
 * <output_dir>/<hash()>/.
 */
struct RunConfig {
  std::optional<std::string> csv;  // data source; synthetic data when unset
  SynthSpec synth;
  bool synth_seed_set = false;     // otherwise derived from `seed`
  double split_ratio = 2.0 / 3.0;
  std::string scaler_scope = "global";
  Index window = 6;
  MissingBlockConfig missing;
  ModelOverrides model;
  TrainConfig train;
  ImputeConfig impute;
  SweepConfig sweep;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Hex FNV-1a of the canonical JSON without `output_dir`, `impute.methods` and `sweep.driver`.
  std::string hash() const;
  void validate() const;

  int precision() const { return train.precision; }
  std::uint64_t stream_seed(const std::string& purpose) const;
};

struct PreparedData {
  SpatioTemporalSeries train;   // flow units
  MissingMask train_mask;
  ScalerParams scaler;
  WindowSet train_windows;      // scaled
  ImputationTask task;
};

/// Loads or synthesises data, splits, injects missing blocks and scales (scaler fitted on training data only).
PreparedData prepare_data(const RunConfig& config);
SpatioTemporalSeries load_series(const RunConfig& config);

struct TrainedModel {
  ModelSpec spec;
  std::unique_ptr<WindowModel> model;  // final weights
  Container checkpoint;
  Container best_checkpoint;
  std::vector<EpochLoss> trace;
  int best_epoch = 0;
  double seconds = 0.0;
};

/// Trains at the configured precision; `on_epoch` sees each epoch's losses.
TrainedModel train_model(const RunConfig& config, const PreparedData& data, const ModelSpec& spec,
                         const std::function<void(const EpochLoss&)>& on_epoch = {});

/// Rebuilds an inference model from a checkpoint; throws DimensionError naming the expected (s, w, f).
std::unique_ptr<WindowModel> load_model(const Container& checkpoint, const InputDims& expected);

/// Fitted baselines shared by several methods.
struct BaselineCache {
  std::optional<WeeklyHourlyTable> table;
  std::optional<KnnPcaImputer> knn_pca;
};

/// Runs one method; model-based methods need `model`.
ImputationReport run_method(const std::string& method, const RunConfig& config, const PreparedData& data,
                            const WindowModel* model, BaselineCache& cache);

std::vector<ImputationReport> run_methods(const std::vector<std::string>& methods, const RunConfig& config,
                                          const PreparedData& data, const WindowModel* model);

struct SweepRow {
  std::string driver;
  std::string value;
  std::string method;
  bool ok = false;
  double mae = 0.0;
  double rmse = 0.0;
  std::string error;
};

/// One train/evaluate cycle per grid point; failures are recorded rather than thrown.
std::vector<SweepRow> run_sweep(const RunConfig& config, const PreparedData& data,
                                const std::function<void(const std::string&)>& log = {});

/// Header "driver,value,method,status,mae,rmse,error".
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);

/// Header "method,mae,rmse,count".
void write_comparison_csv(const std::vector<ImputationReport>& reports, std::ostream& out);

/// "# config_hash=<hash> seed=<seed>" provenance line written at the top of CSV artifacts.
std::string provenance_line(const RunConfig& config);

}  // namespace stimpute

#endif  // STIMPUTE_EXPERIMENT_HPP
