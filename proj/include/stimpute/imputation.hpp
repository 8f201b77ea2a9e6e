#ifndef STIMPUTE_IMPUTATION_HPP
#define STIMPUTE_IMPUTATION_HPP

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "stimpute/baselines.hpp"
#include "stimpute/data.hpp"
#include "stimpute/model.hpp"

namespace stimpute {

struct CellIndex {
  Index sensor = 0;
  Index t = 0;

  bool operator==(const CellIndex&) const = default;
};

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  Index count = 0;
};

/// MAE = mean |truth - estimate|, RMSE = sqrt(mean (truth - estimate)^2).
Metrics evaluate(std::span<const double> estimates, std::span<const double> truth);

/// Metrics over `indices` of sensors x timesteps grids. Throws ContractError listing indices without a finite estimate.
Metrics evaluate(const Eigen::MatrixXd& estimates, const Eigen::MatrixXd& truth, const std::vector<CellIndex>& indices);

/// Injected-missing entries whose ground truth is known, ordered by time then sensor.
std::vector<CellIndex> evaluation_indices(const BoolArray& missing, const Eigen::MatrixXd& truth);

struct ReportRow {
  Index sensor = 0;
  Index t = 0;
  std::int64_t timestamp = 0;
  double truth = 0.0;
  double estimate = 0.0;
};

struct ImputationReport {
  std::string method;
  std::vector<ReportRow> rows;
  double mae = 0.0;
  double rmse = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;
  int precision = 32;
  nlohmann::json timings = nlohmann::json::object();  // seconds
  nlohmann::json details = nlohmann::json::object();

  /// Aggregates and provenance (rows are written separately).
  nlohmann::json to_json() const;
  /// Appends rows "method,sensor,sensor_id,timestamp,truth,estimate" (no header).
  void write_rows_csv(std::ostream& out, const std::vector<std::string>& sensor_ids) const;
  static constexpr const char* kRowsHeader = "method,sensor,sensor_id,timestamp,truth,estimate";
  Metrics recompute() const;
};

/// Recomputes metrics per method from a per-index CSV ('#' lines are skipped). Methods keep file order.
std::vector<std::pair<std::string, Metrics>> evaluate_rows_csv(std::istream& in);

/// A trained window autoencoder seen through flattened window matrices (one window per row, scaled units).
class WindowModel {
 public:
  virtual ~WindowModel() = default;
  virtual InputDims dims() const = 0;
  virtual Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& windows) const = 0;
  virtual Eigen::MatrixXd encode(const Eigen::MatrixXd& windows) const = 0;
};

/// Batched, multi-threaded inference through an autoencoder.
template <typename Scalar>
class ModelAdapter final : public WindowModel {
 public:
  explicit ModelAdapter(Model<Scalar> model, Index batch_size = 1024);

  InputDims dims() const override { return model_.spec.input; }
  Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& windows) const override;
  Eigen::MatrixXd encode(const Eigen::MatrixXd& windows) const override;
  const Model<Scalar>& model() const { return model_; }

 private:
  Eigen::MatrixXd run(const Eigen::MatrixXd& windows, bool latent) const;

  Model<Scalar> model_;
  Index batch_size_;
};

/// The test side of an experiment: ground truth in flow units plus its scaled windows.
struct ImputationTask {
  SpatioTemporalSeries truth;  // NaN = never observed
  BoolArray missing;           // injected mask
  ScalerParams scaler;
  WindowSet windows;           // from the scaled series and `missing`
  bool clip_negative = true;   // clip estimates at 0 flow after inverse scaling

  static ImputationTask make(SpatioTemporalSeries truth, const MissingMask& mask, const ScalerParams& scaler,
                             Index window);
  std::vector<CellIndex> indices() const { return evaluation_indices(missing, truth.values); }
};

/// Mean over all windows covering each (sensor, t) of per-window values (scaled units). NaN where uncovered.
Eigen::MatrixXd overlap_average(const WindowSet& windows, const Eigen::MatrixXd& values);

/**
 * Each timestamp read from one window position: the window whose `position`
 * lands on t, clamped to the first or last window near the edges.
 */
Eigen::MatrixXd single_position_estimates(const WindowSet& windows, const Eigen::MatrixXd& values, Index position);

/// Builds a report from a grid of flow-unit estimates at the task's evaluation indices.
ImputationReport make_report(const std::string& method, const Eigen::MatrixXd& estimates, const ImputationTask& task);

/// Scaled grid -> flow units, clipped at 0 if requested.
Eigen::MatrixXd to_flow(const Eigen::MatrixXd& scaled, const ScalerParams& scaler, bool clip_negative);

ImputationReport multiple_impute(const WindowModel& model, const ImputationTask& task);

/// `position` < 0 selects the last window position.
ImputationReport single_impute(const WindowModel& model, const ImputationTask& task, Index position = -1);

Eigen::MatrixXd encode_latents(const WindowModel& model, const WindowSet& windows);

/// Clean training windows with unknown entries filled by their position mean.
Eigen::MatrixXd donor_windows(const WindowSet& train);

/**
 * KNN over encoder latents. Train latents come from the corrupted training
 * windows; each test window's missing entries take the positionwise mean of
 * its k nearest training windows' clean values, then overlapping windows are
 * averaged.
 */
ImputationReport latent_knn_impute(const WindowModel& model, const WindowSet& train, const ImputationTask& task,
                                   Index k);

/// Same pipeline with precomputed latents.
ImputationReport latent_knn_impute(const Eigen::MatrixXd& train_latents, const Eigen::MatrixXd& donors,
                                   const Eigen::MatrixXd& test_latents, const ImputationTask& task, Index k);

ImputationReport knn_pca_impute(const KnnPcaImputer& imputer, const ImputationTask& task, Index k);

}  // namespace stimpute

#endif  // STIMPUTE_IMPUTATION_HPP
