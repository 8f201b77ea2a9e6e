#ifndef STIMPUTE_BASELINES_HPP
#define STIMPUTE_BASELINES_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "stimpute/container.hpp"
#include "stimpute/data.hpp"
#include "stimpute/knn.hpp"

namespace stimpute {

/// Per-sensor mean flow keyed by (day-of-week, hour-of-day); column = dow * 24 + hour.
struct WeeklyHourlyTable {
  static constexpr Index kCells = 7 * 24;

  Eigen::MatrixXd mean;      // sensors x 168, NaN where no observation
  Eigen::MatrixXd count;     // sensors x 168
  Eigen::VectorXd overall;   // per-sensor mean over all observed training entries

  /// Built from observed entries only (not NaN, not flagged in `exclude`).
  static WeeklyHourlyTable fit(const SpatioTemporalSeries& train, const BoolArray* exclude = nullptr);

  Index sensors() const { return mean.rows(); }
  static Index cell(std::int64_t timestamp) { return day_of_week(timestamp) * 24 + hour_of_day(timestamp); }

  /// Table value, or the sensor's overall mean when the cell saw no data (`fallback` set).
  double lookup(Index sensor, std::int64_t timestamp, bool* fallback = nullptr) const;

  /// Table value at every (sensor, t) of a series with the same sensors.
  Eigen::MatrixXd profile(const SpatioTemporalSeries& like) const;

  Container to_container() const;
  static WeeklyHourlyTable from_container(const Container& container);
};

/// Estimates at every masked index; NaN elsewhere.
Eigen::MatrixXd wh_average_impute(const WeeklyHourlyTable& table, const SpatioTemporalSeries& series,
                                  const BoolArray& missing);

/**
 * Dynamic time warping with absolute-difference local cost. `band` is an
 * optional Sakoe-Chiba half width (widened to |len(a) - len(b)| if smaller).
 */
double dtw_distance(std::span<const double> a, std::span<const double> b, std::optional<Index> band = std::nullopt);

struct NeighborConfig {
  Index slice_days = 14;             // contiguous training slice used for DTW ranking
  std::optional<Index> band;         // Sakoe-Chiba band in steps
};

struct NeighborResult {
  Eigen::MatrixXd estimates;                 // NaN where not masked
  std::vector<std::vector<Index>> ranking;   // per sensor, other sensors by DTW distance
  Eigen::MatrixXd distances;                 // sensors x sensors
  Index single_neighbor = 0;                 // imputed from only one observed neighbour
  Index table_fallbacks = 0;                 // no observed neighbour, used the W-H table
};

/// Ranks sensors by DTW distance between training residuals (observed minus W-H profile).
NeighborResult rank_neighbors(const SpatioTemporalSeries& train, const BoolArray& train_missing,
                              const WeeklyHourlyTable& table, const NeighborConfig& config);

/**
 * Each masked (sensor, t) gets the mean of the two closest neighbours observed
 * at t, falling back to fewer neighbours and finally to the W-H table.
 */
NeighborResult neighbor_value_impute(const SpatioTemporalSeries& train, const BoolArray& train_missing,
                                     const SpatioTemporalSeries& series, const BoolArray& missing,
                                     const WeeklyHourlyTable& table, const NeighborConfig& config = {});

struct PcaModel {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;          // features x n_components, orthonormal columns
  Eigen::VectorXd explained_variance;  // ratio per component, non-increasing

  Index n_components() const { return components.cols(); }
  Eigen::MatrixXd project(const Eigen::MatrixXd& rows) const;
  Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& scores) const;

  Container to_container() const;
  static PcaModel from_container(const Container& container);
};

/// Top right-singular vectors of the centred data (rows = samples).
PcaModel pca_fit(const Eigen::MatrixXd& data, Index n_components = 10);

/**
 * KNN over PCA scores of windows. Missing query entries are filled with the
 * per-position training mean before projection; missing entries are then
 * replaced by the positionwise mean of the k nearest training windows' values.
 */
class KnnPcaImputer {
 public:
  /// `features`: training windows used for fitting, already filled. `donors`: values averaged at imputation.
  /// Query entries are filled with the feature column means before projection.
  KnnPcaImputer(const Eigen::MatrixXd& features, Eigen::MatrixXd donors, Index n_components = 10);

  /// Fits from a window set: corrupted windows mean-filled per position, clean values as donors.
  static KnnPcaImputer from_windows(const WindowSet& train, Index n_components = 10);

  const PcaModel& pca() const { return pca_; }
  const BruteForceKnn& index() const { return index_; }
  const Eigen::RowVectorXd& fill_values() const { return pca_.mean; }

  /// `query` window values, `missing` flags (nonzero = impute). Throws ContractError if nothing is observed.
  Eigen::RowVectorXd impute(const Eigen::RowVectorXd& query, const Eigen::RowVectorXd& missing, Index k) const;

  /// Imputes every window of a set (unknown entries count as missing).
  Eigen::MatrixXd impute_all(const WindowSet& windows, Index k) const;

  std::vector<Neighbor> neighbors(const Eigen::RowVectorXd& query, const Eigen::RowVectorXd& missing, Index k) const;

 private:
  PcaModel pca_;
  Eigen::MatrixXd donors_;
  BruteForceKnn index_;
};

/// Per-column mean of entries where `observed` is nonzero (0 for columns with none).
Eigen::RowVectorXd observed_column_mean(const Eigen::MatrixXd& values, const Eigen::MatrixXd& observed);

/// Copy of `values` with unobserved entries replaced by `fill` of their column.
Eigen::MatrixXd fill_unobserved(const Eigen::MatrixXd& values, const Eigen::MatrixXd& observed,
                                const Eigen::RowVectorXd& fill);

}  // namespace stimpute

#endif  // STIMPUTE_BASELINES_HPP
