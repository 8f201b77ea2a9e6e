#include "stimpute/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stimpute/errors.hpp"

namespace stimpute {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor<double> to_tensor(const Eigen::MatrixXd& m) { return Tensor<double>::from_matrix(RowMatrix(m)); }

Tensor<double> to_tensor(const Eigen::VectorXd& v) { return Tensor<double>({v.size()}, Eigen::VectorXd(v)); }

Eigen::MatrixXd matrix_of(const Container& c, const std::string& name) {
  const Tensor<double>& t = c.tensors.at(name);
  if (t.rank() != 2) throw ParseError("tensor '" + name + "' must be rank 2");
  return t.matrix();
}

Eigen::VectorXd vector_of(const Container& c, const std::string& name) { return c.tensors.at(name).data(); }

bool observed(const SpatioTemporalSeries& series, const BoolArray* exclude, Index i, Index t) {
  return !std::isnan(series.values(i, t)) && !(exclude && (*exclude)(i, t));
}

}  // namespace

WeeklyHourlyTable WeeklyHourlyTable::fit(const SpatioTemporalSeries& train, const BoolArray* exclude) {
  const Index s = train.sensors();
  WeeklyHourlyTable table;
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(s, kCells);
  table.count = Eigen::MatrixXd::Zero(s, kCells);
  for (Index t = 0; t < train.timesteps(); ++t) {
    const Index c = cell(train.timestamp(t));
    for (Index i = 0; i < s; ++i) {
      if (!observed(train, exclude, i, t)) continue;
      sums(i, c) += train.values(i, t);
      table.count(i, c) += 1.0;
    }
  }
  table.mean = (sums.array() / table.count.array()).matrix();  // 0/0 -> NaN marks empty cells
  table.overall.resize(s);
  for (Index i = 0; i < s; ++i) {
    const double n = table.count.row(i).sum();
    table.overall[i] = n > 0.0 ? sums.row(i).sum() / n : 0.0;
  }
  return table;
}

double WeeklyHourlyTable::lookup(Index sensor, std::int64_t timestamp, bool* fallback) const {
  const Index c = cell(timestamp);
  const bool empty = count(sensor, c) == 0.0;
  if (fallback) *fallback = empty;
  return empty ? overall[sensor] : mean(sensor, c);
}

Eigen::MatrixXd WeeklyHourlyTable::profile(const SpatioTemporalSeries& like) const {
  if (like.sensors() != sensors()) throw DimensionError("weekly-hourly table sensor count does not match series");
  Eigen::MatrixXd out(like.sensors(), like.timesteps());
  for (Index t = 0; t < like.timesteps(); ++t)
    for (Index i = 0; i < like.sensors(); ++i) out(i, t) = lookup(i, like.timestamp(t));
  return out;
}

Container WeeklyHourlyTable::to_container() const {
  Container c;
  c.type = "wh_table";
  c.tensors.emplace("mean", to_tensor(mean));
  c.tensors.emplace("count", to_tensor(count));
  c.tensors.emplace("overall", to_tensor(overall));
  return c;
}

WeeklyHourlyTable WeeklyHourlyTable::from_container(const Container& c) {
  if (c.type != "wh_table") throw ParseError("container type '" + c.type + "' is not a weekly-hourly table");
  return {matrix_of(c, "mean"), matrix_of(c, "count"), vector_of(c, "overall")};
}

Eigen::MatrixXd wh_average_impute(const WeeklyHourlyTable& table, const SpatioTemporalSeries& series,
                                  const BoolArray& missing) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(series.sensors(), series.timesteps(),
                                                  std::numeric_limits<double>::quiet_NaN());
  for (Index t = 0; t < series.timesteps(); ++t)
    for (Index i = 0; i < series.sensors(); ++i)
      if (missing(i, t)) out(i, t) = table.lookup(i, series.timestamp(t));
  return out;
}

double dtw_distance(std::span<const double> a, std::span<const double> b, std::optional<Index> band) {
  if (a.empty() || b.empty()) throw ContractError("dtw_distance: empty series");
  const auto n = static_cast<Index>(a.size()), m = static_cast<Index>(b.size());
  Index width = std::max(n, m);
  if (band) width = std::max(*band, std::abs(n - m));
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // cost(i, j) = |a_i - b_j| + min(D(i-1, j), D(i, j-1), D(i-1, j-1)), rolling over rows of a.
  std::vector<double> prev(static_cast<std::size_t>(m + 1), kInf), curr(static_cast<std::size_t>(m + 1), kInf);
  prev[0] = 0.0;
  for (Index i = 1; i <= n; ++i) {
    std::fill(curr.begin(), curr.end(), kInf);
    const Index lo = std::max<Index>(1, i - width), hi = std::min(m, i + width);
    for (Index j = lo; j <= hi; ++j) {
      const double best = std::min({prev[j], curr[j - 1], prev[j - 1]});
      curr[j] = std::abs(a[i - 1] - b[j - 1]) + best;
    }
    std::swap(prev, curr);
  }
  return prev[m];
}

NeighborResult rank_neighbors(const SpatioTemporalSeries& train, const BoolArray& train_missing,
                              const WeeklyHourlyTable& table, const NeighborConfig& config) {
  const Index s = train.sensors();
  if (s < 3) throw ContractError("neighbor ranking needs at least 3 sensors");
  if (config.slice_days < 1) throw ConfigError("DTW slice must span at least one day");
  const Index per_day = 86400 / train.step_seconds;
  const Index length = std::min(train.timesteps(), config.slice_days * per_day);
  const Index begin = train.timesteps() - length;  // most recent part of the training period

  Eigen::MatrixXd residual(s, length);
  for (Index k = 0; k < length; ++k) {
    const Index t = begin + k;
    for (Index i = 0; i < s; ++i) {
      residual(i, k) = observed(train, &train_missing, i, t) ? train.values(i, t) - table.lookup(i, train.timestamp(t))
                                                             : 0.0;
    }
  }
  NeighborResult result;
  result.distances = Eigen::MatrixXd::Zero(s, s);
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(s));
  for (Index i = 0; i < s; ++i) {
    const Eigen::RowVectorXd r = residual.row(i);
    rows[i].assign(r.data(), r.data() + r.size());
  }
  for (Index i = 0; i < s; ++i)
    for (Index j = i + 1; j < s; ++j) {
      const double d = dtw_distance(rows[i], rows[j], config.band);
      result.distances(i, j) = result.distances(j, i) = d;
    }
  result.ranking.resize(static_cast<std::size_t>(s));
  for (Index i = 0; i < s; ++i) {
    auto& order = result.ranking[i];
    for (Index j = 0; j < s; ++j)
      if (j != i) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return result.distances(i, a) < result.distances(i, b); });
  }
  return result;
}

NeighborResult neighbor_value_impute(const SpatioTemporalSeries& train, const BoolArray& train_missing,
                                     const SpatioTemporalSeries& series, const BoolArray& missing,
                                     const WeeklyHourlyTable& table, const NeighborConfig& config) {
  NeighborResult result = rank_neighbors(train, train_missing, table, config);
  const Index s = series.sensors();
  if (train.sensors() != s) throw DimensionError("training and imputation series have different sensor counts");
  result.estimates = Eigen::MatrixXd::Constant(s, series.timesteps(), std::numeric_limits<double>::quiet_NaN());
  for (Index t = 0; t < series.timesteps(); ++t)
    for (Index i = 0; i < s; ++i) {
      if (!missing(i, t)) continue;
      double total = 0.0;
      int used = 0;
      for (Index j : result.ranking[i]) {
        if (!observed(series, &missing, j, t)) continue;
        total += series.values(j, t);
        if (++used == 2) break;
      }
      if (used == 0) {
        result.estimates(i, t) = table.lookup(i, series.timestamp(t));
        ++result.table_fallbacks;
      } else {
        result.estimates(i, t) = total / used;
        if (used == 1) ++result.single_neighbor;
      }
    }
  return result;
}

Eigen::MatrixXd PcaModel::project(const Eigen::MatrixXd& rows) const {
  return (rows.rowwise() - mean) * components;
}

Eigen::MatrixXd PcaModel::reconstruct(const Eigen::MatrixXd& scores) const {
  return (scores * components.transpose()).rowwise() + mean;
}

Container PcaModel::to_container() const {
  Container c;
  c.type = "pca";
  c.tensors.emplace("mean", to_tensor(Eigen::VectorXd(mean.transpose())));
  c.tensors.emplace("components", to_tensor(components));
  c.tensors.emplace("explained_variance", to_tensor(explained_variance));
  return c;
}

PcaModel PcaModel::from_container(const Container& c) {
  if (c.type != "pca") throw ParseError("container type '" + c.type + "' is not a PCA model");
  return {vector_of(c, "mean").transpose(), matrix_of(c, "components"), vector_of(c, "explained_variance")};
}

PcaModel pca_fit(const Eigen::MatrixXd& data, Index n_components) {
  const Index n = data.rows(), p = data.cols();
  if (n_components < 1 || n_components > std::min(n, p)) {
    throw ConfigError("n_components=" + std::to_string(n_components) + " must lie in [1, min(n, p)=" +
                      std::to_string(std::min(n, p)) + "]");
  }
  PcaModel model;
  model.mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - model.mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd variance = svd.singularValues().array().square();
  const double total = variance.sum();
  model.components = svd.matrixV().leftCols(n_components);
  model.explained_variance = total > 0.0 ? Eigen::VectorXd(variance.head(n_components) / total)
                                         : Eigen::VectorXd::Zero(n_components);
  // Deterministic signs: largest-magnitude loading of each component is positive.
  for (Index k = 0; k < n_components; ++k) {
    Index arg;
    model.components.col(k).cwiseAbs().maxCoeff(&arg);
    if (model.components(arg, k) < 0.0) model.components.col(k) *= -1.0;
  }
  return model;
}

Eigen::RowVectorXd observed_column_mean(const Eigen::MatrixXd& values, const Eigen::MatrixXd& observed) {
  Eigen::RowVectorXd mean(values.cols());
  for (Index c = 0; c < values.cols(); ++c) {
    const double n = (observed.col(c).array() != 0.0).count();
    mean[c] = n > 0 ? (values.col(c).array() * (observed.col(c).array() != 0.0).cast<double>()).sum() / n : 0.0;
  }
  return mean;
}

Eigen::MatrixXd fill_unobserved(const Eigen::MatrixXd& values, const Eigen::MatrixXd& observed,
                                const Eigen::RowVectorXd& fill) {
  Eigen::MatrixXd out = values;
  for (Index r = 0; r < values.rows(); ++r)
    for (Index c = 0; c < values.cols(); ++c)
      if (observed(r, c) == 0.0) out(r, c) = fill[c];
  return out;
}

KnnPcaImputer::KnnPcaImputer(const Eigen::MatrixXd& features, Eigen::MatrixXd donors, Index n_components)
    : pca_(pca_fit(features, n_components)), donors_(std::move(donors)), index_(pca_.project(features)) {
  if (donors_.rows() != features.rows() || donors_.cols() != features.cols()) {
    throw DimensionError("KNN-PCA donors must match the fitted windows");
  }
}

KnnPcaImputer KnnPcaImputer::from_windows(const WindowSet& train, Index n_components) {
  const Eigen::MatrixXd observed = (train.valid.array() * (1.0 - train.missing.array())).matrix();
  const Eigen::MatrixXd features =
      fill_unobserved(train.corrupted, observed, observed_column_mean(train.corrupted, observed));
  Eigen::MatrixXd donors = fill_unobserved(train.clean, train.valid, observed_column_mean(train.clean, train.valid));
  return KnnPcaImputer(features, std::move(donors), n_components);
}

std::vector<Neighbor> KnnPcaImputer::neighbors(const Eigen::RowVectorXd& query, const Eigen::RowVectorXd& missing,
                                               Index k) const {
  if (query.size() != pca_.mean.size() || missing.size() != query.size()) {
    throw DimensionError("query window does not match the fitted window width");
  }
  if ((missing.array() != 0.0).all()) throw ContractError("KNN-PCA query has no observed entry");
  Eigen::RowVectorXd filled = query;
  for (Index c = 0; c < query.size(); ++c)
    if (missing[c] != 0.0) filled[c] = pca_.mean[c];
  return index_.query(pca_.project(filled), k);
}

Eigen::RowVectorXd KnnPcaImputer::impute(const Eigen::RowVectorXd& query, const Eigen::RowVectorXd& missing,
                                         Index k) const {
  const auto found = neighbors(query, missing, k);
  Eigen::RowVectorXd donor_mean = Eigen::RowVectorXd::Zero(query.size());
  for (const auto& nb : found) donor_mean += donors_.row(nb.index);
  donor_mean /= static_cast<double>(found.size());
  Eigen::RowVectorXd out = query;
  for (Index c = 0; c < query.size(); ++c)
    if (missing[c] != 0.0) out[c] = donor_mean[c];
  return out;
}

Eigen::MatrixXd KnnPcaImputer::impute_all(const WindowSet& windows, Index k) const {
  Eigen::MatrixXd out(windows.size(), windows.width());
  const Eigen::MatrixXd unobserved = (1.0 - windows.valid.array() * (1.0 - windows.missing.array())).matrix();
  for (Index r = 0; r < windows.size(); ++r) {
    if ((unobserved.row(r).array() != 0.0).all()) {
      out.row(r) = pca_.mean;  // nothing observed: fall back to the training mean window
      continue;
    }
    out.row(r) = impute(windows.corrupted.row(r), unobserved.row(r), k);
  }
  return out;
}

}  // namespace stimpute
