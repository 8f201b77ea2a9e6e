#include "stimpute/imputation.hpp"

#include <chrono>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "stimpute/errors.hpp"
#include "stimpute/knn.hpp"
#include "stimpute/parallel.hpp"

namespace stimpute {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void require_stride_one(const WindowSet& windows) {
  if (windows.stride != 1) {
    throw ContractError("window averaging needs stride 1 windows, got stride " + std::to_string(windows.stride));
  }
}

void require_width(const WindowSet& windows, const Eigen::MatrixXd& values) {
  if (values.rows() != windows.size() || values.cols() != windows.width()) {
    throw DimensionError("per-window values are " + std::to_string(values.rows()) + "x" +
                         std::to_string(values.cols()) + ", expected " + std::to_string(windows.size()) + "x" +
                         std::to_string(windows.width()));
  }
}

void require_dims(const WindowModel& model, const WindowSet& windows) {
  const InputDims d = model.dims();
  if (d.sensors != windows.sensors || d.window != windows.window || d.features != windows.features) {
    throw DimensionError("model expects (s, w, f) = (" + std::to_string(d.sensors) + ", " + std::to_string(d.window) +
                         ", " + std::to_string(d.features) + "), data has (" + std::to_string(windows.sensors) + ", " +
                         std::to_string(windows.window) + ", " + std::to_string(windows.features) + ")");
  }
}

}  // namespace

Metrics evaluate(std::span<const double> estimates, std::span<const double> truth) {
  if (estimates.size() != truth.size()) throw DimensionError("estimate and truth lengths differ");
  if (truth.empty()) throw ContractError("no indices to evaluate");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double e = truth[i] - estimates[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const auto n = static_cast<double>(truth.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), static_cast<Index>(truth.size())};
}

Metrics evaluate(const Eigen::MatrixXd& estimates, const Eigen::MatrixXd& truth, const std::vector<CellIndex>& indices) {
  if (estimates.rows() != truth.rows() || estimates.cols() != truth.cols()) {
    throw DimensionError("estimate grid does not match truth grid");
  }
  std::vector<double> est, tru;
  std::vector<CellIndex> absent;
  est.reserve(indices.size());
  tru.reserve(indices.size());
  for (const auto& c : indices) {
    const double e = estimates(c.sensor, c.t);
    if (!std::isfinite(e)) {
      absent.push_back(c);
      continue;
    }
    est.push_back(e);
    tru.push_back(truth(c.sensor, c.t));
  }
  if (!absent.empty()) {
    std::ostringstream msg;
    msg << absent.size() << " missing indices have no estimate:";
    for (std::size_t i = 0; i < std::min<std::size_t>(absent.size(), 20); ++i)
      msg << " (" << absent[i].sensor << ", " << absent[i].t << ")";
    if (absent.size() > 20) msg << " ...";
    throw ContractError(msg.str());
  }
  return evaluate(est, tru);
}

std::vector<CellIndex> evaluation_indices(const BoolArray& missing, const Eigen::MatrixXd& truth) {
  if (missing.rows() != truth.rows() || missing.cols() != truth.cols()) {
    throw DimensionError("mask does not match the series");
  }
  std::vector<CellIndex> out;
  for (Index t = 0; t < truth.cols(); ++t)
    for (Index i = 0; i < truth.rows(); ++i)
      if (missing(i, t) && !std::isnan(truth(i, t))) out.push_back({i, t});
  return out;
}

nlohmann::json ImputationReport::to_json() const {
  return {{"method", method},           {"mae", mae},         {"rmse", rmse},
          {"count", rows.size()},       {"config_hash", config_hash}, {"seed", seed},
          {"precision", precision},     {"timings", timings}, {"details", details}};
}

void ImputationReport::write_rows_csv(std::ostream& out, const std::vector<std::string>& sensor_ids) const {
  char buf[64];
  auto num = [&](double v) {
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  for (const auto& r : rows) {
    out << method << ',' << r.sensor << ',' << sensor_ids.at(r.sensor) << ',' << format_timestamp(r.timestamp) << ','
        << num(r.truth) << ',' << num(r.estimate) << '\n';
  }
}

Metrics ImputationReport::recompute() const {
  std::vector<double> est, tru;
  for (const auto& r : rows) {
    est.push_back(r.estimate);
    tru.push_back(r.truth);
  }
  return evaluate(est, tru);
}

std::vector<std::pair<std::string, Metrics>> evaluate_rows_csv(std::istream& in) {
  std::string line;
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> columns;
  bool header = false;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != ImputationReport::kRowsHeader) throw ParseError("unexpected per-index header", line_no);
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6) throw ParseError("expected 6 columns", line_no);
    double values[2];
    for (int k = 0; k < 2; ++k) {
      const std::string& c = cells[4 + k];
      auto r = std::from_chars(c.data(), c.data() + c.size(), values[k]);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size()) throw ParseError("non-numeric value '" + c + "'", line_no);
    }
    auto [it, inserted] = columns.try_emplace(cells[0]);
    if (inserted) order.push_back(cells[0]);
    it->second.first.push_back(values[1]);
    it->second.second.push_back(values[0]);
  }
  if (!header) throw ParseError("empty per-index file", line_no);
  std::vector<std::pair<std::string, Metrics>> out;
  for (const auto& method : order) out.emplace_back(method, evaluate(columns[method].first, columns[method].second));
  return out;
}

template <typename Scalar>
ModelAdapter<Scalar>::ModelAdapter(Model<Scalar> model, Index batch_size)
    : model_(std::move(model)), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("inference batch size must be positive");
}

template <typename Scalar>
Eigen::MatrixXd ModelAdapter<Scalar>::run(const Eigen::MatrixXd& windows, bool latent) const {
  const InputDims d = dims();
  if (windows.cols() != d.flat()) {
    throw DimensionError("windows have " + std::to_string(windows.cols()) + " columns, model expects (s, w, f) = (" +
                         std::to_string(d.sensors) + ", " + std::to_string(d.window) + ", " +
                         std::to_string(d.features) + ")");
  }
  const Index n = windows.rows();
  const Index width = latent ? model_.spec.latent_size() : d.flat();
  Eigen::MatrixXd out(n, width);
  const Index batches = (n + batch_size_ - 1) / batch_size_;
  parallel_chunks(batches, [&](Index first, Index last) {
    using RowMatrix = typename Tensor<Scalar>::RowMatrix;
    for (Index b = first; b < last; ++b) {
      const Index begin = b * batch_size_, rows = std::min(batch_size_, n - begin);
      const RowMatrix input = windows.middleRows(begin, rows).template cast<Scalar>();
      auto [recon, code] = infer(model_, Tensor<Scalar>::from_matrix(input));
      const Tensor<Scalar>& picked = latent ? code : recon;
      out.middleRows(begin, rows) = picked.matrix().template cast<double>();
    }
  });
  return out;
}

template <typename Scalar>
Eigen::MatrixXd ModelAdapter<Scalar>::reconstruct(const Eigen::MatrixXd& windows) const {
  return run(windows, false);
}

template <typename Scalar>
Eigen::MatrixXd ModelAdapter<Scalar>::encode(const Eigen::MatrixXd& windows) const {
  return run(windows, true);
}

template class ModelAdapter<float>;
template class ModelAdapter<double>;

ImputationTask ImputationTask::make(SpatioTemporalSeries truth, const MissingMask& mask, const ScalerParams& scaler,
                                    Index window) {
  ImputationTask task;
  task.windows = slide_windows(minmax_scale(truth, scaler), mask, window);
  task.truth = std::move(truth);
  task.missing = mask.missing;
  task.scaler = scaler;
  return task;
}

Eigen::MatrixXd overlap_average(const WindowSet& windows, const Eigen::MatrixXd& values) {
  require_stride_one(windows);
  require_width(windows, values);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(windows.sensors, windows.timesteps);
  Eigen::MatrixXd count = Eigen::MatrixXd::Zero(windows.sensors, windows.timesteps);
  for (Index r = 0; r < windows.size(); ++r) {
    const Index origin = windows.origins[r];
    for (Index i = 0; i < windows.sensors; ++i)
      for (Index j = 0; j < windows.window; ++j) {
        sum(i, origin + j) += values(r, windows.column(i, j));
        count(i, origin + j) += 1.0;
      }
  }
  return (count.array() > 0.0).select(sum.array() / count.array(), kNaN).matrix();
}

Eigen::MatrixXd single_position_estimates(const WindowSet& windows, const Eigen::MatrixXd& values, Index position) {
  require_stride_one(windows);
  require_width(windows, values);
  if (position < 0 || position >= windows.window) throw ConfigError("single-imputation position outside the window");
  if (windows.size() == 0) throw ContractError("no windows");
  Eigen::MatrixXd out(windows.sensors, windows.timesteps);
  const Index first = windows.origins.front(), last = windows.size() - 1;
  for (Index t = 0; t < windows.timesteps; ++t) {
    const Index r = std::clamp<Index>(t - position - first, 0, last);
    const Index offset = t - windows.origins[r];
    for (Index i = 0; i < windows.sensors; ++i) out(i, t) = values(r, windows.column(i, offset));
  }
  return out;
}

Eigen::MatrixXd to_flow(const Eigen::MatrixXd& scaled, const ScalerParams& scaler, bool clip_negative) {
  Eigen::MatrixXd out = scaled.unaryExpr([&](double v) { return scaler.inverse(v); });
  if (clip_negative) out = out.unaryExpr([](double v) { return v < 0.0 ? 0.0 : v; });
  return out;
}

ImputationReport make_report(const std::string& method, const Eigen::MatrixXd& estimates, const ImputationTask& task) {
  const auto indices = task.indices();
  const Metrics m = evaluate(estimates, task.truth.values, indices);
  ImputationReport report;
  report.method = method;
  report.mae = m.mae;
  report.rmse = m.rmse;
  report.rows.reserve(indices.size());
  for (const auto& c : indices) {
    report.rows.push_back({c.sensor, c.t, task.truth.timestamp(c.t), task.truth.values(c.sensor, c.t),
                           estimates(c.sensor, c.t)});
  }
  return report;
}

ImputationReport multiple_impute(const WindowModel& model, const ImputationTask& task) {
  require_stride_one(task.windows);
  require_dims(model, task.windows);
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXd recon = model.reconstruct(task.windows.corrupted);
  const double inference = seconds_since(start);
  auto report = make_report("multiple", to_flow(overlap_average(task.windows, recon), task.scaler, task.clip_negative),
                            task);
  report.timings["inference"] = inference;
  return report;
}

ImputationReport single_impute(const WindowModel& model, const ImputationTask& task, Index position) {
  require_stride_one(task.windows);
  require_dims(model, task.windows);
  if (position < 0) position = task.windows.window - 1;
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXd recon = model.reconstruct(task.windows.corrupted);
  const double inference = seconds_since(start);
  auto report = make_report(
      "single", to_flow(single_position_estimates(task.windows, recon, position), task.scaler, task.clip_negative),
      task);
  report.timings["inference"] = inference;
  report.details["position"] = position;
  return report;
}

Eigen::MatrixXd encode_latents(const WindowModel& model, const WindowSet& windows) {
  require_dims(model, windows);
  return model.encode(windows.corrupted);
}

Eigen::MatrixXd donor_windows(const WindowSet& train) {
  return fill_unobserved(train.clean, train.valid, observed_column_mean(train.clean, train.valid));
}

ImputationReport latent_knn_impute(const WindowModel& model, const WindowSet& train, const ImputationTask& task,
                                   Index k) {
  require_dims(model, train);
  require_dims(model, task.windows);
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXd train_latents = encode_latents(model, train);
  const Eigen::MatrixXd test_latents = encode_latents(model, task.windows);
  const double encoding = seconds_since(start);
  auto report = latent_knn_impute(train_latents, donor_windows(train), test_latents, task, k);
  report.timings["encode"] = encoding;
  return report;
}

ImputationReport latent_knn_impute(const Eigen::MatrixXd& train_latents, const Eigen::MatrixXd& donors,
                                   const Eigen::MatrixXd& test_latents, const ImputationTask& task, Index k) {
  require_stride_one(task.windows);
  if (donors.rows() != train_latents.rows()) throw DimensionError("one donor window per training latent required");
  if (test_latents.rows() != task.windows.size()) throw DimensionError("one latent per test window required");
  if (test_latents.cols() != train_latents.cols()) throw DimensionError("train and test latent sizes differ");
  if (k < 1 || k > train_latents.rows()) {
    throw ConfigError("k=" + std::to_string(k) + " must lie in [1, " + std::to_string(train_latents.rows()) +
                      "] training windows");
  }
  if (donors.cols() != task.windows.width()) throw DimensionError("donor windows do not match the test window width");
  const BruteForceKnn index(train_latents);
  Eigen::MatrixXd values(task.windows.size(), task.windows.width());
  const auto start = std::chrono::steady_clock::now();
  parallel_chunks(task.windows.size(), [&](Index first, Index last) {
    for (Index r = first; r < last; ++r) {
      const auto found = index.query(test_latents.row(r), k);
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(donors.cols());
      for (const auto& nb : found) mean += donors.row(nb.index);
      values.row(r) = mean / static_cast<double>(found.size());
    }
  });
  const double scan = seconds_since(start);
  auto report =
      make_report("latent_knn", to_flow(overlap_average(task.windows, values), task.scaler, task.clip_negative), task);
  report.timings["knn_scan"] = scan;
  report.details["k"] = k;
  report.details["latent_size"] = train_latents.cols();
  report.details["comparisons"] = index.comparisons();
  return report;
}

ImputationReport knn_pca_impute(const KnnPcaImputer& imputer, const ImputationTask& task, Index k) {
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXd values = imputer.impute_all(task.windows, k);
  const double scan = seconds_since(start);
  auto report =
      make_report("knn_pca", to_flow(overlap_average(task.windows, values), task.scaler, task.clip_negative), task);
  report.timings["knn_scan"] = scan;
  report.details["k"] = k;
  report.details["n_components"] = imputer.pca().n_components();
  return report;
}

}  // namespace stimpute
