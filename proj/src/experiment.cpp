#include "stimpute/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>

#include "stimpute/errors.hpp"
#include "stimpute/random.hpp"

namespace stimpute {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename T>
void read(const json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T value;
  read(j, key, value, where);
  out = value;
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

template <typename Scalar>
TrainedModel train_at(const RunConfig& config, const PreparedData& data, const ModelSpec& spec,
                      const std::function<void(const EpochLoss&)>& on_epoch) {
  TrainConfig tc = config.train;
  tc.seed = config.stream_seed("train");
  auto result = train(build_model<Scalar>(spec, config.stream_seed("init")), data.train_windows, tc, on_epoch);
  const json extra = {{"config_hash", config.hash()},
                      {"run_seed", config.seed},
                      {"best_epoch", result.best_epoch},
                      {"scaler", {{"min", data.scaler.min}, {"max", data.scaler.max}}}};
  TrainedModel out;
  out.spec = spec;
  out.checkpoint = to_container(result.final_model, extra);
  out.best_checkpoint = to_container(result.best_model, extra);
  out.trace = result.trace;
  out.best_epoch = result.best_epoch;
  out.seconds = result.seconds;
  out.model = std::make_unique<ModelAdapter<Scalar>>(std::move(result.final_model));
  return out;
}

}  // namespace

bool method_needs_model(const std::string& method) {
  return method == "multiple" || method == "single" || method == "latent_knn";
}

ModelSpec ModelOverrides::resolve(InputDims input) const { return resolve(input, variant); }

ModelSpec ModelOverrides::resolve(InputDims input, Variant v) const {
  ModelSpec spec = ModelSpec::defaults(v, input);
  if (hidden_layers) spec.hidden_layers = *hidden_layers;
  if (kernel_widths) spec.kernel_widths = *kernel_widths;
  if (filters_per_kernel) spec.filters_per_kernel = *filters_per_kernel;
  if (lstm_units) spec.lstm_units = *lstm_units;
  if (dropout) spec.dropout = *dropout;
  if (leaky_alpha) spec.leaky_alpha = *leaky_alpha;
  spec.validate();
  return spec;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  check_keys(j, {"data", "split_ratio", "scaler_scope", "window", "missing", "model", "train", "impute", "sweep", "seed",
                 "output_dir"},
             "config");
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"csv", "synth"}, "data");
    read(d, "csv", c.csv, "data");
    if (d.contains("synth") && !d.at("synth").is_null()) {
      const json& s = d.at("synth");
      check_keys(s, {"sensors", "days", "seed", "noise_level", "event_rate", "start_time", "step_seconds"},
                 "data.synth");
      read(s, "sensors", c.synth.sensors, "data.synth");
      read(s, "days", c.synth.days, "data.synth");
      if (s.contains("seed") && !s.at("seed").is_null()) {
        read(s, "seed", c.synth.seed, "data.synth");
        c.synth_seed_set = true;
      }
      read(s, "noise_level", c.synth.noise_level, "data.synth");
      read(s, "event_rate", c.synth.event_rate, "data.synth");
      read(s, "start_time", c.synth.start_time, "data.synth");
      read(s, "step_seconds", c.synth.step_seconds, "data.synth");
    }
  }
  read(j, "split_ratio", c.split_ratio, "config");
  read(j, "scaler_scope", c.scaler_scope, "config");
  read(j, "window", c.window, "config");
  if (j.contains("missing")) {
    const json& m = j.at("missing");
    check_keys(m, {"fraction", "min_hours", "max_hours"}, "missing");
    read(m, "fraction", c.missing.fraction, "missing");
    read(m, "min_hours", c.missing.min_hours, "missing");
    read(m, "max_hours", c.missing.max_hours, "missing");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"variant", "hidden_layers", "kernel_widths", "filters_per_kernel", "lstm_units", "dropout",
                   "leaky_alpha"},
               "model");
    if (m.contains("variant")) {
      std::string name;
      read(m, "variant", name, "model");
      c.model.variant = parse_variant(name);
    }
    read(m, "hidden_layers", c.model.hidden_layers, "model");
    read(m, "kernel_widths", c.model.kernel_widths, "model");
    read(m, "filters_per_kernel", c.model.filters_per_kernel, "model");
    read(m, "lstm_units", c.model.lstm_units, "model");
    read(m, "dropout", c.model.dropout, "model");
    read(m, "leaky_alpha", c.model.leaky_alpha, "model");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"batch_size", "epochs", "learning_rate", "beta1", "beta2", "epsilon", "validation_fraction",
                   "grad_clip", "precision"},
               "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "beta1", c.train.beta1, "train");
    read(t, "beta2", c.train.beta2, "train");
    read(t, "epsilon", c.train.epsilon, "train");
    read(t, "validation_fraction", c.train.validation_fraction, "train");
    read(t, "grad_clip", c.train.grad_clip, "train");
    read(t, "precision", c.train.precision, "train");
  }
  if (j.contains("impute")) {
    const json& m = j.at("impute");
    check_keys(m, {"methods", "latent_k", "knn_pca_k", "pca_components", "single_position", "clip_negative",
                   "dtw_slice_days", "dtw_band"},
               "impute");
    read(m, "methods", c.impute.methods, "impute");
    read(m, "latent_k", c.impute.latent_k, "impute");
    read(m, "knn_pca_k", c.impute.knn_pca_k, "impute");
    read(m, "pca_components", c.impute.pca_components, "impute");
    read(m, "single_position", c.impute.single_position, "impute");
    read(m, "clip_negative", c.impute.clip_negative, "impute");
    read(m, "dtw_slice_days", c.impute.neighbor.slice_days, "impute");
    read(m, "dtw_band", c.impute.neighbor.band, "impute");
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    check_keys(s, {"driver", "k", "latent_size", "variants"}, "sweep");
    read(s, "driver", c.sweep.driver, "sweep");
    read(s, "k", c.sweep.k, "sweep");
    read(s, "latent_size", c.sweep.latent_size, "sweep");
    if (s.contains("variants")) {
      std::vector<std::string> names;
      read(s, "variants", names, "sweep");
      c.sweep.variants.clear();
      for (const auto& n : names) c.sweep.variants.push_back(parse_variant(n));
    }
  }
  read(j, "seed", c.seed, "config");
  read(j, "output_dir", c.output_dir, "config");
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  std::vector<std::string> variants;
  for (Variant v : sweep.variants) variants.push_back(to_string(v));
  return {
      {"data",
       {{"csv", optional_json(csv)},
        {"synth",
         {{"sensors", synth.sensors},
          {"days", synth.days},
          {"seed", synth_seed_set ? json(synth.seed) : json(nullptr)},
          {"noise_level", synth.noise_level},
          {"event_rate", synth.event_rate},
          {"start_time", synth.start_time},
          {"step_seconds", synth.step_seconds}}}}},
      {"split_ratio", split_ratio},
      {"scaler_scope", scaler_scope},
      {"window", window},
      {"missing", {{"fraction", missing.fraction}, {"min_hours", missing.min_hours}, {"max_hours", missing.max_hours}}},
      {"model",
       {{"variant", to_string(model.variant)},
        {"hidden_layers", optional_json(model.hidden_layers)},
        {"kernel_widths", optional_json(model.kernel_widths)},
        {"filters_per_kernel", optional_json(model.filters_per_kernel)},
        {"lstm_units", optional_json(model.lstm_units)},
        {"dropout", optional_json(model.dropout)},
        {"leaky_alpha", optional_json(model.leaky_alpha)}}},
      {"train",
       {{"batch_size", train.batch_size},
        {"epochs", train.epochs},
        {"learning_rate", train.learning_rate},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"epsilon", train.epsilon},
        {"validation_fraction", train.validation_fraction},
        {"grad_clip", train.grad_clip},
        {"precision", train.precision}}},
      {"impute",
       {{"methods", impute.methods},
        {"latent_k", impute.latent_k},
        {"knn_pca_k", impute.knn_pca_k},
        {"pca_components", impute.pca_components},
        {"single_position", impute.single_position},
        {"clip_negative", impute.clip_negative},
        {"dtw_slice_days", impute.neighbor.slice_days},
        {"dtw_band", optional_json(impute.neighbor.band)}}},
      {"sweep", {{"driver", sweep.driver}, {"k", sweep.k}, {"latent_size", sweep.latent_size}, {"variants", variants}}},
      {"seed", seed},
      {"output_dir", output_dir}};
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  j["impute"].erase("methods");
  j["sweep"].erase("driver");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

void RunConfig::validate() const {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must lie in (0, 1)");
  if (scaler_scope != "global") throw ConfigError("scaler_scope '" + scaler_scope + "' is not supported (use \"global\")");
  if (window < 1) throw ConfigError("window must be positive");
  if (!(missing.fraction >= 0.0 && missing.fraction < 1.0)) throw ConfigError("missing.fraction must lie in [0, 1)");
  if (!(missing.min_hours > 0.0 && missing.min_hours <= missing.max_hours)) {
    throw ConfigError("missing duration range must satisfy 0 < min_hours <= max_hours");
  }
  if (!csv) synth.validate();
  train.validate();
  model.resolve({synth.sensors, window, 1});
  if (impute.methods.empty()) throw ConfigError("impute.methods is empty");
  for (const auto& m : impute.methods) {
    if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) {
      throw ConfigError("unknown imputation method '" + m + "'");
    }
  }
  if (impute.latent_k < 1 || impute.knn_pca_k < 1) throw ConfigError("k must be at least 1");
  if (impute.pca_components < 1) throw ConfigError("pca_components must be at least 1");
  if (impute.single_position >= window) throw ConfigError("single_position must be inside the window");
  if (sweep.driver != "k" && sweep.driver != "latent_size" && sweep.driver != "variant") {
    throw ConfigError("sweep.driver must be one of k, latent_size, variant");
  }
  if ((sweep.driver == "k" && sweep.k.empty()) || (sweep.driver == "latent_size" && sweep.latent_size.empty()) ||
      (sweep.driver == "variant" && sweep.variants.empty())) {
    throw ConfigError("sweep grid for driver '" + sweep.driver + "' is empty");
  }
}

std::uint64_t RunConfig::stream_seed(const std::string& purpose) const { return derive_seed(seed, purpose); }

SpatioTemporalSeries load_series(const RunConfig& config) {
  if (config.csv) return load_csv(*config.csv);
  SynthSpec spec = config.synth;
  if (!config.synth_seed_set) spec.seed = config.stream_seed("synth");
  return synth_generate(spec);
}

PreparedData prepare_data(const RunConfig& config) {
  SpatioTemporalSeries series = load_series(config);
  series.validate(config.window);
  auto [train, test] = train_test_split(series, config.split_ratio, config.window);
  PreparedData data;
  data.train_mask = generate_missing_blocks(train, config.missing, config.stream_seed("train_mask"));
  const MissingMask test_mask = generate_missing_blocks(test, config.missing, config.stream_seed("test_mask"));
  data.scaler = ScalerParams::fit(train.values, &data.train_mask.missing);
  data.train_windows = slide_windows(minmax_scale(train, data.scaler), data.train_mask, config.window);
  data.train = std::move(train);
  data.task = ImputationTask::make(std::move(test), test_mask, data.scaler, config.window);
  data.task.clip_negative = config.impute.clip_negative;
  return data;
}

TrainedModel train_model(const RunConfig& config, const PreparedData& data, const ModelSpec& spec,
                         const std::function<void(const EpochLoss&)>& on_epoch) {
  if (config.precision() == 64) return train_at<double>(config, data, spec, on_epoch);
  return train_at<float>(config, data, spec, on_epoch);
}

std::unique_ptr<WindowModel> load_model(const Container& checkpoint, const InputDims& expected) {
  if (checkpoint.type != "model") throw ParseError("container type '" + checkpoint.type + "' is not a model");
  const ModelSpec spec = model_spec_from_json(checkpoint.metadata.at("spec"));
  if (!(spec.input == expected)) {
    throw DimensionError("checkpoint has (s, w, f) = (" + std::to_string(spec.input.sensors) + ", " +
                         std::to_string(spec.input.window) + ", " + std::to_string(spec.input.features) +
                         "), data expects (" + std::to_string(expected.sensors) + ", " +
                         std::to_string(expected.window) + ", " + std::to_string(expected.features) + ")");
  }
  if (checkpoint.metadata.value("precision", "float32") == "float64") {
    return std::make_unique<ModelAdapter<double>>(model_from_container<double>(checkpoint));
  }
  return std::make_unique<ModelAdapter<float>>(model_from_container<float>(checkpoint));
}

ImputationReport run_method(const std::string& method, const RunConfig& config, const PreparedData& data,
                            const WindowModel* model, BaselineCache& cache) {
  const auto start = std::chrono::steady_clock::now();
  if (method_needs_model(method) && !model) throw ConfigError("method '" + method + "' needs a trained model");
  auto table = [&]() -> const WeeklyHourlyTable& {
    if (!cache.table) cache.table = WeeklyHourlyTable::fit(data.train, &data.train_mask.missing);
    return *cache.table;
  };
  ImputationReport report;
  if (method == "multiple") {
    report = multiple_impute(*model, data.task);
  } else if (method == "single") {
    report = single_impute(*model, data.task, config.impute.single_position);
  } else if (method == "latent_knn") {
    report = latent_knn_impute(*model, data.train_windows, data.task, config.impute.latent_k);
  } else if (method == "wh_average") {
    report = make_report(method, wh_average_impute(table(), data.task.truth, data.task.missing), data.task);
  } else if (method == "neighbor_value") {
    auto result = neighbor_value_impute(data.train, data.train_mask.missing, data.task.truth, data.task.missing,
                                        table(), config.impute.neighbor);
    report = make_report(method, result.estimates, data.task);
    report.details["single_neighbor"] = result.single_neighbor;
    report.details["table_fallbacks"] = result.table_fallbacks;
  } else if (method == "knn_pca") {
    if (!cache.knn_pca) {
      cache.knn_pca = KnnPcaImputer::from_windows(data.train_windows, config.impute.pca_components);
    }
    report = knn_pca_impute(*cache.knn_pca, data.task, config.impute.knn_pca_k);
  } else {
    throw ConfigError("unknown imputation method '" + method + "'");
  }
  report.method = method;
  report.config_hash = config.hash();
  report.seed = config.seed;
  report.precision = config.precision();
  report.timings["total"] = seconds_since(start);
  return report;
}

std::vector<ImputationReport> run_methods(const std::vector<std::string>& methods, const RunConfig& config,
                                          const PreparedData& data, const WindowModel* model) {
  BaselineCache cache;
  std::vector<ImputationReport> reports;
  for (const auto& m : methods) reports.push_back(run_method(m, config, data, model, cache));
  return reports;
}

std::vector<SweepRow> run_sweep(const RunConfig& config, const PreparedData& data,
                                const std::function<void(const std::string&)>& log) {
  std::vector<SweepRow> rows;
  auto note = [&](const std::string& msg) {
    if (log) log(msg);
  };
  auto record = [&](const std::string& value, const std::string& method, auto&& produce) {
    SweepRow row{config.sweep.driver, value, method, false, 0.0, 0.0, {}};
    try {
      const ImputationReport r = produce();
      row.ok = true;
      row.mae = r.mae;
      row.rmse = r.rmse;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    note(row.value + " " + row.method + (row.ok ? " mae=" + std::to_string(row.mae) : " FAILED: " + row.error));
    rows.push_back(row);
  };
  auto fail_all = [&](const std::string& value, const std::vector<std::string>& methods, const std::string& error) {
    for (const auto& m : methods) {
      rows.push_back({config.sweep.driver, value, m, false, 0.0, 0.0, error});
      note(value + " " + m + " FAILED: " + error);
    }
  };
  const InputDims dims{data.train_windows.sensors, data.train_windows.window, data.train_windows.features};
  BaselineCache cache;

  if (config.sweep.driver == "k") {
    std::unique_ptr<TrainedModel> trained;
    try {
      trained = std::make_unique<TrainedModel>(train_model(config, data, config.model.resolve(dims)));
    } catch (const std::exception& e) {
      for (Index k : config.sweep.k) fail_all(std::to_string(k), {"latent_knn"}, e.what());
      return rows;
    }
    const Eigen::MatrixXd train_latents = encode_latents(*trained->model, data.train_windows);
    const Eigen::MatrixXd test_latents = encode_latents(*trained->model, data.task.windows);
    const Eigen::MatrixXd donors = donor_windows(data.train_windows);
    for (Index k : config.sweep.k) {
      record(std::to_string(k), "latent_knn",
             [&] { return latent_knn_impute(train_latents, donors, test_latents, data.task, k); });
    }
  } else if (config.sweep.driver == "latent_size") {
    const std::vector<std::string> methods{"multiple", "latent_knn"};
    for (Index d : config.sweep.latent_size) {
      const std::string value = std::to_string(d);
      std::unique_ptr<TrainedModel> trained;
      try {
        ModelOverrides o = config.model;
        o.hidden_layers = std::vector<Index>{32, 16, d, 16, 32};
        trained = std::make_unique<TrainedModel>(train_model(config, data, o.resolve(dims, Variant::kFcNn)));
      } catch (const std::exception& e) {
        fail_all(value, methods, e.what());
        continue;
      }
      for (const auto& m : methods) {
        record(value, m, [&] { return run_method(m, config, data, trained->model.get(), cache); });
      }
    }
  } else {
    const std::vector<std::string> methods{"multiple", "single", "latent_knn"};
    for (Variant v : config.sweep.variants) {
      const std::string value = to_string(v);
      std::unique_ptr<TrainedModel> trained;
      try {
        trained = std::make_unique<TrainedModel>(train_model(config, data, config.model.resolve(dims, v)));
      } catch (const std::exception& e) {
        fail_all(value, methods, e.what());
        continue;
      }
      for (const auto& m : methods) {
        record(value, m, [&] { return run_method(m, config, data, trained->model.get(), cache); });
      }
    }
    for (const std::string m : {"wh_average", "neighbor_value", "knn_pca"}) {
      record("baseline", m, [&] { return run_method(m, config, data, nullptr, cache); });
    }
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "driver,value,method,status,mae,rmse,error\n";
  for (const auto& r : rows) {
    std::string error = r.error;
    std::replace(error.begin(), error.end(), ',', ';');
    std::replace(error.begin(), error.end(), '\n', ' ');
    out << r.driver << ',' << r.value << ',' << r.method << ',' << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) out << json(r.mae).dump() << ',' << json(r.rmse).dump();
    else out << ',';
    out << ',' << error << '\n';
  }
}

void write_comparison_csv(const std::vector<ImputationReport>& reports, std::ostream& out) {
  out << "method,mae,rmse,count\n";
  for (const auto& r : reports) {
    out << r.method << ',' << json(r.mae).dump() << ',' << json(r.rmse).dump() << ',' << r.rows.size() << '\n';
  }
}

std::string provenance_line(const RunConfig& config) {
  return "# config_hash=" + config.hash() + " seed=" + std::to_string(config.seed) + "\n";
}

}  // namespace stimpute
