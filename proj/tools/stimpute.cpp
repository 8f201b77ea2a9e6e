#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "stimpute/errors.hpp"
#include "stimpute/experiment.hpp"

namespace fs = std::filesystem;
using namespace stimpute;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<int> precision;
};

class RefusedOverwrite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : RunConfig::load(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.precision) c.train.precision = *g.precision;
  if (!g.out.empty()) c.output_dir = g.out;
  c.validate();
  return c;
}

fs::path run_dir(const RunConfig& c) { return fs::path(c.output_dir) / c.hash(); }

void guard(const fs::path& artifact, bool force) {
  if (fs::exists(artifact) && !force) {
    throw RefusedOverwrite("'" + artifact.string() + "' already exists for this config; pass --force to overwrite");
  }
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

void write_config(const RunConfig& c) {
  auto out = open_out(run_dir(c) / "config.json");
  nlohmann::json j = c.to_json();
  j["config_hash"] = c.hash();
  out << j.dump(2) << '\n';
}

int cmd_synth(const GlobalOptions& g, const std::string& file) {
  RunConfig c = resolve_config(g);
  if (c.csv) throw ConfigError("synth needs a synthetic data source, config names csv '" + *c.csv + "'");
  const fs::path path = file.empty() ? run_dir(c) / "data.csv" : fs::path(file);
  guard(path, g.force);
  const SpatioTemporalSeries series = load_series(c);
  auto out = open_out(path);
  out << provenance_line(c);
  write_csv(series, out);
  if (file.empty()) write_config(c);
  std::cout << "wrote " << path.string() << " (" << series.sensors() << " sensors, " << series.timesteps()
            << " steps)\n";
  return 0;
}

int cmd_train(const GlobalOptions& g) {
  RunConfig c = resolve_config(g);
  const fs::path dir = run_dir(c);
  guard(dir / "model.ckpt", g.force);
  const PreparedData data = prepare_data(c);
  const ModelSpec spec =
      c.model.resolve({data.train_windows.sensors, data.train_windows.window, data.train_windows.features});
  std::cerr << "training " << display_name(spec.variant) << " on " << data.train_windows.size() << " windows\n";
  const TrainedModel trained = train_model(c, data, spec, [&](const EpochLoss& e) {
    std::cerr << "epoch " << e.epoch << "/" << c.train.epochs << " train_mse=" << e.train_mse
              << " val_mse=" << e.val_mse << '\n';
  });
  write_config(c);
  trained.checkpoint.write(dir / "model.ckpt");
  trained.best_checkpoint.write(dir / "best.ckpt");
  auto loss = open_out(dir / "loss.csv");
  loss << provenance_line(c);
  write_loss_csv(trained.trace, loss);
  std::cout << "wrote " << dir.string() << " (best epoch " << trained.best_epoch << ", " << trained.seconds
            << " s)\n";
  return 0;
}

int cmd_impute(const GlobalOptions& g, const std::string& checkpoint, const std::vector<std::string>& methods_flag) {
  RunConfig c = resolve_config(g);
  if (!methods_flag.empty()) {
    c.impute.methods = methods_flag;
    c.validate();
  }
  const fs::path dir = run_dir(c);
  guard(dir / "report.json", g.force);
  const PreparedData data = prepare_data(c);
  const InputDims dims{data.train_windows.sensors, data.train_windows.window, data.train_windows.features};

  std::unique_ptr<WindowModel> model;
  bool needs_model = false;
  for (const auto& m : c.impute.methods) needs_model = needs_model || method_needs_model(m);
  if (needs_model) {
    const fs::path path = checkpoint.empty() ? dir / "model.ckpt" : fs::path(checkpoint);
    if (!fs::exists(path)) {
      throw ConfigError("checkpoint '" + path.string() + "' not found; run 'stimpute train' first or pass --checkpoint");
    }
    model = load_model(Container::read(path, "model"), dims);
  }

  BaselineCache cache;
  std::vector<ImputationReport> reports;
  for (const auto& m : c.impute.methods) {
    std::cerr << "imputing with " << m << '\n';
    reports.push_back(run_method(m, c, data, model.get(), cache));
  }

  nlohmann::json report = {{"config_hash", c.hash()}, {"seed", c.seed}, {"precision", c.precision()},
                           {"missing_count", data.task.indices().size()}};
  nlohmann::json timings = {{"config_hash", c.hash()}, {"seed", c.seed}};
  for (const auto& r : reports) {
    nlohmann::json entry = r.to_json();
    timings[r.method] = entry["timings"];
    entry.erase("timings");
    report["reports"].push_back(entry);
  }
  write_config(c);
  open_out(dir / "report.json") << report.dump(2) << '\n';
  open_out(dir / "timings.json") << timings.dump(2) << '\n';
  {
    auto out = open_out(dir / "perindex.csv");
    out << provenance_line(c) << ImputationReport::kRowsHeader << '\n';
    for (const auto& r : reports) r.write_rows_csv(out, data.task.truth.sensor_ids);
  }
  {
    auto out = open_out(dir / "comparison.csv");
    out << provenance_line(c);
    write_comparison_csv(reports, out);
  }
  if (cache.table) cache.table->to_container().write(dir / "wh_table.bin");
  if (cache.knn_pca) cache.knn_pca->pca().to_container().write(dir / "pca.bin");
  if (model) {
    const Eigen::MatrixXd latents = encode_latents(*model, data.task.windows);
    auto out = open_out(dir / "plots" / "latents.csv");
    out << provenance_line(c) << "window_start";
    for (Index k = 0; k < latents.cols(); ++k) out << ",z" << k;
    out << '\n';
    for (Index r = 0; r < latents.rows(); ++r) {
      out << format_timestamp(data.task.windows.origin_times[r]);
      for (Index k = 0; k < latents.cols(); ++k) out << ',' << nlohmann::json(latents(r, k)).dump();
      out << '\n';
    }
  }
  for (const auto& r : reports) {
    std::printf("%-16s MAE %10.4f  RMSE %10.4f  n=%zu\n", r.method.c_str(), r.mae, r.rmse, r.rows.size());
  }
  return 0;
}

int cmd_sweep(const GlobalOptions& g, const std::string& driver) {
  RunConfig c = resolve_config(g);
  if (!driver.empty()) {
    c.sweep.driver = driver;
    c.validate();
  }
  const fs::path path = run_dir(c) / "plots" / (c.sweep.driver + "_sweep.csv");
  guard(path, g.force);
  const PreparedData data = prepare_data(c);
  const auto rows = run_sweep(c, data, [](const std::string& msg) { std::cerr << msg << '\n'; });
  write_config(c);
  auto out = open_out(path);
  out << provenance_line(c);
  write_sweep_csv(rows, out);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.ok ? 0 : 1;
  std::cout << "wrote " << path.string() << " (" << rows.size() << " rows, " << failed << " failed)\n";
  return failed == 0 ? 0 : kExitFailure;
}

int cmd_evaluate(const GlobalOptions& g, const std::string& perindex) {
  fs::path path = perindex;
  if (path.empty()) path = run_dir(resolve_config(g)) / "perindex.csv";
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  for (const auto& [method, m] : evaluate_rows_csv(in)) {
    std::printf("%-16s MAE %10.4f  RMSE %10.4f  n=%lld\n", method.c_str(), m.mae, m.rmse,
                static_cast<long long>(m.count));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal missing data imputation with denoising autoencoders"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config, "Run config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Run seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_flag("--force", g.force, "Overwrite existing artifacts");
  app.add_option("--precision", g.precision, "Floating point precision")->check(CLI::IsMember({32, 64}));

  std::string synth_file;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset CSV");
  synth->add_option("--file", synth_file, "Write the CSV here instead of the run directory");

  auto* train = app.add_subcommand("train", "Train the configured autoencoder");

  std::string checkpoint;
  std::vector<std::string> methods;
  auto* impute = app.add_subcommand("impute", "Impute the test split and write reports");
  impute->add_option("--checkpoint", checkpoint, "Model checkpoint (default: the run's model.ckpt)");
  impute->add_option("--method", methods, "Methods to run (default: the config's list)")
      ->check(CLI::IsMember(kMethods));

  std::string driver;
  auto* sweep = app.add_subcommand("sweep", "Run a parameter sweep");
  sweep->add_option("--driver", driver, "Swept parameter")->check(CLI::IsMember({"k", "latent_size", "variant"}));

  std::string perindex;
  auto* evaluate = app.add_subcommand("evaluate", "Recompute MAE/RMSE from a per-index CSV");
  evaluate->add_option("--perindex", perindex, "Per-index CSV (default: the run's perindex.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(g, synth_file);
    if (*train) return cmd_train(g);
    if (*impute) return cmd_impute(g, checkpoint, methods);
    if (*sweep) return cmd_sweep(g, driver);
    if (*evaluate) return cmd_evaluate(g, perindex);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const stimpute::ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return kExitInput;
  } catch (const RefusedOverwrite& e) {
    std::cerr << "refusing to overwrite: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
