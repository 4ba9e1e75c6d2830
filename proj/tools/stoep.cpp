#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "stoep/cli.hpp"

namespace {

using stoep::cli::ExitCode;

stoep::RunConfig config_or(const std::string& path, stoep::RunConfig defaults) {
  return path.empty() ? defaults : stoep::load_config(path, std::move(defaults));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stoep: hybrid mechanistic / neural epidemic forecaster"};
  app.require_subcommand(1);

  std::string scenario, out_dir;
  auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset from a scenario file");
  simulate->add_option("--scenario", scenario, "INI file with a [synthetic] section")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", out_dir, "output directory")->required();

  std::string config, data_dir, ckpt;
  auto* train = app.add_subcommand("train", "train a model and write the best checkpoint");
  train->add_option("--config", config, "INI run configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data_dir, "directory with observations/mobility/population CSVs")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", ckpt, "checkpoint path")->required();

  std::string at, out_csv;
  auto* forecast = app.add_subcommand("forecast", "forecast one window ending at a date");
  forecast->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  forecast->add_option("--data", data_dir, "data directory")->required()->check(CLI::ExistingDirectory);
  forecast->add_option("--at", at, "last observed date (YYYY-MM-DD)")->required();
  forecast->add_option("--out", out_csv, "output CSV")->required();

  auto* evaluate = app.add_subcommand("evaluate", "horizon report over the test split");
  evaluate->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data", data_dir, "data directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", out_csv, "output CSV")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "verify gradients on the tiny configuration");
  gradcheck->add_option("--config", config, "INI overrides applied on top of the tiny configuration")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ExitCode::kOk : ExitCode::kUsage;
  }

  try {
    if (*simulate) return stoep::cli::simulate(stoep::load_config(scenario), out_dir, std::cout);
    if (*train) return stoep::cli::train(stoep::load_config(config), data_dir, ckpt, std::cout);
    if (*forecast) return stoep::cli::forecast(ckpt, data_dir, at, out_csv, std::cout);
    if (*evaluate) return stoep::cli::evaluate(ckpt, data_dir, out_csv, std::cout);
    if (*gradcheck) return stoep::cli::gradcheck(config_or(config, stoep::RunConfig::tiny()), std::cout);
  } catch (const stoep::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n  hint: see configs/default.ini for every key and its default\n";
    return ExitCode::kUsage;
  } catch (const stoep::Error& e) {
    std::cerr << "data error: " << e.what() << "\n  hint: check the CSV layout described in README.md\n";
    return ExitCode::kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ExitCode::kUsage;
  }
  return ExitCode::kUsage;
}
