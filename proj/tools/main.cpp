#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prethermal/error.hpp"
#include "prethermal/experiment.hpp"
#include "prethermal/version.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool quiet = false;
};

prethermal::ExperimentConfig resolve(const GlobalFlags& flags) {
  prethermal::ExperimentConfig config;
  if (!flags.config_path.empty()) config = prethermal::load_experiment(flags.config_path);
  if (flags.output) config.output_dir = *flags.output;
  if (flags.seed) config.master_seed = *flags.seed;
  if (flags.workers) config.workers = *flags.workers;
  config.quiet = flags.quiet;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Floquet prethermalization desk laboratory"};
  app.require_subcommand(1);
  GlobalFlags flags;
  app.add_option("--config", flags.config_path, "Experiment config (JSON)");
  app.add_option("--output", flags.output, "Output directory");
  app.add_option("--seed", flags.seed, "Master seed");
  app.add_option("--workers", flags.workers, "Worker threads (0 = all cores)");
  app.add_flag("--quiet", flags.quiet, "Suppress progress output");

  auto* generate = app.add_subcommand("generate", "Generate lattice realizations");
  auto* simulate = app.add_subcommand("simulate", "Simulate the ensemble survival trace");
  auto* sweep = app.add_subcommand("sweep", "Run a parameter sweep with scaling report");
  auto* pipeline = app.add_subcommand("pipeline", "Synthetic acquisition round trip");
  std::optional<std::string> pipeline_trace;
  pipeline->add_option("--trace", pipeline_trace, "Survival trace CSV (default: simulate)");
  auto* analyze = app.add_subcommand("analyze", "Fit and characterize a trace");
  std::string analyze_trace;
  std::vector<std::string> analyses;
  analyze->add_option("trace", analyze_trace, "Trace CSV")->required();
  analyze->add_option("--analyses", analyses, "Analyses to run")->delimiter(',');
  auto* version = app.add_subcommand("version", "Print version");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(prethermal::ExitCode::config_error);
  }

  if (version->parsed()) {
    std::cout << "prethermal " << prethermal::version << "\n";
    return 0;
  }
  return prethermal::guarded(
      [&]() -> int {
        const prethermal::ExperimentConfig config = resolve(flags);
        if (generate->parsed()) return prethermal::cmd_generate(config, std::cout);
        if (simulate->parsed()) return prethermal::cmd_simulate(config, std::cout);
        if (sweep->parsed()) return prethermal::cmd_sweep(config, std::cout);
        if (pipeline->parsed()) return prethermal::cmd_pipeline(config, pipeline_trace, std::cout);
        return prethermal::cmd_analyze(config, analyze_trace, analyses, std::cout);
      },
      std::cerr);
}
