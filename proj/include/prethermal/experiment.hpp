#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prethermal/acquisition.hpp"
#include "prethermal/analysis.hpp"
#include "prethermal/lattice.hpp"
#include "prethermal/propagation.hpp"

namespace prethermal {

enum class ExitCode { success = 0, config_error = 2, numerical_failure = 3, partial_failure = 4 };

struct SweepSpec {
  std::string parameter;  // tau, theta, f_ac or zeta
  std::vector<double> values;
};

struct AnalysisRequest {
  std::vector<std::string> names;
  int multi_exp_terms = 5;
  std::optional<double> moving_average_s;
  std::optional<double> exponent_fixed;
  int harmonic_points = 128;
};

struct ExperimentConfig {
  LatticeConfig lattice;
  std::optional<int> cluster_size;
  DisorderModel disorder;
  PulseSequenceSpec sequence;
  std::optional<double> zeta;
  std::optional<int> sample_points;
  bool bloch = false;
  std::optional<SweepSpec> sweep;
  std::optional<AcquisitionConfig> acquisition;
  std::optional<double> acquisition_moving_average_s;
  bool write_raw_windows = false;
  AnalysisRequest analysis;
  int realizations = 1;
  std::uint64_t master_seed = 0;
  std::string output_dir = "out";
  int workers = 0;  // 0: hardware concurrency
  bool quiet = false;

  nlohmann::json to_json() const;
};

/// Strict parse: unknown sections or keys raise InvalidConfig.
ExperimentConfig parse_experiment(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::string& path);

/// Checks every module precondition the config implies, before any compute.
void validate_experiment(const ExperimentConfig& config);

struct Realization {
  SpinLattice lattice;
  std::uint64_t lattice_seed = 0;
  std::uint64_t disorder_seed = 0;
};

/// Realization r draws its lattice and disorder from derive_seed(master, 2r) and
/// derive_seed(master, 2r + 1); every sweep point reuses the same realizations.
Realization make_realization(const ExperimentConfig& config, int index);
std::vector<Realization> build_ensemble(const ExperimentConfig& config);

/// Pooled strongest-partner median across the ensemble, in Hz.
double ensemble_coupling(const std::vector<Realization>& ensemble);

/// The sequence at a sweep point (or the base point when value is empty).
PulseSequenceSpec point_sequence(const ExperimentConfig& config, double coupling_hz,
                                 std::optional<double> sweep_value = std::nullopt);

EvolutionTrace simulate_realization(const Realization& realization, const PulseSequenceSpec& seq,
                                    const ExperimentConfig& config);

/// Runs `count` independent jobs on a bounded pool; job i runs exactly once.
void run_parallel(std::size_t count, int workers, const std::function<void(std::size_t)>& job);

std::uint64_t fnv1a64(const std::string& text);

int cmd_generate(const ExperimentConfig& config, std::ostream& log);
int cmd_simulate(const ExperimentConfig& config, std::ostream& log);
int cmd_sweep(const ExperimentConfig& config, std::ostream& log);
int cmd_pipeline(const ExperimentConfig& config, const std::optional<std::string>& trace_path,
                 std::ostream& log);
int cmd_analyze(const ExperimentConfig& config, const std::string& trace_path,
                const std::vector<std::string>& analyses, std::ostream& log);

/// Runs a command body, mapping library errors to exit codes and printing them to `err`.
int guarded(const std::function<int()>& body, std::ostream& err);

}  // namespace prethermal
