#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prethermal/propagation.hpp"

namespace prethermal {

enum class PhaseModel { coherent, random };

struct AcquisitionConfig {
  double heterodyne_frequency_hz = 20e6;
  double sample_interval_s = 1e-9;
  double window_length_s = 2e-6;
  double noise_sigma = 0.0;
  double polarization_scale = 1.0;
  std::optional<double> t1_envelope_s;
  PhaseModel phase_model = PhaseModel::coherent;
  std::uint64_t rng_seed = 0;

  void validate() const;
  std::size_t samples_per_window() const;
};

struct RawWindow {
  std::vector<double> samples;
  double start_time_s = 0.0;
};

struct DecayTrace {
  std::vector<double> times;
  std::vector<double> amplitudes;
  std::optional<double> moving_average_window_s;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return times.size(); }
};

/// Noise stream for one window; seeded from (config seed, window index) so windows are independent.
RawWindow synthesize_window(double amplitude, double phase, double start_time_s,
                            const AcquisitionConfig& config, std::uint64_t window_index = 0);

/// 2/L |X_k| at the bin nearest the heterodyne frequency.
double extract_amplitude(const RawWindow& window, const AcquisitionConfig& config);

DecayTrace assemble_trace(const std::vector<double>& amplitudes, double tau_s);

/// Centred mean over floor(window/tau) points; the window shrinks symmetrically at the edges.
DecayTrace moving_average(const DecayTrace& trace, double window_s);

DecayTrace pipeline_round_trip(const EvolutionTrace& survival, const AcquisitionConfig& config);

/// Heterodyne carrier phase at the start of a window.
double window_phase(double start_time_s, const AcquisitionConfig& config, std::uint64_t window_index);

nlohmann::json to_json(const AcquisitionConfig& config);
AcquisitionConfig acquisition_from_json(const nlohmann::json& doc);

/// Little-endian float32 samples, windows concatenated, plus a JSON sidecar at `path + ".json"`.
void write_raw_windows(const std::vector<RawWindow>& windows, const AcquisitionConfig& config,
                       const std::string& path);
std::vector<RawWindow> read_raw_windows(const std::string& path);

EvolutionTrace to_evolution_trace(const DecayTrace& trace);
DecayTrace decay_from_evolution(const EvolutionTrace& trace);

}  // namespace prethermal
