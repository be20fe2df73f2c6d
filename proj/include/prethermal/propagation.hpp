#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prethermal/spin_model.hpp"

namespace prethermal {

enum class PulseModel { delta, finite };

struct AcField {
  double amplitude_hz = 0.0;
  double frequency_hz = 0.0;
  double phase_rad = 0.0;
};

struct PulseSequenceSpec {
  double flip_angle = constants::pi / 2;
  double spacing_s = 100e-6;
  double pulse_width_s = 0.0;
  double acquisition_window_s = 0.0;
  long long pulse_count = 1;
  PulseModel pulse_model = PulseModel::delta;
  std::optional<AcField> ac_field;
  int ac_substeps = 64;

  void validate() const;
  double drive_frequency_hz() const { return 1.0 / spacing_s; }
  /// f_ac = theta / (2 pi tau), the field frequency that rectifies in the toggling frame.
  double resonant_ac_frequency_hz() const { return flip_angle / (constants::two_pi * spacing_s); }
};

struct BlochComponents {
  std::vector<double> ix;
  std::vector<double> iy;
  std::vector<double> iz;
};

/// Survival s(t) = Tr(I_x(t) I_x) / Tr(I_x I_x); s(0) = 1.
struct EvolutionTrace {
  std::vector<double> times;
  std::vector<double> survival;
  std::optional<BlochComponents> bloch;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return times.size(); }
  void validate() const;
};

/// One drive period U = R_x(theta) exp(-i H tau) with its spectral decomposition
/// U = V diag(exp(-i phase_a)) V^dagger.
struct CyclePropagator {
  Matrix unitary;
  Eigen::VectorXd eigenphases;
  Eigen::VectorXcd eigenvalues;
  Matrix eigenvectors;
  double period_s = 0.0;
  int spins = 0;
};

nlohmann::json to_json(const PulseSequenceSpec& spec);
PulseSequenceSpec sequence_from_json(const nlohmann::json& doc);

/// exp(-i H t) for Hermitian H.
Matrix unitary_exp(const Matrix& hermitian, double t);

/// Spectral decomposition of an arbitrary unitary via complex Schur form.
CyclePropagator decompose_unitary(Matrix unitary, double period_s);

CyclePropagator cycle_unitary(const HamiltonianSet& h, const PulseSequenceSpec& seq);

/// Stroboscopic survival for n = 0 .. pulses, O(4^N) per sample.
EvolutionTrace evolve_survival(const CyclePropagator& prop, long long pulses, bool with_bloch = false);

/// Survival at arbitrary (sorted, non-negative) pulse counts.
EvolutionTrace survival_at(const CyclePropagator& prop, const std::vector<long long>& pulses);

/// sum_{n=0}^{pulses} s(n tau) in closed form.
double integrated_survival(const CyclePropagator& prop, long long pulses);

/// Infinite-time average of s (diagonal ensemble of the cycle unitary).
double long_time_survival(const CyclePropagator& prop);

EvolutionTrace fid(const HamiltonianSet& h, const std::vector<double>& times);

EvolutionTrace evolve_with_ac_field(const HamiltonianSet& h, const PulseSequenceSpec& seq);

/// Smallest K <= max_cycles with f_ac * tau * K an integer.
int ac_supercycle_length(const PulseSequenceSpec& seq, int max_cycles = 1000);

/// Product of the K AC-driven cycles after which the field phase repeats. Survival on the
/// result at count m equals the AC-driven survival after m * K pulses.
CyclePropagator ac_supercycle(const HamiltonianSet& h, const PulseSequenceSpec& seq, int max_cycles = 1000);

struct FlipAnglePoint {
  double theta = 0.0;
  double integrated = 0.0;
};

std::vector<FlipAnglePoint> flip_angle_sweep(const HamiltonianSet& h, const PulseSequenceSpec& tmpl,
                                             const std::vector<double>& thetas);

EvolutionTrace average_traces(const std::vector<EvolutionTrace>& traces);

/// Unique, sorted pulse counts 0, then ~log-spaced up to max_pulse.
std::vector<long long> log_spaced_pulses(long long max_pulse, int points);

void write_trace_csv(const EvolutionTrace& trace, const std::string& path);
std::string trace_to_csv(const EvolutionTrace& trace);
EvolutionTrace read_trace_csv(const std::string& path);
EvolutionTrace trace_from_csv(const std::string& text);

/// Shortest decimal that round-trips to the same double.
std::string format_double(double value);

}  // namespace prethermal
