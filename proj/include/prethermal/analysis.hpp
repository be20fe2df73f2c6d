#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prethermal/acquisition.hpp"

namespace prethermal {

struct FitSettings {
  int max_iterations = 200;
  double relative_tolerance = 1e-8;
};

/// A exp[-(t/T)^alpha].
struct StretchedFit {
  double amplitude = 0.0;
  double lifetime_s = 0.0;
  double exponent = 0.5;
  bool exponent_fixed = false;
  double residual_rms = 0.0;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  // (A, T, alpha)
  int iterations = 0;
  std::size_t n_points = 0;

  double operator()(double t) const;
};

struct ExponentialTerm {
  double amplitude = 0.0;
  double lifetime_s = 0.0;
};

struct MultiExpFit {
  std::vector<ExponentialTerm> terms;  // ascending lifetime
  double residual_rms = 0.0;
  int iterations = 0;
  std::size_t n_points = 0;

  double operator()(double t) const;
};

struct CuspFit {
  double cusp_time_s = 0.0;
  double rms_one_segment = 0.0;
  double rms_two_segment = 0.0;
  double slope_before = 0.0;  // d ln s / d sqrt(t)
  double slope_after = 0.0;
};

enum class Regime { I, II, III, IV };

struct RegimeSettings {
  double alpha_threshold = 0.15;
  double infinite_temperature_level = 0.02;
  double cusp_rms_gain = 0.2;
  double alpha_window_decades = 0.5;
  int alpha_samples = 40;
};

struct RegimeSegmentation {
  std::optional<double> cusp_time_s;
  std::optional<double> boundary_ii_iii_s;
  std::optional<double> onset_iv_s;
  std::vector<Regime> labels;
  std::vector<double> alpha_times_s;
  std::vector<double> local_alpha;
};

struct HarmonicSettings {
  double peak_threshold = 5.0;  // multiples of the median spectral floor
  double relative_threshold = 1e-3;  // fraction of the strongest bin
  double primary_fraction = 0.25;    // of the strongest peak; the lowest peak above it is the primary
  int merge_bins = 3;
  int max_harmonic = 5;
  double match_bins = 1.5;
};

struct HarmonicPeak {
  int harmonic = 0;             // 0 when the peak is not an integer multiple of the primary
  double frequency_hz = 0.0;    // as observed, within (0, 1/(2 tau)]
  double unfolded_hz = 0.0;     // alias image nearest n * f_1
  double amplitude = 0.0;
};

struct HarmonicSpectrum {
  std::vector<HarmonicPeak> peaks;      // every merged peak above threshold, ascending frequency
  std::vector<HarmonicPeak> harmonics;  // n = 1 .. max_harmonic that matched a peak
  double tau_s = 0.0;
  double bin_width_hz = 0.0;
  double noise_floor = 0.0;
  std::vector<double> frequencies_hz;
  std::vector<double> magnitudes;

  std::optional<double> primary_hz() const;
};

struct HarmonicSlopes {
  std::vector<int> harmonics;
  std::vector<double> slopes;
  std::vector<double> intercepts_hz;
  std::vector<double> ratios;  // slope_n / slope_1; empty when only one harmonic
};

enum class ScalingAxis { semilog_rate_vs_jtau, loglog_lifetime_vs_omega };

struct ScalingPoint {
  double x = 0.0;  // J tau (semilog) or omega in rad/s (loglog)
  double lifetime_s = 0.0;
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

struct ScalingFit {
  LinearFit line;
  ScalingAxis axis = ScalingAxis::semilog_rate_vs_jtau;
  std::size_t n_points = 0;
};

StretchedFit fit_stretched_exponential(const DecayTrace& trace,
                                       std::optional<double> exponent_fixed = std::nullopt,
                                       const FitSettings& settings = {});

MultiExpFit fit_multi_exponential(const DecayTrace& trace, int terms = 5,
                                  const FitSettings& settings = {});

/// First downward crossing of reference/e, linearly interpolated. The reference defaults to
/// the first sample (the plateau level for a plateau-normalized trace).
double one_over_e_lifetime(const DecayTrace& trace, std::optional<double> reference = std::nullopt);

CuspFit detect_cusp(const DecayTrace& trace, double rms_gain = 0.2);

RegimeSegmentation segment_regimes(const DecayTrace& trace, const RegimeSettings& settings = {});

/// Spectrum of a per-pulse sampled trace (spacing tau).
HarmonicSpectrum harmonic_spectrum(const DecayTrace& trace, double tau_s,
                                   const HarmonicSettings& settings = {});

/// Linear fit of unfolded f_n against theta / (2 pi tau) across flip angles.
HarmonicSlopes harmonic_slope_fit(const std::vector<std::pair<double, HarmonicSpectrum>>& spectra);

ScalingFit decay_rate_scaling(const std::vector<ScalingPoint>& points, ScalingAxis axis);

double throughput_gain(double epsilon, double t1_ratio, double t2_ratio);

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);
double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y);

/// Lawson-Hanson nonnegative least squares.
Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iterations = 500);

nlohmann::json to_json(const StretchedFit& fit, const FitSettings& settings = {});
nlohmann::json to_json(const MultiExpFit& fit, const FitSettings& settings = {});
nlohmann::json to_json(const CuspFit& fit);
nlohmann::json to_json(const RegimeSegmentation& seg, const RegimeSettings& settings = {});
nlohmann::json to_json(const HarmonicSpectrum& spectrum, const HarmonicSettings& settings = {});
nlohmann::json to_json(const HarmonicSlopes& slopes);
nlohmann::json to_json(const ScalingFit& fit);

StretchedFit stretched_from_json(const nlohmann::json& doc);

std::string to_string(Regime regime);

}  // namespace prethermal
