#include "prethermal/acquisition.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "prethermal/error.hpp"
#include "prethermal/seeding.hpp"

namespace prethermal {

void AcquisitionConfig::validate() const {
  if (!(sample_interval_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "sample interval must be > 0");
  if (!(heterodyne_frequency_hz > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "heterodyne frequency must be > 0");
  }
  if (!(window_length_s >= 10.0 / heterodyne_frequency_hz)) {
    throw Error(ErrorCode::InvalidConfig, "t_acq must cover at least 10 heterodyne periods");
  }
  if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidConfig, "noise_sigma must be >= 0");
  if (!std::isfinite(polarization_scale)) {
    throw Error(ErrorCode::InvalidConfig, "polarization scale must be finite");
  }
  if (t1_envelope_s && !(*t1_envelope_s > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "t1_envelope must be > 0");
  }
}

std::size_t AcquisitionConfig::samples_per_window() const {
  // Guard against t_acq/dt landing a hair below an integer.
  return static_cast<std::size_t>(std::floor(window_length_s / sample_interval_s + 1e-9));
}

double window_phase(double start_time_s, const AcquisitionConfig& config, std::uint64_t window_index) {
  if (config.phase_model == PhaseModel::random) {
    std::mt19937_64 rng(derive_seed(config.rng_seed ^ 0x5048415345ULL, window_index));
    return std::uniform_real_distribution<double>(0.0, constants::two_pi)(rng);
  }
  const double cycles = config.heterodyne_frequency_hz * start_time_s;
  return constants::two_pi * (cycles - std::floor(cycles));
}

RawWindow synthesize_window(double amplitude, double phase, double start_time_s,
                            const AcquisitionConfig& config, std::uint64_t window_index) {
  config.validate();
  RawWindow window;
  window.start_time_s = start_time_s;
  const std::size_t length = config.samples_per_window();
  window.samples.resize(length);
  const double envelope = config.t1_envelope_s ? std::exp(-start_time_s / *config.t1_envelope_s) : 1.0;
  const double scale = config.polarization_scale * amplitude * envelope;
  const double omega_dt = constants::two_pi * config.heterodyne_frequency_hz * config.sample_interval_s;
  for (std::size_t i = 0; i < length; ++i) {
    window.samples[i] = scale * std::cos(omega_dt * static_cast<double>(i) + phase);
  }
  if (config.noise_sigma > 0.0) {
    std::mt19937_64 rng(derive_seed(config.rng_seed, window_index));
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    for (double& s : window.samples) s += noise(rng);
  }
  return window;
}

double extract_amplitude(const RawWindow& window, const AcquisitionConfig& config) {
  const std::size_t length = window.samples.size();
  if (length < 2) throw Error(ErrorCode::WindowTooShort, "window needs at least 2 samples");
  const auto bin = static_cast<std::size_t>(std::llround(
      config.heterodyne_frequency_hz * static_cast<double>(length) * config.sample_interval_s));
  // Reduce k*i modulo L in integers so the twiddle angle stays small and exact.
  double re = 0.0;
  double im = 0.0;
  const double step = constants::two_pi / static_cast<double>(length);
  std::size_t index = 0;
  for (std::size_t i = 0; i < length; ++i) {
    const double angle = step * static_cast<double>(index);
    re += window.samples[i] * std::cos(angle);
    im -= window.samples[i] * std::sin(angle);
    index += bin % length;
    if (index >= length) index -= length;
  }
  const double norm = (bin == 0 || 2 * bin == length) ? 1.0 : 2.0;
  return norm / static_cast<double>(length) * std::hypot(re, im);
}

DecayTrace assemble_trace(const std::vector<double>& amplitudes, double tau_s) {
  if (amplitudes.empty()) throw Error(ErrorCode::InsufficientData, "no amplitudes to assemble");
  if (!(tau_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "tau must be > 0");
  DecayTrace trace;
  trace.times.resize(amplitudes.size());
  for (std::size_t n = 0; n < amplitudes.size(); ++n) trace.times[n] = static_cast<double>(n) * tau_s;
  trace.amplitudes = amplitudes;
  trace.metadata["tau_s"] = tau_s;
  return trace;
}

DecayTrace moving_average(const DecayTrace& trace, double window_s) {
  if (trace.size() < 2) throw Error(ErrorCode::InsufficientData, "moving average needs >= 2 points");
  const double step = trace.times[1] - trace.times[0];
  const auto count = static_cast<long long>(std::floor(window_s / step + 1e-9));
  if (count < 1) {
    throw Error(ErrorCode::WindowSmallerThanStep, "moving-average window shorter than the sample step");
  }
  const long long n = static_cast<long long>(trace.size());
  const long long before = count / 2;
  const long long after = count - 1 - before;

  std::vector<double> prefix(n + 1, 0.0);
  for (long long i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + trace.amplitudes[i];

  DecayTrace out = trace;
  for (long long i = 0; i < n; ++i) {
    long long left = std::min(before, i);
    long long right = std::min(after, n - 1 - i);
    if (left < before) right = std::max(0LL, std::min(right, left + (after - before)));
    if (right < after) left = std::max(0LL, std::min(left, right + (before - after)));
    out.amplitudes[i] = (prefix[i + right + 1] - prefix[i - left]) / static_cast<double>(left + right + 1);
  }
  out.moving_average_window_s = window_s;
  out.metadata["moving_average_points"] = count;
  return out;
}

DecayTrace pipeline_round_trip(const EvolutionTrace& survival, const AcquisitionConfig& config) {
  config.validate();
  survival.validate();
  if (survival.size() < 1) throw Error(ErrorCode::InsufficientData, "empty survival trace");
  std::vector<double> amplitudes(survival.size());
  for (std::size_t n = 0; n < survival.size(); ++n) {
    const double start = survival.times[n];
    const RawWindow w = synthesize_window(survival.survival[n], window_phase(start, config, n), start,
                                          config, n);
    amplitudes[n] = extract_amplitude(w, config);
  }
  DecayTrace trace;
  trace.times = survival.times;
  trace.amplitudes = std::move(amplitudes);
  trace.metadata = survival.metadata;
  trace.metadata["acquisition"] = to_json(config);
  return trace;
}

nlohmann::json to_json(const AcquisitionConfig& config) {
  nlohmann::json doc;
  doc["heterodyne_frequency_hz"] = config.heterodyne_frequency_hz;
  doc["sample_interval_s"] = config.sample_interval_s;
  doc["window_length_s"] = config.window_length_s;
  doc["noise_sigma"] = config.noise_sigma;
  doc["polarization_scale"] = config.polarization_scale;
  doc["t1_envelope_s"] = config.t1_envelope_s ? nlohmann::json(*config.t1_envelope_s) : nlohmann::json(nullptr);
  doc["phase_model"] = config.phase_model == PhaseModel::coherent ? "coherent" : "random";
  doc["rng_seed"] = config.rng_seed;
  return doc;
}

AcquisitionConfig acquisition_from_json(const nlohmann::json& doc) {
  AcquisitionConfig config;
  config.heterodyne_frequency_hz = doc.value("heterodyne_frequency_hz", config.heterodyne_frequency_hz);
  config.sample_interval_s = doc.value("sample_interval_s", config.sample_interval_s);
  config.window_length_s = doc.value("window_length_s", config.window_length_s);
  config.noise_sigma = doc.value("noise_sigma", config.noise_sigma);
  config.polarization_scale = doc.value("polarization_scale", config.polarization_scale);
  if (doc.contains("t1_envelope_s") && !doc.at("t1_envelope_s").is_null()) {
    config.t1_envelope_s = doc.at("t1_envelope_s").get<double>();
  }
  const std::string phase = doc.value("phase_model", std::string("coherent"));
  if (phase == "coherent") {
    config.phase_model = PhaseModel::coherent;
  } else if (phase == "random") {
    config.phase_model = PhaseModel::random;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown phase_model '" + phase + "'");
  }
  config.rng_seed = doc.value("rng_seed", config.rng_seed);
  return config;
}

namespace {

void write_le_float(std::ofstream& out, float value) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  unsigned char bytes[4];
  for (int b = 0; b < 4; ++b) bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

}  // namespace

void write_raw_windows(const std::vector<RawWindow>& windows, const AcquisitionConfig& config,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path + " for writing");
  nlohmann::json sidecar;
  sidecar["delta_t_s"] = config.sample_interval_s;
  sidecar["t_acq_s"] = config.window_length_s;
  sidecar["f_het_hz"] = config.heterodyne_frequency_hz;
  sidecar["start_times_s"] = nlohmann::json::array();
  const std::size_t length = config.samples_per_window();
  for (const auto& w : windows) {
    if (w.samples.size() != length) {
      throw Error(ErrorCode::InvalidConfig, "window length does not match t_acq / delta_t");
    }
    for (double s : w.samples) write_le_float(out, static_cast<float>(s));
    sidecar["start_times_s"].push_back(w.start_time_s);
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path);
  std::ofstream meta(path + ".json");
  if (!meta) throw Error(ErrorCode::Io, "cannot open " + path + ".json for writing");
  meta << sidecar.dump(2) << "\n";
}

std::vector<RawWindow> read_raw_windows(const std::string& path) {
  std::ifstream meta(path + ".json");
  if (!meta) throw Error(ErrorCode::Io, "cannot open " + path + ".json");
  nlohmann::json sidecar;
  try {
    meta >> sidecar;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("bad raw-window sidecar: ") + e.what());
  }
  const double dt = sidecar.at("delta_t_s").get<double>();
  const double t_acq = sidecar.at("t_acq_s").get<double>();
  const auto length = static_cast<std::size_t>(std::floor(t_acq / dt + 1e-9));
  const auto starts = sidecar.at("start_times_s").get<std::vector<double>>();

  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<RawWindow> windows(starts.size());
  for (std::size_t w = 0; w < starts.size(); ++w) {
    windows[w].start_time_s = starts[w];
    windows[w].samples.resize(length);
    for (std::size_t i = 0; i < length; ++i) {
      unsigned char bytes[4];
      if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
        throw Error(ErrorCode::Io, "raw-window file shorter than its sidecar declares");
      }
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[b]) << (8 * b);
      windows[w].samples[i] = std::bit_cast<float>(bits);
    }
  }
  return windows;
}

EvolutionTrace to_evolution_trace(const DecayTrace& trace) {
  EvolutionTrace out;
  out.times = trace.times;
  out.survival = trace.amplitudes;
  out.metadata = trace.metadata;
  if (trace.moving_average_window_s) out.metadata["moving_average_window_s"] = *trace.moving_average_window_s;
  return out;
}

DecayTrace decay_from_evolution(const EvolutionTrace& trace) {
  DecayTrace out;
  out.times = trace.times;
  out.amplitudes = trace.survival;
  out.metadata = trace.metadata;
  if (trace.metadata.contains("moving_average_window_s")) {
    out.moving_average_window_s = trace.metadata.at("moving_average_window_s").get<double>();
  }
  return out;
}

}  // namespace prethermal
