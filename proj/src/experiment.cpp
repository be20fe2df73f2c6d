#include "prethermal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <thread>

#include "prethermal/error.hpp"
#include "prethermal/seeding.hpp"
#include "prethermal/spin_model.hpp"
#include "prethermal/version.hpp"

namespace prethermal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kAnalyses = {"stretched", "stretched_half", "multi_exponential",
                                         "one_over_e", "cusp", "regimes", "harmonics"};

void check_keys(const json& section, const std::set<std::string>& allowed, const std::string& name) {
  if (!section.is_object()) throw Error(ErrorCode::InvalidConfig, "section '" + name + "' must be an object");
  for (const auto& item : section.items()) {
    if (!allowed.count(item.key())) {
      throw Error(ErrorCode::InvalidConfig, "unknown key '" + item.key() + "' in section '" + name + "'");
    }
  }
}

template <typename T>
void read_key(const json& section, const char* key, T& target) {
  if (section.contains(key) && !section.at(key).is_null()) target = section.at(key).get<T>();
}

template <typename T>
void read_optional(const json& section, const char* key, std::optional<T>& target) {
  if (section.contains(key) && !section.at(key).is_null()) target = section.at(key).get<T>();
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void parse_lattice(const json& s, ExperimentConfig& c) {
  check_keys(s, {"abundance", "supercell_extent", "lattice_constant_nm", "b0_direction", "max_spins",
                 "coupling_cutoff_nm", "cluster_size"}, "lattice");
  read_key(s, "abundance", c.lattice.abundance);
  read_key(s, "supercell_extent", c.lattice.supercell_extent);
  read_key(s, "lattice_constant_nm", c.lattice.lattice_constant_nm);
  if (s.contains("b0_direction")) {
    const auto& b = s.at("b0_direction");
    if (!b.is_array() || b.size() != 3) throw Error(ErrorCode::InvalidConfig, "b0_direction needs 3 components");
    c.lattice.b0_direction = Vec3(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>());
  }
  read_key(s, "max_spins", c.lattice.max_spins);
  read_optional(s, "coupling_cutoff_nm", c.lattice.coupling_cutoff_nm);
  read_optional(s, "cluster_size", c.cluster_size);
}

void parse_disorder(const json& s, ExperimentConfig& c) {
  check_keys(s, {"variance_khz2", "distribution"}, "disorder");
  read_key(s, "variance_khz2", c.disorder.variance_khz2);
  const std::string dist = s.value("distribution", std::string("gaussian"));
  if (dist == "gaussian") {
    c.disorder.distribution = DisorderDistribution::gaussian;
  } else if (dist == "none") {
    c.disorder.distribution = DisorderDistribution::none;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown disorder distribution '" + dist + "'");
  }
}

void parse_sequence(const json& s, ExperimentConfig& c) {
  check_keys(s, {"flip_angle_rad", "tau_s", "zeta", "pulse_width_s", "acquisition_window_s", "pulse_count",
                 "pulse_model", "ac_field", "ac_substeps", "sample_points", "bloch"}, "sequence");
  if (s.contains("ac_field") && !s.at("ac_field").is_null()) {
    check_keys(s.at("ac_field"), {"amplitude_hz", "frequency_hz", "phase_rad"}, "sequence.ac_field");
  }
  json core = s;
  core.erase("zeta");
  core.erase("sample_points");
  core.erase("bloch");
  c.sequence = sequence_from_json(core);
  read_optional(s, "zeta", c.zeta);
  read_optional(s, "sample_points", c.sample_points);
  read_key(s, "bloch", c.bloch);
}

void parse_acquisition(const json& s, ExperimentConfig& c) {
  check_keys(s, {"heterodyne_frequency_hz", "sample_interval_s", "window_length_s", "noise_sigma",
                 "polarization_scale", "t1_envelope_s", "phase_model", "moving_average_s", "write_raw_windows"},
             "acquisition");
  json core = s;
  core.erase("moving_average_s");
  core.erase("write_raw_windows");
  c.acquisition = acquisition_from_json(core);
  read_optional(s, "moving_average_s", c.acquisition_moving_average_s);
  read_key(s, "write_raw_windows", c.write_raw_windows);
}

void parse_analysis(const json& s, ExperimentConfig& c) {
  if (s.is_array()) {
    c.analysis.names = s.get<std::vector<std::string>>();
    return;
  }
  check_keys(s, {"requested", "multi_exp_terms", "moving_average_s", "exponent_fixed", "harmonic_points"},
             "analysis");
  read_key(s, "requested", c.analysis.names);
  read_key(s, "multi_exp_terms", c.analysis.multi_exp_terms);
  read_optional(s, "moving_average_s", c.analysis.moving_average_s);
  read_optional(s, "exponent_fixed", c.analysis.exponent_fixed);
  read_key(s, "harmonic_points", c.analysis.harmonic_points);
}

void parse_run(const json& s, ExperimentConfig& c) {
  check_keys(s, {"realizations", "master_seed", "output_dir", "workers"}, "run");
  read_key(s, "realizations", c.realizations);
  read_key(s, "master_seed", c.master_seed);
  read_key(s, "output_dir", c.output_dir);
  read_key(s, "workers", c.workers);
}

}  // namespace

ExperimentConfig parse_experiment(const json& doc) {
  ExperimentConfig c;
  try {
    check_keys(doc, {"lattice", "disorder", "sequence", "sweep", "acquisition", "analysis", "run"}, "root");
    if (doc.contains("lattice")) parse_lattice(doc.at("lattice"), c);
    if (doc.contains("disorder")) parse_disorder(doc.at("disorder"), c);
    if (doc.contains("sequence")) parse_sequence(doc.at("sequence"), c);
    if (doc.contains("sweep") && !doc.at("sweep").is_null()) {
      const auto& s = doc.at("sweep");
      check_keys(s, {"parameter", "values"}, "sweep");
      c.sweep = SweepSpec{s.at("parameter").get<std::string>(), s.at("values").get<std::vector<double>>()};
    }
    if (doc.contains("acquisition") && !doc.at("acquisition").is_null()) parse_acquisition(doc.at("acquisition"), c);
    if (doc.contains("analysis")) parse_analysis(doc.at("analysis"), c);
    if (doc.contains("run")) parse_run(doc.at("run"), c);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  return parse_experiment(doc);
}

json ExperimentConfig::to_json() const {
  json doc;
  json lat = config_to_json(lattice);
  lat.erase("rng_seed");
  lat["cluster_size"] = cluster_size ? json(*cluster_size) : json(nullptr);
  doc["lattice"] = lat;
  doc["disorder"] = {{"variance_khz2", disorder.variance_khz2},
                     {"distribution", disorder.distribution == DisorderDistribution::gaussian ? "gaussian" : "none"}};
  json seq = prethermal::to_json(sequence);
  seq["zeta"] = optional_json(zeta);
  seq["sample_points"] = sample_points ? json(*sample_points) : json(nullptr);
  seq["bloch"] = bloch;
  doc["sequence"] = seq;
  doc["sweep"] = sweep ? json{{"parameter", sweep->parameter}, {"values", sweep->values}} : json(nullptr);
  if (acquisition) {
    json acq = prethermal::to_json(*acquisition);
    acq.erase("rng_seed");
    acq["moving_average_s"] = optional_json(acquisition_moving_average_s);
    acq["write_raw_windows"] = write_raw_windows;
    doc["acquisition"] = acq;
  } else {
    doc["acquisition"] = nullptr;
  }
  doc["analysis"] = {{"requested", analysis.names},
                     {"multi_exp_terms", analysis.multi_exp_terms},
                     {"moving_average_s", optional_json(analysis.moving_average_s)},
                     {"exponent_fixed", optional_json(analysis.exponent_fixed)},
                     {"harmonic_points", analysis.harmonic_points}};
  doc["run"] = {{"realizations", realizations}, {"master_seed", master_seed}};
  return doc;
}

void validate_experiment(const ExperimentConfig& c) {
  c.lattice.validate();
  c.disorder.validate();
  if (c.cluster_size && (*c.cluster_size < 1 || *c.cluster_size > constants::max_dense_spins)) {
    throw Error(ErrorCode::DimensionTooLarge, "cluster_size must lie in [1, " +
                                                  std::to_string(constants::max_dense_spins) + "]");
  }
  if (c.lattice.expected_spin_count() > c.lattice.max_spins) {
    throw Error(ErrorCode::TooManySpins, "expected occupied count exceeds max_spins");
  }
  if (c.realizations < 1) throw Error(ErrorCode::InvalidConfig, "realizations must be >= 1");
  if (c.zeta && !(*c.zeta > 0.0)) throw Error(ErrorCode::InvalidConfig, "zeta must be > 0");
  if (c.sample_points && *c.sample_points < 2) throw Error(ErrorCode::InvalidConfig, "sample_points must be >= 2");
  if (c.sequence.ac_field && c.sequence.ac_substeps < 64) {
    throw Error(ErrorCode::SubstepTooCoarse, "ac_substeps must be >= 64");
  }
  if (c.sequence.ac_field && c.sequence.pulse_model != PulseModel::delta) {
    throw Error(ErrorCode::InvalidConfig, "AC-field runs support the delta pulse model only");
  }
  if (!c.zeta) c.sequence.validate();
  if (c.sweep) {
    static const std::set<std::string> params = {"tau", "theta", "f_ac", "zeta"};
    if (!params.count(c.sweep->parameter)) {
      throw Error(ErrorCode::InvalidConfig, "unknown sweep parameter '" + c.sweep->parameter + "'");
    }
    if (c.sweep->values.empty()) throw Error(ErrorCode::InvalidConfig, "sweep values must be nonempty");
    if (c.sweep->parameter == "f_ac" && !c.sequence.ac_field) {
      throw Error(ErrorCode::InvalidConfig, "f_ac sweep needs sequence.ac_field");
    }
    for (double v : c.sweep->values) {
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidConfig, "sweep values must be finite");
      if ((c.sweep->parameter == "tau" || c.sweep->parameter == "zeta") && !(v > 0.0)) {
        throw Error(ErrorCode::InvalidConfig, "tau/zeta sweep values must be > 0");
      }
      if (c.sweep->parameter == "tau") {
        PulseSequenceSpec s = c.sequence;
        s.spacing_s = v;
        s.validate();
      }
    }
  }
  if (c.acquisition) c.acquisition->validate();
  for (const auto& name : c.analysis.names) {
    if (!kAnalyses.count(name)) throw Error(ErrorCode::InvalidConfig, "unknown analysis '" + name + "'");
  }
  if (c.analysis.multi_exp_terms < 1) throw Error(ErrorCode::InvalidConfig, "multi_exp_terms must be >= 1");
  if (c.analysis.harmonic_points < 64) throw Error(ErrorCode::InvalidConfig, "harmonic_points must be >= 64");
  if (c.workers < 0) throw Error(ErrorCode::InvalidConfig, "workers must be >= 0");
}

Realization make_realization(const ExperimentConfig& config, int index) {
  Realization r;
  r.lattice_seed = derive_seed(config.master_seed, 2 * static_cast<std::uint64_t>(index));
  r.disorder_seed = derive_seed(config.master_seed, 2 * static_cast<std::uint64_t>(index) + 1);
  LatticeConfig lc = config.lattice;
  lc.rng_seed = r.lattice_seed;
  SpinLattice lattice = generate_lattice(lc);
  if (config.cluster_size) lattice = select_cluster(lattice, *config.cluster_size);
  DisorderModel dm = config.disorder;
  dm.rng_seed = r.disorder_seed;
  r.lattice = sample_disorder(lattice, dm);
  return r;
}

std::vector<Realization> build_ensemble(const ExperimentConfig& config) {
  std::vector<Realization> ensemble;
  ensemble.reserve(config.realizations);
  for (int i = 0; i < config.realizations; ++i) ensemble.push_back(make_realization(config, i));
  return ensemble;
}

double ensemble_coupling(const std::vector<Realization>& ensemble) {
  std::vector<double> pooled;
  for (const auto& r : ensemble) {
    const auto s = strongest_partner_couplings(r.lattice);
    pooled.insert(pooled.end(), s.begin(), s.end());
  }
  return median(pooled);
}

PulseSequenceSpec point_sequence(const ExperimentConfig& config, double coupling_hz,
                                 std::optional<double> sweep_value) {
  PulseSequenceSpec seq = config.sequence;
  std::optional<double> zeta = config.zeta;
  if (sweep_value && config.sweep) {
    const std::string& p = config.sweep->parameter;
    if (p == "tau") {
      seq.spacing_s = *sweep_value;
      zeta.reset();
    } else if (p == "zeta") {
      zeta = *sweep_value;
    } else if (p == "theta") {
      seq.flip_angle = *sweep_value;
    } else if (p == "f_ac") {
      seq.ac_field->frequency_hz = *sweep_value;
    }
  }
  if (zeta) {
    if (!(coupling_hz > 0.0)) throw Error(ErrorCode::EmptyLattice, "ensemble has no couplings to set tau from zeta");
    seq.spacing_s = *zeta / coupling_hz;
  }
  seq.validate();
  return seq;
}

EvolutionTrace simulate_realization(const Realization& realization, const PulseSequenceSpec& seq,
                                    const ExperimentConfig& config) {
  const HamiltonianSet h = build_hamiltonians(realization.lattice);
  EvolutionTrace trace;
  if (seq.ac_field) {
    trace = evolve_with_ac_field(h, seq);
  } else {
    const CyclePropagator prop = cycle_unitary(h, seq);
    if (config.sample_points) {
      trace = survival_at(prop, log_spaced_pulses(seq.pulse_count, *config.sample_points));
    } else {
      trace = evolve_survival(prop, seq.pulse_count, config.bloch);
    }
  }
  trace.metadata = json::object();
  trace.metadata["sequence"] = to_json(seq);
  trace.metadata["lattice_seed"] = realization.lattice_seed;
  trace.metadata["disorder_seed"] = realization.disorder_seed;
  trace.metadata["spins"] = realization.lattice.spin_count();
  return trace;
}

void run_parallel(std::size_t count, int workers, const std::function<void(std::size_t)>& job) {
  unsigned threads = workers > 0 ? static_cast<unsigned>(workers) : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(count, 1)));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::Io, "cannot create output directory " + dir + ": " + ec.message());
  }

  std::string path(const std::string& name) {
    files_.push_back(name);
    return (dir_ / name).string();
  }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream out(path(name));
    if (!out) throw Error(ErrorCode::Io, "cannot write " + name);
    out << text;
  }

  void write_json(const std::string& name, const json& doc) { write_text(name, doc.dump(2) + "\n"); }

  void write_trace(const std::string& name, const EvolutionTrace& trace) { write_trace_csv(trace, path(name)); }

  void write_manifest(const ExperimentConfig& config, const json& seeds, const json& timings) {
    json m;
    m["config_hash"] = hex64(fnv1a64(config.to_json().dump()));
    m["master_seed"] = config.master_seed;
    m["seed_scheme"] = "derive_seed(master, 2r) lattice, derive_seed(master, 2r+1) disorder; splitmix64";
    m["seeds"] = seeds;
    std::vector<std::string> files = files_;
    files.push_back("manifest.json");
    std::sort(files.begin(), files.end());
    m["files"] = files;
    m["version"] = version;
    m["timings_s"] = timings;
    std::ofstream out((dir_ / "manifest.json").string());
    if (!out) throw Error(ErrorCode::Io, "cannot write manifest.json");
    out << m.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

json seeds_json(const std::vector<Realization>& ensemble) {
  json arr = json::array();
  for (std::size_t r = 0; r < ensemble.size(); ++r) {
    arr.push_back({{"realization", r},
                   {"lattice_seed", ensemble[r].lattice_seed},
                   {"disorder_seed", ensemble[r].disorder_seed}});
  }
  return arr;
}

std::string indexed(const std::string& stem, std::size_t i, const std::string& ext) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03zu", i);
  return stem + "_" + buf + ext;
}

EvolutionTrace ensemble_mean(std::vector<EvolutionTrace> traces, const PulseSequenceSpec& seq, double coupling_hz) {
  EvolutionTrace mean = average_traces(traces);
  mean.metadata = json::object();
  mean.metadata["sequence"] = to_json(seq);
  mean.metadata["realizations"] = traces.size();
  mean.metadata["coupling_hz"] = coupling_hz;
  mean.metadata["zeta"] = magnus_parameter(coupling_hz, seq.spacing_s);
  mean.metadata["drive_frequency_hz"] = seq.drive_frequency_hz();
  return mean;
}

std::ostream& say(const ExperimentConfig& c, std::ostream& log) {
  static std::ofstream null_stream;
  return c.quiet ? static_cast<std::ostream&>(null_stream) : log;
}

double trace_step(const EvolutionTrace& trace) {
  if (trace.metadata.contains("sequence") && trace.metadata.at("sequence").contains("tau_s")) {
    return trace.metadata.at("sequence").at("tau_s").get<double>();
  }
  if (trace.size() < 2) throw Error(ErrorCode::InsufficientData, "trace too short to infer tau");
  return trace.times[1] - trace.times[0];
}

json run_analysis(const std::string& name, const EvolutionTrace& trace, const AnalysisRequest& req) {
  DecayTrace decay = decay_from_evolution(trace);
  if (req.moving_average_s && (name == "cusp" || name == "regimes")) {
    decay = moving_average(decay, *req.moving_average_s);
  }
  if (name == "stretched") return to_json(fit_stretched_exponential(decay, req.exponent_fixed));
  if (name == "stretched_half") return to_json(fit_stretched_exponential(decay, 0.5));
  if (name == "multi_exponential") return to_json(fit_multi_exponential(decay, req.multi_exp_terms));
  if (name == "one_over_e") {
    return {{"model", "one_over_e"}, {"params", {{"lifetime_s", one_over_e_lifetime(decay)}}},
            {"n_points", decay.size()}};
  }
  if (name == "cusp") return to_json(detect_cusp(decay));
  if (name == "regimes") return to_json(segment_regimes(decay));
  if (name == "harmonics") {
    const double tau = trace_step(trace);
    DecayTrace head = decay;
    const std::size_t n = std::min<std::size_t>(head.size(), static_cast<std::size_t>(req.harmonic_points));
    head.times.resize(n);
    head.amplitudes.resize(n);
    return to_json(harmonic_spectrum(head, tau));
  }
  throw Error(ErrorCode::InvalidConfig, "unknown analysis '" + name + "'");
}

/// Reports keyed by analysis; numerical failures are recorded, not thrown.
json analyses_report(const std::vector<std::string>& names, const EvolutionTrace& trace, const AnalysisRequest& req) {
  json out = json::object();
  for (const auto& name : names) {
    try {
      out[name] = run_analysis(name, trace, req);
    } catch (const Error& e) {
      if (is_config_error(e.code())) throw;
      out[name] = {{"error", std::string(to_string(e.code()))}, {"message", e.what()}};
    }
  }
  return out;
}

void write_plot_data(OutputDir& out, const std::string& stem, const EvolutionTrace& trace) {
  std::string log_csv = "time_s,ln_survival\n";
  std::string sqrt_csv = "sqrt_time_s,ln_survival\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (!(trace.survival[i] > 0.0)) continue;
    const std::string ln = format_double(std::log(trace.survival[i]));
    log_csv += format_double(trace.times[i]) + "," + ln + "\n";
    sqrt_csv += format_double(std::sqrt(trace.times[i])) + "," + ln + "\n";
  }
  out.write_text(stem + "_log.csv", log_csv);
  out.write_text(stem + "_sqrt.csv", sqrt_csv);
}

}  // namespace

int cmd_generate(const ExperimentConfig& config, std::ostream& log) {
  validate_experiment(config);
  const auto start = Clock::now();
  OutputDir out(config.output_dir);
  const auto ensemble = build_ensemble(config);
  for (std::size_t r = 0; r < ensemble.size(); ++r) {
    const auto& lattice = ensemble[r].lattice;
    out.write_json(indexed("lattice", r, ".json"), to_json(lattice));
    say(config, log) << "realization " << r << ": spins=" << lattice.spin_count();
    if (lattice.spin_count() >= 2) say(config, log) << " J_median_hz=" << format_double(median_coupling(lattice));
    say(config, log) << "\n";
  }
  out.write_json("config.json", config.to_json());
  out.write_manifest(config, seeds_json(ensemble), {{"total", seconds_since(start)}});
  return static_cast<int>(ExitCode::success);
}

int cmd_simulate(const ExperimentConfig& config, std::ostream& log) {
  validate_experiment(config);
  const auto start = Clock::now();
  OutputDir out(config.output_dir);
  const auto ensemble = build_ensemble(config);
  const double coupling = ensemble_coupling(ensemble);
  const PulseSequenceSpec seq = point_sequence(config, coupling);

  std::vector<EvolutionTrace> traces(ensemble.size());
  std::vector<double> job_time(ensemble.size());
  run_parallel(ensemble.size(), config.workers, [&](std::size_t r) {
    const auto t0 = Clock::now();
    traces[r] = simulate_realization(ensemble[r], seq, config);
    job_time[r] = seconds_since(t0);
  });
  for (std::size_t r = 0; r < traces.size(); ++r) out.write_trace(indexed("realization", r, ".csv"), traces[r]);
  const EvolutionTrace mean = ensemble_mean(traces, seq, coupling);
  out.write_trace("mean.csv", mean);

  say(config, log) << "J_hz=" << format_double(coupling) << " tau_s=" << format_double(seq.spacing_s)
                   << " zeta=" << format_double(magnus_parameter(coupling, seq.spacing_s))
                   << " f_drive_hz=" << format_double(seq.drive_frequency_hz()) << "\n";

  if (!config.analysis.names.empty()) {
    out.write_json("analysis.json", analyses_report(config.analysis.names, mean, config.analysis));
    write_plot_data(out, "mean", mean);
  }
  out.write_json("config.json", config.to_json());
  out.write_manifest(config, seeds_json(ensemble), {{"total", seconds_since(start)}, {"jobs", job_time}});
  return static_cast<int>(ExitCode::success);
}

int cmd_sweep(const ExperimentConfig& config, std::ostream& log) {
  validate_experiment(config);
  if (!config.sweep) throw Error(ErrorCode::InvalidConfig, "sweep section required");
  const auto start = Clock::now();
  OutputDir out(config.output_dir);
  const auto ensemble = build_ensemble(config);
  const double coupling = ensemble_coupling(ensemble);
  const auto& values = config.sweep->values;
  const std::size_t points = values.size();
  const std::size_t reals = ensemble.size();

  std::vector<PulseSequenceSpec> seqs;
  for (double v : values) seqs.push_back(point_sequence(config, coupling, v));

  std::vector<EvolutionTrace> traces(points * reals);
  std::vector<std::string> failures(points * reals);
  std::vector<double> job_time(points * reals);
  run_parallel(points * reals, config.workers, [&](std::size_t job) {
    const auto t0 = Clock::now();
    const std::size_t p = job / reals;
    const std::size_t r = job % reals;
    try {
      traces[job] = simulate_realization(ensemble[r], seqs[p], config);
    } catch (const Error& e) {
      failures[job] = e.what();
    }
    job_time[job] = seconds_since(t0);
  });

  json report;
  report["parameter"] = config.sweep->parameter;
  report["values"] = values;
  report["coupling_hz"] = coupling;
  json point_rows = json::array();
  std::vector<ScalingPoint> scaling;
  bool partial = false;
  for (std::size_t p = 0; p < points; ++p) {
    json row;
    row["value"] = values[p];
    row["tau_s"] = seqs[p].spacing_s;
    row["zeta"] = magnus_parameter(coupling, seqs[p].spacing_s);
    std::string failure;
    for (std::size_t r = 0; r < reals && failure.empty(); ++r) failure = failures[p * reals + r];
    if (!failure.empty()) {
      partial = true;
      row["error"] = failure;
      point_rows.push_back(row);
      say(config, log) << "point " << p << " failed: " << failure << "\n";
      continue;
    }
    std::vector<EvolutionTrace> group(traces.begin() + static_cast<std::ptrdiff_t>(p * reals),
                                      traces.begin() + static_cast<std::ptrdiff_t>((p + 1) * reals));
    const EvolutionTrace mean = ensemble_mean(std::move(group), seqs[p], coupling);
    const std::string name = indexed("point", p, ".csv");
    out.write_trace(name, mean);
    row["trace"] = name;
    try {
      const double lifetime = one_over_e_lifetime(decay_from_evolution(mean));
      row["lifetime_s"] = lifetime;
      row["decay_rate_hz"] = 1.0 / lifetime;
      scaling.push_back({magnus_parameter(coupling, seqs[p].spacing_s), lifetime});
    } catch (const Error& e) {
      row["lifetime_s"] = nullptr;
      row["lifetime_error"] = std::string(to_string(e.code()));
    }
    if (!config.analysis.names.empty()) {
      out.write_json(indexed("point", p, "_analysis.json"), analyses_report(config.analysis.names, mean, config.analysis));
    }
    say(config, log) << "point " << p << " value=" << format_double(values[p])
                     << " zeta=" << format_double(magnus_parameter(coupling, seqs[p].spacing_s)) << "\n";
    point_rows.push_back(row);
  }
  report["points"] = point_rows;
  int code = partial ? static_cast<int>(ExitCode::partial_failure) : static_cast<int>(ExitCode::success);
  const bool tau_like = config.sweep->parameter == "tau" || config.sweep->parameter == "zeta";
  if (tau_like) {
    try {
      report["fit"] = to_json(decay_rate_scaling(scaling, ScalingAxis::semilog_rate_vs_jtau));
    } catch (const Error& e) {
      report["fit"] = nullptr;
      report["fit_error"] = std::string(to_string(e.code()));
      if (!partial) code = static_cast<int>(ExitCode::numerical_failure);
    }
  }
  out.write_json("scaling.json", report);
  out.write_json("config.json", config.to_json());
  out.write_manifest(config, seeds_json(ensemble), {{"total", seconds_since(start)}, {"jobs", job_time}});
  return code;
}

int cmd_pipeline(const ExperimentConfig& config, const std::optional<std::string>& trace_path, std::ostream& log) {
  validate_experiment(config);
  if (!config.acquisition) throw Error(ErrorCode::InvalidConfig, "acquisition section required");
  const auto start = Clock::now();
  OutputDir out(config.output_dir);
  EvolutionTrace survival;
  json seeds = json::array();
  if (trace_path) {
    survival = read_trace_csv(*trace_path);
  } else {
    const auto ensemble = build_ensemble(config);
    const double coupling = ensemble_coupling(ensemble);
    const PulseSequenceSpec seq = point_sequence(config, coupling);
    std::vector<EvolutionTrace> traces(ensemble.size());
    run_parallel(ensemble.size(), config.workers,
                 [&](std::size_t r) { traces[r] = simulate_realization(ensemble[r], seq, config); });
    survival = ensemble_mean(std::move(traces), seq, coupling);
    out.write_trace("survival.csv", survival);
    seeds = seeds_json(ensemble);
  }
  AcquisitionConfig acq = *config.acquisition;
  acq.rng_seed = derive_seed(config.master_seed, 0xAC0000000000ULL);
  DecayTrace decay = pipeline_round_trip(survival, acq);
  out.write_trace("decay.csv", to_evolution_trace(decay));

  double worst = 0.0;
  for (std::size_t i = 0; i < decay.size(); ++i) {
    const double expect = std::abs(survival.survival[i]) * acq.polarization_scale;
    const double err = std::abs(decay.amplitudes[i] - expect) / std::max(expect, 1e-300);
    worst = std::max(worst, err);
  }
  say(config, log) << "windows=" << decay.size() << " max_relative_error=" << format_double(worst) << "\n";

  if (config.acquisition_moving_average_s) {
    out.write_trace("decay_filtered.csv", to_evolution_trace(moving_average(decay, *config.acquisition_moving_average_s)));
  }
  if (config.write_raw_windows) {
    std::vector<RawWindow> windows;
    for (std::size_t n = 0; n < survival.size(); ++n) {
      const double t = survival.times[n];
      windows.push_back(synthesize_window(survival.survival[n], window_phase(t, acq, n), t, acq, n));
    }
    write_raw_windows(windows, acq, out.path("raw_windows.f32"));
    out.path("raw_windows.f32.json");
  }
  out.write_json("config.json", config.to_json());
  out.write_manifest(config, seeds, {{"total", seconds_since(start)}});
  return static_cast<int>(ExitCode::success);
}

int cmd_analyze(const ExperimentConfig& config, const std::string& trace_path,
                const std::vector<std::string>& analyses, std::ostream& log) {
  const std::vector<std::string>& names = analyses.empty() ? config.analysis.names : analyses;
  for (const auto& name : names) {
    if (!kAnalyses.count(name)) throw Error(ErrorCode::InvalidConfig, "unknown analysis '" + name + "'");
  }
  const auto start = Clock::now();
  const EvolutionTrace trace = read_trace_csv(trace_path);
  OutputDir out(config.output_dir);
  const std::string stem = fs::path(trace_path).stem().string();
  const json report = analyses_report(names, trace, config.analysis);
  for (const auto& item : report.items()) {
    out.write_json(stem + "_" + item.key() + ".json", item.value());
    say(config, log) << item.key() << ": " << (item.value().contains("error") ? "failed" : "ok") << "\n";
  }
  write_plot_data(out, stem, trace);
  out.write_manifest(config, json::array(), {{"total", seconds_since(start)}});
  return static_cast<int>(ExitCode::success);
}

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(is_config_error(e.code()) ? ExitCode::config_error : ExitCode::numerical_failure);
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::config_error);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::numerical_failure);
  }
}

}  // namespace prethermal
