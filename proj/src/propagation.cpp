#include "prethermal/propagation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include <Eigen/Eigenvalues>

#include "prethermal/error.hpp"

namespace prethermal {

void PulseSequenceSpec::validate() const {
  if (!(spacing_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "pulse spacing tau must be > 0");
  if (!(pulse_width_s >= 0.0 && pulse_width_s < spacing_s)) {
    throw Error(ErrorCode::InvalidConfig, "pulse width must satisfy 0 <= t_p < tau");
  }
  if (!(acquisition_window_s >= 0.0 && acquisition_window_s <= spacing_s - pulse_width_s)) {
    throw Error(ErrorCode::InvalidConfig, "acquisition window must satisfy t_acq <= tau - t_p");
  }
  if (pulse_count < 1) throw Error(ErrorCode::InvalidConfig, "pulse count must be >= 1");
  if (!std::isfinite(flip_angle)) throw Error(ErrorCode::InvalidConfig, "flip angle must be finite");
  if (pulse_model == PulseModel::finite && pulse_width_s == 0.0) {
    throw Error(ErrorCode::DegeneratePulse, "finite pulse model needs t_p > 0");
  }
  if (ac_field && !(ac_field->amplitude_hz >= 0.0 && ac_field->frequency_hz >= 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "ac field amplitude and frequency must be >= 0");
  }
}

void EvolutionTrace::validate() const {
  if (times.size() != survival.size()) {
    throw Error(ErrorCode::InvalidConfig, "trace times and survival differ in length");
  }
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) {
      throw Error(ErrorCode::InvalidConfig, "trace times must be strictly increasing");
    }
  }
}

nlohmann::json to_json(const PulseSequenceSpec& spec) {
  nlohmann::json doc;
  doc["flip_angle_rad"] = spec.flip_angle;
  doc["tau_s"] = spec.spacing_s;
  doc["pulse_width_s"] = spec.pulse_width_s;
  doc["acquisition_window_s"] = spec.acquisition_window_s;
  doc["pulse_count"] = spec.pulse_count;
  doc["pulse_model"] = spec.pulse_model == PulseModel::delta ? "delta" : "finite";
  if (spec.ac_field) {
    doc["ac_field"] = {{"amplitude_hz", spec.ac_field->amplitude_hz},
                       {"frequency_hz", spec.ac_field->frequency_hz},
                       {"phase_rad", spec.ac_field->phase_rad}};
  }
  doc["ac_substeps"] = spec.ac_substeps;
  return doc;
}

PulseSequenceSpec sequence_from_json(const nlohmann::json& doc) {
  PulseSequenceSpec spec;
  spec.flip_angle = doc.value("flip_angle_rad", spec.flip_angle);
  spec.spacing_s = doc.value("tau_s", spec.spacing_s);
  spec.pulse_width_s = doc.value("pulse_width_s", spec.pulse_width_s);
  spec.acquisition_window_s = doc.value("acquisition_window_s", spec.acquisition_window_s);
  spec.pulse_count = doc.value("pulse_count", spec.pulse_count);
  const std::string model = doc.value("pulse_model", std::string("delta"));
  if (model == "delta") {
    spec.pulse_model = PulseModel::delta;
  } else if (model == "finite") {
    spec.pulse_model = PulseModel::finite;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown pulse_model '" + model + "'");
  }
  if (doc.contains("ac_field") && !doc.at("ac_field").is_null()) {
    const auto& ac = doc.at("ac_field");
    spec.ac_field = AcField{ac.value("amplitude_hz", 0.0), ac.value("frequency_hz", 0.0),
                            ac.value("phase_rad", 0.0)};
  }
  spec.ac_substeps = doc.value("ac_substeps", spec.ac_substeps);
  return spec;
}

Matrix unitary_exp(const Matrix& hermitian, double t) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(hermitian);
  const Eigen::VectorXcd phases =
      (eig.eigenvalues().cast<Complex>() * Complex(0.0, -t)).array().exp();
  return eig.eigenvectors() * phases.asDiagonal() * eig.eigenvectors().adjoint();
}

CyclePropagator decompose_unitary(Matrix unitary, double period_s) {
  CyclePropagator prop;
  prop.spins = spins_for_dimension(unitary.rows());
  prop.period_s = period_s;
  // (U + U^dagger)/2 and (U - U^dagger)/2i commute, so a generic real combination of them
  // shares U's eigenvectors. Accept that basis only if it diagonalizes U to roundoff.
  const Eigen::Index dim = unitary.rows();
  const Matrix herm = 0.5 * (unitary + unitary.adjoint()) +
                      (0.5 * 0.7390851332151607) * Complex(0.0, -1.0) * (unitary - unitary.adjoint());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(herm);
  const Matrix diag = eig.eigenvectors().adjoint() * unitary * eig.eigenvectors();
  const double off = (diag - Matrix(diag.diagonal().asDiagonal())).norm();
  if (eig.info() == Eigen::Success && off < 1e-11 * static_cast<double>(dim)) {
    prop.eigenvalues = diag.diagonal();
    prop.eigenvectors = eig.eigenvectors();
  } else {
    Eigen::ComplexSchur<Matrix> schur(unitary);
    // A normal matrix has a diagonal Schur form; the strictly upper part is roundoff.
    prop.eigenvalues = schur.matrixT().diagonal();
    prop.eigenvectors = schur.matrixU();
  }
  prop.eigenphases.resize(prop.eigenvalues.size());
  for (Eigen::Index a = 0; a < prop.eigenvalues.size(); ++a) {
    prop.eigenphases(a) = -std::arg(prop.eigenvalues(a));
  }
  prop.unitary = std::move(unitary);
  return prop;
}

namespace {

Matrix free_propagator(const HamiltonianSet& h, double duration) {
  return unitary_exp(h.h_total.matrix, duration);
}

Matrix pulse_cycle(const HamiltonianSet& h, const PulseSequenceSpec& seq, const Matrix& free_tau) {
  const int n = h.h_total.spins();
  if (seq.pulse_model == PulseModel::delta) {
    return collective_rotation(seq.flip_angle, Axis::x, n).matrix * free_tau;
  }
  const double tp = seq.pulse_width_s;
  const double rabi_hz = seq.flip_angle / (constants::two_pi * tp);
  const Matrix driven =
      h.h_total.matrix + constants::two_pi * rabi_hz * collective_spin(Axis::x, n).matrix;
  return unitary_exp(driven, tp) * free_propagator(h, seq.spacing_s - tp);
}

double ix_norm(int spins) {
  return spins * std::ldexp(1.0, spins) / 4.0;
}

// W_ab = |<a|I_x|b>|^2 in the eigenbasis, the only input survival needs.
Eigen::MatrixXd survival_weights(const Matrix& eigenvectors, int spins) {
  const Matrix ix = collective_spin(Axis::x, spins).matrix;
  const Matrix x = eigenvectors.adjoint() * ix * eigenvectors;
  return x.cwiseAbs2();
}

double weighted_cosine_sum(const Eigen::MatrixXd& w, const Eigen::VectorXd& angle) {
  const Eigen::VectorXd c = angle.array().cos();
  const Eigen::VectorXd s = angle.array().sin();
  return c.dot(w * c) + s.dot(w * s);
}

Eigen::VectorXd scaled_phases(const Eigen::VectorXd& phases, long double scale) {
  Eigen::VectorXd out(phases.size());
  constexpr long double turn = 2.0L * 3.14159265358979323846264338327950288L;
  for (Eigen::Index a = 0; a < phases.size(); ++a) {
    out(a) = static_cast<double>(std::fmod(static_cast<long double>(phases(a)) * scale, turn));
  }
  return out;
}

}  // namespace

CyclePropagator cycle_unitary(const HamiltonianSet& h, const PulseSequenceSpec& seq) {
  seq.validate();
  check_spin_count(h.h_total.spins());
  const Matrix free_tau = seq.pulse_model == PulseModel::delta
                              ? free_propagator(h, seq.spacing_s)
                              : Matrix();
  return decompose_unitary(pulse_cycle(h, seq, free_tau), seq.spacing_s);
}

EvolutionTrace evolve_survival(const CyclePropagator& prop, long long pulses, bool with_bloch) {
  if (pulses < 1) throw Error(ErrorCode::InvalidConfig, "pulse count must be >= 1");
  const int n = prop.spins;
  const double norm = ix_norm(n);
  const Eigen::MatrixXd w = survival_weights(prop.eigenvectors, n);

  Matrix y_cross, z_cross;
  if (with_bloch) {
    const Matrix& v = prop.eigenvectors;
    const Matrix x = v.adjoint() * collective_spin(Axis::x, n).matrix * v;
    const Matrix y = v.adjoint() * collective_spin(Axis::y, n).matrix * v;
    const Matrix z = v.adjoint() * collective_spin(Axis::z, n).matrix * v;
    y_cross = x.cwiseProduct(y.transpose());
    z_cross = x.cwiseProduct(z.transpose());
  }

  EvolutionTrace trace;
  trace.times.reserve(pulses + 1);
  trace.survival.reserve(pulses + 1);
  BlochComponents bloch;
  for (long long step = 0; step <= pulses; ++step) {
    const Eigen::VectorXd angle = scaled_phases(prop.eigenphases, step);
    trace.times.push_back(step * prop.period_s);
    const double s = weighted_cosine_sum(w, angle) / norm;
    trace.survival.push_back(s);
    if (with_bloch) {
      // <I_alpha>(n) = sum_ab X_ab A_ba exp(-i (phi_a - phi_b) n)
      const Eigen::VectorXcd p = (angle.cast<Complex>() * Complex(0.0, -1.0)).array().exp();
      const Eigen::VectorXcd pc = p.conjugate();
      bloch.ix.push_back(s);
      bloch.iy.push_back((p.transpose() * y_cross * pc)(0).real() / norm);
      bloch.iz.push_back((p.transpose() * z_cross * pc)(0).real() / norm);
    }
  }
  if (with_bloch) trace.bloch = std::move(bloch);
  trace.metadata["period_s"] = prop.period_s;
  trace.metadata["spins"] = n;
  return trace;
}

EvolutionTrace survival_at(const CyclePropagator& prop, const std::vector<long long>& pulses) {
  const int n = prop.spins;
  const double norm = ix_norm(n);
  const Eigen::MatrixXd w = survival_weights(prop.eigenvectors, n);
  EvolutionTrace trace;
  for (std::size_t i = 0; i < pulses.size(); ++i) {
    if (pulses[i] < 0 || (i > 0 && pulses[i] <= pulses[i - 1])) {
      throw Error(ErrorCode::InvalidConfig, "pulse counts must be non-negative and increasing");
    }
    trace.times.push_back(static_cast<double>(pulses[i]) * prop.period_s);
    trace.survival.push_back(weighted_cosine_sum(w, scaled_phases(prop.eigenphases, pulses[i])) / norm);
  }
  trace.metadata["period_s"] = prop.period_s;
  trace.metadata["spins"] = n;
  return trace;
}

double integrated_survival(const CyclePropagator& prop, long long pulses) {
  const int n = prop.spins;
  const Eigen::MatrixXd w = survival_weights(prop.eigenvectors, n);
  const Eigen::Index dim = w.rows();
  const double count = static_cast<double>(pulses + 1);
  double total = 0.0;
  for (Eigen::Index b = 0; b < dim; ++b) {
    for (Eigen::Index a = 0; a < dim; ++a) {
      const double delta = prop.eigenphases(a) - prop.eigenphases(b);
      const double half = std::sin(0.5 * delta);
      double dirichlet;
      if (std::abs(half) < 1e-12) {
        dirichlet = count;
      } else {
        // sum_{k=0}^{M} cos(k delta)
        dirichlet = std::sin(0.5 * count * delta) / half * std::cos(0.5 * pulses * delta);
      }
      total += w(a, b) * dirichlet;
    }
  }
  return total / ix_norm(n);
}

double long_time_survival(const CyclePropagator& prop) {
  const Eigen::MatrixXd w = survival_weights(prop.eigenvectors, prop.spins);
  double total = 0.0;
  for (Eigen::Index b = 0; b < w.rows(); ++b) {
    for (Eigen::Index a = 0; a < w.rows(); ++a) {
      const double delta = std::remainder(prop.eigenphases(a) - prop.eigenphases(b), constants::two_pi);
      if (std::abs(delta) < 1e-9) total += w(a, b);
    }
  }
  return total / ix_norm(prop.spins);
}

EvolutionTrace fid(const HamiltonianSet& h, const std::vector<double>& times) {
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < 0.0 || (i > 0 && times[i] < times[i - 1])) {
      throw Error(ErrorCode::InvalidConfig, "FID times must be sorted and non-negative");
    }
  }
  const int n = h.h_total.spins();
  check_spin_count(n);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(h.h_total.matrix);
  const Eigen::MatrixXd w = survival_weights(eig.eigenvectors(), n);
  const double norm = ix_norm(n);
  EvolutionTrace trace;
  for (double t : times) {
    const Eigen::VectorXd angle = eig.eigenvalues() * t;
    trace.times.push_back(t);
    trace.survival.push_back(weighted_cosine_sum(w, angle) / norm);
  }
  trace.metadata["kind"] = "fid";
  trace.metadata["spins"] = n;
  return trace;
}

namespace {

void check_ac_sequence(const HamiltonianSet& h, const PulseSequenceSpec& seq) {
  seq.validate();
  if (!seq.ac_field) throw Error(ErrorCode::InvalidConfig, "ac_field required");
  if (seq.ac_substeps < 64) {
    throw Error(ErrorCode::SubstepTooCoarse, "AC integration substep must be <= tau/64");
  }
  if (seq.pulse_model != PulseModel::delta) {
    throw Error(ErrorCode::InvalidConfig, "AC-field evolution supports the delta pulse model only");
  }
  check_spin_count(h.h_total.spins());
}

Eigen::VectorXd total_iz_diagonal(int spins) {
  const Eigen::Index dim = Eigen::Index{1} << spins;
  Eigen::VectorXd m_z(dim);
  for (Eigen::Index b = 0; b < dim; ++b) {
    double m = 0.0;
    for (int j = 0; j < spins; ++j) m += ((b >> j) & 1) ? -0.5 : 0.5;
    m_z(b) = m;
  }
  return m_z;
}

// Midpoint-rule integral of the field phase over pulse interval k.
double ac_phase(const PulseSequenceSpec& seq, long long k) {
  const AcField& ac = *seq.ac_field;
  const double dt = seq.spacing_s / seq.ac_substeps;
  double phi = 0.0;
  for (int s = 0; s < seq.ac_substeps; ++s) {
    const double t_mid = k * seq.spacing_s + (s + 0.5) * dt;
    phi += constants::two_pi * ac.amplitude_hz *
           std::cos(constants::two_pi * ac.frequency_hz * t_mid + ac.phase_rad) * dt;
  }
  return phi;
}

Eigen::VectorXcd iz_phase_factors(const Eigen::VectorXd& m_z, double phi) {
  return (m_z.cast<Complex>() * Complex(0.0, -phi)).array().exp();
}

}  // namespace

EvolutionTrace evolve_with_ac_field(const HamiltonianSet& h, const PulseSequenceSpec& seq) {
  check_ac_sequence(h, seq);
  const int n = h.h_total.spins();
  const Eigen::Index dim = h.h_total.dimension();

  // The field couples to total I_z, which commutes with the secular dipolar and on-site
  // terms, so each interval factorizes as exp(-iH tau) exp(-i Phi_n I_z).
  const Matrix step = collective_rotation(seq.flip_angle, Axis::x, n).matrix *
                      unitary_exp(h.h_total.matrix, seq.spacing_s);
  const Matrix step_adj = step.adjoint();
  const Eigen::VectorXd m_z = total_iz_diagonal(n);

  const Matrix ix = collective_spin(Axis::x, n).matrix;
  const double norm = ix_norm(n);
  Matrix rho = ix;
  Matrix scratch(dim, dim);

  EvolutionTrace trace;
  trace.times.push_back(0.0);
  trace.survival.push_back(1.0);
  for (long long k = 0; k < seq.pulse_count; ++k) {
    const Eigen::VectorXcd p = iz_phase_factors(m_z, ac_phase(seq, k));
    rho = p.asDiagonal() * rho * p.conjugate().asDiagonal();
    scratch.noalias() = step * rho;
    rho.noalias() = scratch * step_adj;
    trace.times.push_back((k + 1) * seq.spacing_s);
    trace.survival.push_back((rho.cwiseProduct(ix.transpose())).sum().real() / norm);
  }
  trace.metadata["kind"] = "ac_field";
  trace.metadata["sequence"] = to_json(seq);
  return trace;
}

int ac_supercycle_length(const PulseSequenceSpec& seq, int max_cycles) {
  if (!seq.ac_field) throw Error(ErrorCode::InvalidConfig, "ac_field required");
  const double per_pulse = seq.ac_field->frequency_hz * seq.spacing_s;
  for (int k = 1; k <= max_cycles; ++k) {
    const double turns = k * per_pulse;
    if (std::abs(turns - std::round(turns)) < 1e-9) return k;
  }
  throw Error(ErrorCode::InvalidConfig,
              "AC field does not repeat within " + std::to_string(max_cycles) + " pulses");
}

CyclePropagator ac_supercycle(const HamiltonianSet& h, const PulseSequenceSpec& seq, int max_cycles) {
  check_ac_sequence(h, seq);
  const int cycles = ac_supercycle_length(seq, max_cycles);
  const int n = h.h_total.spins();
  const Matrix step = collective_rotation(seq.flip_angle, Axis::x, n).matrix *
                      unitary_exp(h.h_total.matrix, seq.spacing_s);
  const Eigen::VectorXd m_z = total_iz_diagonal(n);
  Matrix u = Matrix::Identity(h.h_total.dimension(), h.h_total.dimension());
  for (int k = 0; k < cycles; ++k) {
    u = step * iz_phase_factors(m_z, ac_phase(seq, k)).asDiagonal() * u;
  }
  return decompose_unitary(std::move(u), cycles * seq.spacing_s);
}

std::vector<FlipAnglePoint> flip_angle_sweep(const HamiltonianSet& h, const PulseSequenceSpec& tmpl,
                                             const std::vector<double>& thetas) {
  tmpl.validate();
  const Matrix free_tau = tmpl.pulse_model == PulseModel::delta
                              ? free_propagator(h, tmpl.spacing_s)
                              : Matrix();
  std::vector<FlipAnglePoint> curve;
  curve.reserve(thetas.size());
  for (double theta : thetas) {
    PulseSequenceSpec seq = tmpl;
    seq.flip_angle = theta;
    const CyclePropagator prop = decompose_unitary(pulse_cycle(h, seq, free_tau), seq.spacing_s);
    curve.push_back({theta, integrated_survival(prop, seq.pulse_count)});
  }
  return curve;
}

EvolutionTrace average_traces(const std::vector<EvolutionTrace>& traces) {
  if (traces.empty()) throw Error(ErrorCode::InsufficientData, "no traces to average");
  EvolutionTrace mean;
  mean.times = traces.front().times;
  mean.survival.assign(mean.times.size(), 0.0);
  for (const auto& t : traces) {
    if (t.times != mean.times) {
      throw Error(ErrorCode::InvalidConfig, "traces to average must share a time grid");
    }
    for (std::size_t i = 0; i < t.survival.size(); ++i) mean.survival[i] += t.survival[i];
  }
  for (double& v : mean.survival) v /= static_cast<double>(traces.size());
  mean.metadata = traces.front().metadata;
  mean.metadata["realizations"] = traces.size();
  return mean;
}

std::vector<long long> log_spaced_pulses(long long max_pulse, int points) {
  std::vector<long long> out{0};
  if (max_pulse < 1 || points < 1) return out;
  const double top = std::log(static_cast<double>(max_pulse));
  for (int i = 0; i < points; ++i) {
    const double frac = points == 1 ? 1.0 : static_cast<double>(i) / (points - 1);
    const auto n = static_cast<long long>(std::llround(std::exp(frac * top)));
    if (n > out.back()) out.push_back(n);
  }
  if (out.back() != max_pulse) out.push_back(max_pulse);
  return out;
}

std::string format_double(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

std::string trace_to_csv(const EvolutionTrace& trace) {
  trace.validate();
  std::ostringstream out;
  out << "# " << trace.metadata.dump() << "\n";
  out << (trace.bloch ? "time_s,survival,ix,iy,iz\n" : "time_s,survival\n");
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << format_double(trace.times[i]) << ',' << format_double(trace.survival[i]);
    if (trace.bloch) {
      out << ',' << format_double(trace.bloch->ix[i]) << ',' << format_double(trace.bloch->iy[i])
          << ',' << format_double(trace.bloch->iz[i]);
    }
    out << '\n';
  }
  return out.str();
}

void write_trace_csv(const EvolutionTrace& trace, const std::string& path) {
  std::ofstream file(path);
  if (!file) throw Error(ErrorCode::Io, "cannot open " + path + " for writing");
  file << trace_to_csv(trace);
  if (!file) throw Error(ErrorCode::Io, "failed writing " + path);
}

namespace {

double parse_field(const std::string& text, std::size_t line_no) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  while (first < last && *first == ' ') ++first;
  const auto result = std::from_chars(first, last, value);
  if (result.ec != std::errc() || result.ptr != last) {
    throw Error(ErrorCode::InvalidConfig,
                "bad number '" + text + "' on trace line " + std::to_string(line_no));
  }
  return value;
}

}  // namespace

EvolutionTrace trace_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  EvolutionTrace trace;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t columns = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("#", 0) == 0) {
      if (!header_seen && line_no == 1) {
        try {
          trace.metadata = nlohmann::json::parse(line.substr(1));
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorCode::InvalidConfig, std::string("bad trace metadata: ") + e.what());
        }
      }
      continue;
    }
    if (!header_seen) {
      if (line == "time_s,survival") {
        columns = 2;
      } else if (line == "time_s,survival,ix,iy,iz") {
        columns = 5;
        trace.bloch = BlochComponents{};
      } else {
        throw Error(ErrorCode::InvalidConfig, "unrecognized trace header '" + line + "'");
      }
      header_seen = true;
      continue;
    }
    std::vector<double> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(parse_field(line.substr(start, comma - start), line_no));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != columns) {
      throw Error(ErrorCode::InvalidConfig, "wrong column count on trace line " + std::to_string(line_no));
    }
    trace.times.push_back(fields[0]);
    trace.survival.push_back(fields[1]);
    if (trace.bloch) {
      trace.bloch->ix.push_back(fields[2]);
      trace.bloch->iy.push_back(fields[3]);
      trace.bloch->iz.push_back(fields[4]);
    }
  }
  if (!header_seen) throw Error(ErrorCode::InvalidConfig, "trace has no header line");
  trace.validate();
  return trace;
}

EvolutionTrace read_trace_csv(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw Error(ErrorCode::Io, "cannot open " + path);
  std::ostringstream buf;
  buf << file.rdbuf();
  return trace_from_csv(buf.str());
}

}  // namespace prethermal
