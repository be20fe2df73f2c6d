#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "prethermal/error.hpp"
#include "prethermal/propagation.hpp"

using namespace prethermal;

namespace {

HamiltonianSet hamiltonians(int n, unsigned seed, double scale_hz = 1000.0) {
  return build_hamiltonians(oracle::random_lattice(n, seed, scale_hz));
}

PulseSequenceSpec delta(double theta, double tau, long long pulses = 10) {
  PulseSequenceSpec s;
  s.flip_angle = theta;
  s.spacing_s = tau;
  s.pulse_count = pulses;
  return s;
}

// s(n) by explicit repeated multiplication.
std::vector<double> brute_survival(const Matrix& u, int spins, int pulses) {
  const Matrix ix = oracle::total('x', spins);
  const double norm = (ix * ix).trace().real();
  std::vector<double> out;
  Matrix un = Matrix::Identity(u.rows(), u.cols());
  for (int n = 0; n <= pulses; ++n) {
    out.push_back((un.adjoint() * ix * un * ix).trace().real() / norm);
    un = u * un;
  }
  return out;
}

}  // namespace

TEST_CASE("sequence validation") {
  PulseSequenceSpec s = delta(M_PI / 2, 1e-4);
  CHECK_NOTHROW(s.validate());
  s.spacing_s = 0;
  CHECK_THROWS_AS(s.validate(), Error);
  s = delta(M_PI / 2, 1e-4);
  s.pulse_width_s = 2e-4;
  CHECK_THROWS_AS(s.validate(), Error);
  s = delta(M_PI / 2, 1e-4);
  s.acquisition_window_s = 2e-4;
  CHECK_THROWS_AS(s.validate(), Error);
  s = delta(M_PI / 2, 1e-4, 0);
  CHECK_THROWS_AS(s.validate(), Error);
  s = delta(M_PI / 2, 1e-4);
  s.pulse_model = PulseModel::finite;
  try {
    s.validate();
    FAIL("expected DegeneratePulse");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegeneratePulse);
  }
  CHECK(delta(M_PI / 2, 1e-4).resonant_ac_frequency_hz() == doctest::Approx(2500.0));
}

TEST_CASE("cycle unitary for a full turn with no Hamiltonian is a global sign") {
  for (int n : {1, 2, 3}) {
    HamiltonianSet h;
    const Eigen::Index dim = Eigen::Index{1} << n;
    h.h_total = {Matrix::Zero(dim, dim), OperatorUnits::angular_frequency};
    const CyclePropagator p = cycle_unitary(h, delta(2 * M_PI, 1e-4));
    const double sign = n % 2 ? -1.0 : 1.0;
    CHECK((p.unitary - sign * Matrix::Identity(dim, dim)).norm() < 1e-12);
    const EvolutionTrace t = evolve_survival(p, 5);
    for (double s : t.survival) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("cycle unitary is unitary with unit-modulus eigenvalues") {
  const CyclePropagator p = cycle_unitary(hamiltonians(6, 4), delta(M_PI / 2, 1e-4));
  CHECK(unitarity_residual(p.unitary) < 1e-12);
  CHECK((p.eigenvalues.cwiseAbs().array() - 1.0).abs().maxCoeff() < 1e-10);
  const Matrix rebuilt = p.eigenvectors * p.eigenvalues.asDiagonal() * p.eigenvectors.adjoint();
  CHECK((rebuilt - p.unitary).norm() < 1e-10);
}

TEST_CASE("finite pulses converge to the delta model at first order") {
  const HamiltonianSet h = hamiltonians(3, 7);
  PulseSequenceSpec s = delta(M_PI / 2, 1e-4);
  const Matrix ud = cycle_unitary(h, s).unitary;
  s.pulse_model = PulseModel::finite;
  std::vector<double> err;
  for (double tp : {1e-6, 1e-7, 1e-8}) {
    s.pulse_width_s = tp;
    err.push_back((cycle_unitary(h, s).unitary - ud).norm());
  }
  CHECK(err[1] < err[0]);
  CHECK(err[2] < err[1]);
  CHECK(err[0] / err[1] == doctest::Approx(10.0).epsilon(0.05));
  CHECK(err[1] / err[2] == doctest::Approx(10.0).epsilon(0.05));
}

TEST_CASE("survival agrees with repeated multiplication") {
  const HamiltonianSet h = hamiltonians(4, 9);
  for (double theta : {M_PI / 2, 1.1, M_PI}) {
    const CyclePropagator p = cycle_unitary(h, delta(theta, 2e-4));
    const auto expect = brute_survival(p.unitary, 4, 40);
    const EvolutionTrace t = evolve_survival(p, 40);
    REQUIRE(t.size() == 41);
    CHECK(t.survival[0] == doctest::Approx(1.0).epsilon(1e-12));
    for (int n = 0; n <= 40; ++n) CHECK(t.survival[n] == doctest::Approx(expect[n]).epsilon(1e-9));
    for (int n = 0; n <= 40; ++n) CHECK(t.times[n] == doctest::Approx(n * 2e-4));
  }
}

TEST_CASE("no Hamiltonian keeps the spin lock exactly") {
  HamiltonianSet h;
  h.h_total = {Matrix::Zero(8, 8), OperatorUnits::angular_frequency};
  for (double theta : {0.3, M_PI / 2, 2.0}) {
    const EvolutionTrace t = evolve_survival(cycle_unitary(h, delta(theta, 1e-4)), 20);
    for (double s : t.survival) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("Larmor precession of a single spin") {
  SpinLattice one;
  one.positions = {Vec3::Zero()};
  one.disorder_hz = {130.0};
  const HamiltonianSet h = build_hamiltonians(one);
  const double tau = 1e-4;
  const EvolutionTrace t = evolve_survival(cycle_unitary(h, delta(0.0, tau)), 200);
  for (std::size_t n = 0; n < t.size(); ++n) {
    CHECK(t.survival[n] == doctest::Approx(std::cos(2 * M_PI * 130.0 * n * tau)).epsilon(1e-9).scale(1.0));
  }
  const EvolutionTrace f = fid(h, {0.0, 1e-3, 2.5e-3});
  CHECK(f.survival[0] == doctest::Approx(1.0));
  CHECK(f.survival[1] == doctest::Approx(std::cos(2 * M_PI * 130.0 * 1e-3)));
  CHECK(f.survival[2] == doctest::Approx(std::cos(2 * M_PI * 130.0 * 2.5e-3)));
}

TEST_CASE("two-spin free decay oscillates at three halves the coupling") {
  SpinLattice lat;
  lat.positions = {Vec3::Zero(), Vec3(0.2, 0, 0)};
  lat.disorder_hz = {0, 0};
  lat.couplings = {{0, 1, 500.0}};
  // The isotropic part commutes with total I_x, leaving 3 d I_1z I_2z: s(t) = cos(3 pi d t).
  std::vector<double> times;
  for (int i = 0; i < 50; ++i) times.push_back(i * 1e-4);
  const EvolutionTrace f = fid(build_hamiltonians(lat), times);
  for (std::size_t i = 0; i < times.size(); ++i) {
    CHECK(f.survival[i] == doctest::Approx(std::cos(3 * M_PI * 500.0 * times[i])).scale(1.0).epsilon(1e-10));
  }
  CHECK_THROWS_AS(fid(build_hamiltonians(lat), {1.0, 0.5}), Error);
}

TEST_CASE("arbitrary pulse counts, integrated and long-time survival") {
  const CyclePropagator p = cycle_unitary(hamiltonians(4, 12), delta(M_PI / 2, 3e-4));
  const EvolutionTrace full = evolve_survival(p, 300);
  const EvolutionTrace some = survival_at(p, {0, 7, 150, 300});
  CHECK(some.survival[1] == doctest::Approx(full.survival[7]).epsilon(1e-10));
  CHECK(some.survival[2] == doctest::Approx(full.survival[150]).epsilon(1e-10));
  CHECK(some.survival[3] == doctest::Approx(full.survival[300]).epsilon(1e-10));
  double sum = 0;
  for (double s : full.survival) sum += s;
  CHECK(integrated_survival(p, 300) == doctest::Approx(sum).epsilon(1e-9));

  const double late = integrated_survival(p, 2000000) / 2000001.0;
  CHECK(long_time_survival(p) == doctest::Approx(late).epsilon(2e-3));
  CHECK_THROWS_AS(survival_at(p, {5, 3}), Error);
}

TEST_CASE("state norm survives ten thousand cycles") {
  const CyclePropagator p = cycle_unitary(hamiltonians(5, 13), delta(M_PI / 2, 1e-4));
  const Matrix& v = p.eigenvectors;
  Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(32);
  psi(3) = 1.0;
  const Eigen::VectorXcd phases = (p.eigenphases.cast<Complex>() * Complex(0, -10000.0)).array().exp();
  const Eigen::VectorXcd out = v * phases.asDiagonal() * v.adjoint() * psi;
  CHECK(std::abs(out.norm() - 1.0) < 1e-8);
  const EvolutionTrace t = survival_at(p, {0, 10000});
  CHECK(std::abs(t.survival[1]) <= 1.0 + 1e-9);
}

TEST_CASE("forward then backward evolution returns to the start") {
  const CyclePropagator p = cycle_unitary(hamiltonians(4, 14), delta(M_PI / 2, 1e-4));
  const CyclePropagator back = decompose_unitary(p.unitary.adjoint(), 1e-4);
  const Matrix ix = collective_spin(Axis::x, 4).matrix;
  Matrix fwd = Matrix::Identity(16, 16);
  Matrix bwd = Matrix::Identity(16, 16);
  for (int i = 0; i < 37; ++i) {
    fwd = p.unitary * fwd;
    bwd = back.unitary * bwd;
  }
  const Matrix total = bwd * fwd;
  const double s = (total.adjoint() * ix * total * ix).trace().real() / (ix * ix).trace().real();
  CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("traces are invariant under an x-rotation gauge of the Hamiltonian") {
  const HamiltonianSet h = hamiltonians(4, 15);
  const Matrix g = collective_rotation(0.83, Axis::x, 4).matrix;
  HamiltonianSet rotated = h;
  rotated.h_total.matrix = g.adjoint() * h.h_total.matrix * g;
  const auto a = evolve_survival(cycle_unitary(h, delta(M_PI / 2, 2e-4)), 30).survival;
  const auto b = evolve_survival(cycle_unitary(rotated, delta(M_PI / 2, 2e-4)), 30).survival;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
}

TEST_CASE("Bloch components") {
  SpinLattice one;
  one.positions = {Vec3::Zero()};
  one.disorder_hz = {400.0};
  const EvolutionTrace t = evolve_survival(cycle_unitary(build_hamiltonians(one), delta(0.4, 1e-4)), 60, true);
  REQUIRE(t.bloch);
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double x = t.bloch->ix[n], y = t.bloch->iy[n], z = t.bloch->iz[n];
    CHECK(x == t.survival[n]);
    CHECK(x * x + y * y + z * z <= 1.0 + 1e-9);
  }
  // Precession under c I_z alone moves I_x toward I_y: <I_y> = sin(2 pi c t).
  const EvolutionTrace free = evolve_survival(cycle_unitary(build_hamiltonians(one), delta(0.0, 1e-4)), 10, true);
  CHECK(free.bloch->iy[3] == doctest::Approx(std::sin(2 * M_PI * 400.0 * 3e-4)));
}

TEST_CASE("AC field without amplitude matches plain evolution") {
  const HamiltonianSet h = hamiltonians(4, 16);
  PulseSequenceSpec s = delta(M_PI / 2, 1e-4, 200);
  const auto plain = evolve_survival(cycle_unitary(h, s), 200).survival;
  s.ac_field = AcField{0.0, 2500.0, 0.3};
  const auto ac = evolve_with_ac_field(h, s).survival;
  REQUIRE(ac.size() == plain.size());
  for (std::size_t i = 0; i < ac.size(); ++i) CHECK(std::abs(ac[i] - plain[i]) < 1e-9);
  s.ac_substeps = 32;
  try {
    evolve_with_ac_field(h, s);
    FAIL("expected SubstepTooCoarse");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SubstepTooCoarse);
  }
}

TEST_CASE("AC field rotates a lone spin by the integrated field") {
  SpinLattice one;
  one.positions = {Vec3::Zero()};
  one.disorder_hz = {0.0};
  PulseSequenceSpec s = delta(0.0, 1e-4, 50);
  const double b = 300.0, f = 700.0, phi = 0.4;
  s.ac_field = AcField{b, f, phi};
  s.ac_substeps = 256;
  const EvolutionTrace t = evolve_with_ac_field(build_hamiltonians(one), s);
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double tt = t.times[n];
    const double angle = b / f * (std::sin(2 * M_PI * f * tt + phi) - std::sin(phi));
    CHECK(t.survival[n] == doctest::Approx(std::cos(angle)).scale(1.0).epsilon(1e-5));
  }
}

TEST_CASE("AC response averaged over phase does not depend on the phase origin") {
  const HamiltonianSet h = hamiltonians(3, 17);
  auto averaged = [&](double offset) {
    std::vector<double> mean(101, 0.0);
    for (int k = 0; k < 8; ++k) {
      PulseSequenceSpec s = delta(M_PI / 2, 1e-4, 100);
      s.ac_field = AcField{200.0, 2500.0, offset + k * M_PI / 4};
      const auto tr = evolve_with_ac_field(h, s).survival;
      for (std::size_t i = 0; i < tr.size(); ++i) mean[i] += tr[i] / 8;
    }
    return mean;
  };
  const auto a = averaged(0.0);
  const auto b = averaged(M_PI / 4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9).scale(1.0));
}

TEST_CASE("AC supercycle reproduces pulse-by-pulse evolution") {
  const HamiltonianSet h = hamiltonians(4, 19, 500.0);
  for (double f : {2500.0, 1750.0}) {
    PulseSequenceSpec s = delta(M_PI / 2, 1e-4, 400);
    s.ac_field = AcField{150.0, f, 0.2};
    const int k = ac_supercycle_length(s);
    CHECK(k == (f == 2500.0 ? 4 : 40));
    const auto stepped = evolve_with_ac_field(h, s).survival;
    const EvolutionTrace super = survival_at(ac_supercycle(h, s), {0, 1, 2, 5, 400 / k});
    for (std::size_t i = 0; i < super.size(); ++i) {
      const auto m = static_cast<std::size_t>(std::llround(super.times[i] / (k * 1e-4)));
      CHECK(super.survival[i] == doctest::Approx(stepped[m * k]).epsilon(1e-9).scale(1.0));
    }
  }
  PulseSequenceSpec odd = delta(M_PI / 2, 1e-4);
  odd.ac_field = AcField{150.0, 1234.567891, 0.0};
  CHECK_THROWS_AS(ac_supercycle_length(odd, 100), Error);
}

TEST_CASE("flip-angle sweep limits") {
  const HamiltonianSet h = hamiltonians(4, 18, 300.0);
  const PulseSequenceSpec s = delta(0.0, 1e-4, 100);
  const auto curve = flip_angle_sweep(h, s, {1e-9, 0.7, 0.7 + 2 * M_PI});
  std::vector<double> times;
  for (int n = 0; n <= 100; ++n) times.push_back(n * 1e-4);
  double fid_sum = 0.0;
  for (double v : fid(h, times).survival) fid_sum += v;
  CHECK(curve[0].integrated == doctest::Approx(fid_sum).epsilon(1e-6));
  CHECK(curve[1].integrated == doctest::Approx(curve[2].integrated).epsilon(1e-9));
}

TEST_CASE("trace averaging and log-spaced counts") {
  EvolutionTrace a, b;
  a.times = b.times = {0.0, 1.0};
  a.survival = {1.0, 0.5};
  b.survival = {1.0, 0.25};
  const EvolutionTrace m = average_traces({a, b});
  CHECK(m.survival[1] == doctest::Approx(0.375));
  b.times = {0.0, 2.0};
  CHECK_THROWS_AS(average_traces({a, b}), Error);

  const auto counts = log_spaced_pulses(100000, 50);
  CHECK(counts.front() == 0);
  CHECK(counts.back() == 100000);
  for (std::size_t i = 1; i < counts.size(); ++i) CHECK(counts[i] > counts[i - 1]);
}

TEST_CASE("CSV export round trips bit-exactly") {
  const CyclePropagator p = cycle_unitary(hamiltonians(3, 19), delta(M_PI / 2, 1e-4));
  EvolutionTrace t = evolve_survival(p, 25, true);
  t.metadata["seed"] = 17;
  const std::string text = trace_to_csv(t);
  CHECK(text.rfind("# {", 0) == 0);
  CHECK(text.find("time_s,survival,ix,iy,iz\n") != std::string::npos);
  const EvolutionTrace back = trace_from_csv(text);
  CHECK(back.times == t.times);
  CHECK(back.survival == t.survival);
  CHECK(back.bloch->iy == t.bloch->iy);
  CHECK(back.metadata == t.metadata);
  CHECK(trace_to_csv(back) == text);
  CHECK(format_double(0.1) == "0.1");
  CHECK_THROWS_AS(trace_from_csv("time_s,survival\n0,abc\n"), Error);
}
