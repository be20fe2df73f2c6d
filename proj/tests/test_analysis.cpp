#include <doctest.h>

#include <cmath>
#include <random>

#include "prethermal/analysis.hpp"
#include "prethermal/error.hpp"

using namespace prethermal;

namespace {

DecayTrace sampled(std::size_t n, double t_max, const std::function<double(double)>& f) {
  DecayTrace t;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = t_max * static_cast<double>(i) / static_cast<double>(n - 1);
    t.times.push_back(x);
    t.amplitudes.push_back(f(x));
  }
  return t;
}

DecayTrace stretched(double a, double life, double alpha, std::size_t n = 200, double span = 5.0) {
  return sampled(n, span * life, [=](double t) { return a * std::exp(-std::pow(t / life, alpha)); });
}

// ln s piecewise linear in sqrt(t) with a kink at t_break.
DecayTrace kinked(double t_break, double t_max, std::size_t n) {
  const double xb = std::sqrt(t_break);
  return sampled(n, t_max, [=](double t) {
    const double x = std::sqrt(t);
    const double y = -2.0 * x - (x > xb ? 25.0 * (x - xb) : 0.0);
    return std::exp(y);
  });
}

double nnls_bruteforce_cost(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  // Every active set; keep the feasible unconstrained solve with least residual.
  const int n = static_cast<int>(a.cols());
  double best = (b).squaredNorm();
  for (int mask = 1; mask < (1 << n); ++mask) {
    std::vector<int> idx;
    for (int j = 0; j < n; ++j) if (mask >> j & 1) idx.push_back(j);
    Eigen::MatrixXd sub(a.rows(), idx.size());
    for (std::size_t c = 0; c < idx.size(); ++c) sub.col(c) = a.col(idx[c]);
    const Eigen::VectorXd x = sub.colPivHouseholderQr().solve(b);
    if ((x.array() >= 0).all()) best = std::min(best, (sub * x - b).squaredNorm());
  }
  return best;
}

}  // namespace

TEST_CASE("stretched fit recovers noiseless generator parameters") {
  const StretchedFit fit = fit_stretched_exponential(stretched(1.0, 353.0, 0.5));
  CHECK(fit.amplitude == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(fit.lifetime_s == doctest::Approx(353.0).epsilon(1e-3));
  CHECK(fit.exponent == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(fit.residual_rms < 1e-9);
  CHECK(fit(353.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-6));
}

TEST_CASE("stretched fit nests the plain exponential") {
  const DecayTrace t = stretched(2.0, 0.8, 1.0);
  const StretchedFit fit = fit_stretched_exponential(t);
  std::vector<double> y;
  for (double a : t.amplitudes) y.push_back(std::log(a));
  const LinearFit line = linear_fit(t.times, y);
  CHECK(fit.lifetime_s == doctest::Approx(-1.0 / line.slope).epsilon(1e-3));
  CHECK(fit.exponent == doctest::Approx(1.0).epsilon(1e-6));
  const StretchedFit fixed = fit_stretched_exponential(t, 1.0);
  CHECK(fixed.exponent_fixed);
  CHECK(fixed.lifetime_s == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("stretched fit under one percent multiplicative noise") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 0.01);
  int good = 0;
  for (int seed = 0; seed < 100; ++seed) {
    DecayTrace t = stretched(1.0, 353.0, 0.5);
    for (double& a : t.amplitudes) a *= 1.0 + g(rng);
    const StretchedFit fit = fit_stretched_exponential(t);
    good += std::abs(fit.amplitude - 1) < 0.05 && std::abs(fit.lifetime_s / 353 - 1) < 0.05 &&
            std::abs(fit.exponent / 0.5 - 1) < 0.05;
  }
  CHECK(good == 100);
}

TEST_CASE("stretched fit edge cases and idempotence") {
  DecayTrace flat = sampled(50, 1.0, [](double) { return 0.7; });
  try {
    fit_stretched_exponential(flat);
    FAIL("expected DegenerateTrace");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateTrace);
  }
  CHECK_THROWS_AS(fit_stretched_exponential(sampled(5, 1.0, [](double t) { return 1 - t; })), Error);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 0.02);
  DecayTrace noisy = stretched(0.9, 3.0, 0.6);
  for (double& a : noisy.amplitudes) a += g(rng);
  const StretchedFit first = fit_stretched_exponential(noisy);
  DecayTrace model = noisy;
  for (std::size_t i = 0; i < model.size(); ++i) model.amplitudes[i] = first(model.times[i]);
  const StretchedFit again = fit_stretched_exponential(model);
  CHECK(again.amplitude == doctest::Approx(first.amplitude).epsilon(1e-6));
  CHECK(again.lifetime_s == doctest::Approx(first.lifetime_s).epsilon(1e-6));
  CHECK(again.exponent == doctest::Approx(first.exponent).epsilon(1e-6));

  const auto doc = to_json(first);
  CHECK(doc["model"] == "stretched_exponential");
  for (const char* key : {"params", "errors", "residual_rms", "n_points", "settings"}) CHECK(doc.contains(key));
  CHECK(stretched_from_json(doc).lifetime_s == first.lifetime_s);
  CHECK(first.covariance(1, 1) > 0.0);
}

TEST_CASE("nonnegative least squares matches exhaustive active-set search") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd a(12, 4);
    Eigen::VectorXd b(12);
    for (int i = 0; i < 12; ++i) {
      b(i) = g(rng);
      for (int j = 0; j < 4; ++j) a(i, j) = g(rng);
    }
    const Eigen::VectorXd x = nnls(a, b);
    CHECK((x.array() >= 0).all());
    CHECK((a * x - b).squaredNorm() == doctest::Approx(nnls_bruteforce_cost(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("multi-exponential recovery, nesting and containment") {
  const DecayTrace two = sampled(300, 20.0, [](double t) { return 0.6 * std::exp(-t / 0.5) + 0.4 * std::exp(-t / 6.0); });
  const MultiExpFit fit = fit_multi_exponential(two, 2);
  REQUIRE(fit.terms.size() == 2);
  CHECK(fit.terms[0].lifetime_s == doctest::Approx(0.5).epsilon(0.01));
  CHECK(fit.terms[1].lifetime_s == doctest::Approx(6.0).epsilon(0.01));
  CHECK(fit.terms[0].amplitude == doctest::Approx(0.6).epsilon(0.01));
  CHECK(fit.terms[1].amplitude == doctest::Approx(0.4).epsilon(0.01));

  const DecayTrace one = stretched(1.5, 2.0, 1.0);
  const MultiExpFit single = fit_multi_exponential(one, 1);
  const StretchedFit plain = fit_stretched_exponential(one, 1.0);
  CHECK(single.terms[0].lifetime_s == doctest::Approx(plain.lifetime_s).epsilon(1e-6));
  CHECK(single.terms[0].amplitude == doctest::Approx(plain.amplitude).epsilon(1e-6));

  const DecayTrace paper_like = stretched(1.0, 90.9, 0.5, 400, 8.0);
  const MultiExpFit five = fit_multi_exponential(paper_like, 5);
  const MultiExpFit base = fit_multi_exponential(paper_like, 1);
  CHECK(five.residual_rms <= base.residual_rms);
  for (std::size_t i = 1; i < five.terms.size(); ++i) CHECK(five.terms[i].lifetime_s >= five.terms[i - 1].lifetime_s);
}

TEST_CASE("one-over-e lifetime") {
  const double tau = 0.01;
  const DecayTrace e = sampled(1001, 10.0, [](double t) { return std::exp(-t / 2.0); });
  CHECK(std::abs(one_over_e_lifetime(e) - 2.0) < tau);
  const DecayTrace s = stretched(1.0, 353.0, 0.5, 2001, 5.0);
  CHECK(std::abs(one_over_e_lifetime(s) - 353.0) < s.times[1]);
  DecayTrace scaled = s;
  for (double& a : scaled.amplitudes) a *= 7.0;
  CHECK(one_over_e_lifetime(scaled) == doctest::Approx(one_over_e_lifetime(s)).epsilon(1e-12));
  const DecayTrace early = sampled(50, 0.5, [](double t) { return std::exp(-t); });
  try {
    one_over_e_lifetime(early);
    FAIL("expected NoCrossing");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::NoCrossing);
  }
}

TEST_CASE("cusp detection") {
  const CuspFit c = detect_cusp(kinked(9.2e-3, 0.1, 400));
  CHECK(c.cusp_time_s == doctest::Approx(9.2e-3).epsilon(0.2));
  CHECK(c.slope_after < c.slope_before);

  const DecayTrace smooth = stretched(1.0, 0.02, 0.5, 300, 10.0);
  try {
    detect_cusp(smooth);
    FAIL("expected NoCusp");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoCusp);
  }

  DecayTrace rescaled = kinked(9.2e-3, 0.1, 400);
  for (double& t : rescaled.times) t *= 1000.0;
  CHECK(detect_cusp(rescaled).cusp_time_s == doctest::Approx(1000.0 * c.cusp_time_s).epsilon(1e-9));

  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 0.01);
  for (int seed = 0; seed < 20; ++seed) {
    DecayTrace noisy = kinked(9.2e-3, 0.1, 400);
    for (double& a : noisy.amplitudes) a *= 1.0 + g(rng);
    CHECK(detect_cusp(noisy).cusp_time_s == doctest::Approx(9.2e-3).epsilon(0.2));
  }
}

TEST_CASE("regime segmentation") {
  // Fast approach to a plateau, a stretched decay, then a floor below the infinite-temperature cut.
  DecayTrace t;
  for (int i = 1; i <= 4000; ++i) {
    const double time = 1e-4 * i;
    const double plateau = 0.5 + 0.5 * std::exp(-time / 2e-3);
    t.times.push_back(time);
    t.amplitudes.push_back(plateau * std::exp(-std::sqrt(time / 0.02)));
  }
  const RegimeSegmentation seg = segment_regimes(t);
  REQUIRE(seg.onset_iv_s);
  CHECK(t.amplitudes.back() < 0.02);
  CHECK(seg.labels.back() == Regime::IV);
  CHECK(seg.labels.size() == t.size());
  if (seg.cusp_time_s) {
    CHECK(seg.labels.front() == Regime::I);
    CHECK(*seg.cusp_time_s == doctest::Approx(detect_cusp(t).cusp_time_s));
  }

  const DecayTrace slow = stretched(1.0, 100.0, 0.5, 300, 0.5);
  const RegimeSegmentation none = segment_regimes(slow);
  CHECK(!none.onset_iv_s);
  for (double a : none.local_alpha) CHECK(a == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(!none.boundary_ii_iii_s);
}

TEST_CASE("harmonic spectrum of synthetic tones") {
  const double tau = 1e-4;
  const std::size_t n = 256;
  DecayTrace tone;
  for (std::size_t i = 0; i < n; ++i) {
    tone.times.push_back(i * tau);
    tone.amplitudes.push_back(0.3 * std::cos(2 * M_PI * 32.0 * i / n) + 2.0);
  }
  const HarmonicSpectrum s = harmonic_spectrum(tone, tau);
  REQUIRE(s.primary_hz());
  CHECK(*s.primary_hz() == doctest::Approx(32.0 / (n * tau)).epsilon(1e-12));
  for (const auto& p : s.peaks) {
    CHECK(p.frequency_hz > 0.0);
    CHECK(p.frequency_hz <= 0.5 / tau + 1e-9);
  }

  DecayTrace shifted = tone;
  for (double& a : shifted.amplitudes) a = 5.0 * a - 3.0;
  CHECK(*harmonic_spectrum(shifted, tau).primary_hz() == *s.primary_hz());

  DecayTrace short_trace = tone;
  short_trace.times.resize(63);
  short_trace.amplitudes.resize(63);
  CHECK_THROWS_AS(harmonic_spectrum(short_trace, tau), Error);
}

TEST_CASE("a weak line below the primary does not become the primary") {
  const double tau = 1e-4;
  const std::size_t n = 256;
  DecayTrace t;
  for (std::size_t i = 0; i < n; ++i) {
    t.times.push_back(i * tau);
    t.amplitudes.push_back(0.05 * std::cos(2 * M_PI * 20.0 * i / n) + std::cos(2 * M_PI * 48.0 * i / n));
  }
  const HarmonicSpectrum s = harmonic_spectrum(t, tau);
  REQUIRE(s.peaks.size() == 2);
  CHECK(*s.primary_hz() == doctest::Approx(48.0 / (n * tau)));
  HarmonicSettings loose;
  loose.primary_fraction = 0.01;
  CHECK(*harmonic_spectrum(t, tau, loose).primary_hz() == doctest::Approx(20.0 / (n * tau)));
}

TEST_CASE("aliased harmonics unfold to integer multiples") {
  const double tau = 1e-4;
  const std::size_t n = 512;
  // Primary at 0.125/tau; harmonics 2..5 at n/8 per tau, with 5/8 folding to 3/8.
  DecayTrace t;
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    for (int h = 1; h <= 3; ++h) v += std::cos(2 * M_PI * h * 0.125 * i) / h;
    t.times.push_back(i * tau);
    t.amplitudes.push_back(v);
  }
  const HarmonicSpectrum s = harmonic_spectrum(t, tau);
  REQUIRE(s.harmonics.size() >= 3);
  for (const auto& h : s.harmonics) {
    CHECK(h.unfolded_hz == doctest::Approx(h.harmonic * 0.125 / tau).epsilon(1e-9));
  }
}

TEST_CASE("harmonic slopes") {
  std::vector<std::pair<double, HarmonicSpectrum>> spectra;
  for (double theta : {M_PI / 6, M_PI / 4, M_PI / 3, M_PI / 2}) {
    HarmonicSpectrum s;
    s.tau_s = 1e-4;
    const double f1 = theta / (2 * M_PI * s.tau_s);
    for (int h = 1; h <= 3; ++h) s.harmonics.push_back({h, 0.0, h * f1, 1.0});
    spectra.emplace_back(theta, s);
  }
  const HarmonicSlopes slopes = harmonic_slope_fit(spectra);
  REQUIRE(slopes.ratios.size() == 3);
  CHECK(slopes.ratios[1] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(slopes.ratios[2] == doctest::Approx(3.0).epsilon(1e-6));

  for (auto& [theta, s] : spectra) s.harmonics.resize(1);
  const HarmonicSlopes lone = harmonic_slope_fit(spectra);
  CHECK(lone.slopes.size() == 1);
  CHECK(lone.ratios.empty());

  spectra.pop_back();
  try {
    harmonic_slope_fit(spectra);
    FAIL("expected TooFewPoints");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooFewPoints);
  }
}

TEST_CASE("decay-rate scaling laws") {
  std::vector<ScalingPoint> semilog;
  for (double x : {0.02, 0.05, 0.1, 0.2, 0.4}) semilog.push_back({x, 1.0 / (0.3 * std::exp(7.5 * x))});
  const ScalingFit a = decay_rate_scaling(semilog, ScalingAxis::semilog_rate_vs_jtau);
  CHECK(a.line.slope == doctest::Approx(7.5).epsilon(1e-6));
  CHECK(a.line.r_squared == doctest::Approx(1.0));

  std::vector<ScalingPoint> loglog;
  for (double w : {1e3, 3e3, 1e4, 3e4}) loglog.push_back({w, 2e-9 * w * w});
  CHECK(decay_rate_scaling(loglog, ScalingAxis::loglog_lifetime_vs_omega).line.slope == doctest::Approx(2.0).epsilon(1e-6));

  auto scaled = semilog;
  for (auto& p : scaled) p.lifetime_s *= 42.0;
  CHECK(decay_rate_scaling(scaled, ScalingAxis::semilog_rate_vs_jtau).line.slope ==
        doctest::Approx(a.line.slope).epsilon(1e-12));
  semilog.resize(2);
  CHECK_THROWS_AS(decay_rate_scaling(semilog, ScalingAxis::semilog_rate_vs_jtau), Error);
}

TEST_CASE("throughput gain") {
  CHECK(throughput_gain(1, 1, 1) == 0.5);
  CHECK(throughput_gain(223, 21.2, 90.9 / 1.5e-3) >= 1e10);
  CHECK(throughput_gain(3, 2, 10) * 2 == throughput_gain(3, 2, 20));
  CHECK_THROWS_AS(throughput_gain(0, 1, 1), Error);
}

TEST_CASE("rank correlation") {
  CHECK(spearman_correlation({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman_correlation({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman_correlation({1, 2, 3, 4, 5}, {1, 4, 9, 16, 100}) == doctest::Approx(1.0));
}
