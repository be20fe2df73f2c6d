#include "prethermal/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>

#include <fftw3.h>

#include "levenberg_marquardt.hpp"
#include "prethermal/error.hpp"

namespace prethermal {

namespace {

void check_trace(const DecayTrace& trace, std::size_t min_points, const char* what) {
  if (trace.times.size() != trace.amplitudes.size()) {
    throw Error(ErrorCode::InvalidConfig, "trace times and amplitudes differ in length");
  }
  if (trace.size() < min_points) {
    throw Error(ErrorCode::InsufficientData,
                std::string(what) + " needs at least " + std::to_string(min_points) + " points");
  }
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (!(trace.times[i] > trace.times[i - 1])) {
      throw Error(ErrorCode::InvalidConfig, "trace times must be strictly increasing");
    }
  }
}

double rms(const Eigen::VectorXd& r) {
  return r.size() == 0 ? 0.0 : std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));
}

Eigen::VectorXd as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

detail::LmOptions lm_options(const FitSettings& s) { return {s.max_iterations, s.relative_tolerance}; }

}  // namespace

double StretchedFit::operator()(double t) const {
  if (t <= 0.0) return amplitude;
  return amplitude * std::exp(-std::pow(t / lifetime_s, exponent));
}

double MultiExpFit::operator()(double t) const {
  double v = 0.0;
  for (const auto& term : terms) v += term.amplitude * std::exp(-t / term.lifetime_s);
  return v;
}

double one_over_e_lifetime(const DecayTrace& trace, std::optional<double> reference) {
  check_trace(trace, 2, "1/e lifetime");
  const double ref = reference.value_or(trace.amplitudes.front());
  if (!(ref > 0.0)) throw Error(ErrorCode::DegenerateTrace, "1/e reference level must be positive");
  const double threshold = ref / std::exp(1.0);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const double prev = trace.amplitudes[i - 1];
    const double cur = trace.amplitudes[i];
    if (cur < threshold && prev >= threshold) {
      const double frac = (prev - threshold) / (prev - cur);
      return trace.times[i - 1] + frac * (trace.times[i] - trace.times[i - 1]);
    }
  }
  throw Error(ErrorCode::NoCrossing, "trace never falls below its 1/e level");
}

StretchedFit fit_stretched_exponential(const DecayTrace& trace, std::optional<double> exponent_fixed,
                                       const FitSettings& settings) {
  check_trace(trace, 10, "stretched-exponential fit");
  if (exponent_fixed && !(*exponent_fixed > 0.0 && *exponent_fixed <= 2.0)) {
    throw Error(ErrorCode::InvalidConfig, "fixed exponent must lie in (0, 2]");
  }
  const Eigen::VectorXd t = as_vector(trace.times);
  const Eigen::VectorXd y = as_vector(trace.amplitudes);
  const double y_max = y.maxCoeff();
  const double y_min = y.minCoeff();
  if (!(y_max > 0.0) || (y_max - y_min) <= 1e-12 * std::abs(y_max)) {
    throw Error(ErrorCode::DegenerateTrace, "trace is constant; lifetime is unbounded");
  }

  double t_init;
  try {
    t_init = one_over_e_lifetime(trace, y_max);
  } catch (const Error&) {
    t_init = trace.times.back();
  }
  if (!(t_init > 0.0)) t_init = trace.times.back() > 0.0 ? trace.times.back() : 1.0;

  // Parameters (A, ln T[, alpha]); ln T keeps the lifetime positive.
  const bool free_alpha = !exponent_fixed.has_value();
  const double alpha_fixed = exponent_fixed.value_or(0.5);
  const Eigen::Index np = free_alpha ? 3 : 2;
  Eigen::VectorXd p0(np);
  p0(0) = y_max;
  p0(1) = std::log(t_init);
  if (free_alpha) p0(2) = 0.5;

  auto evaluate = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    const double a = p(0);
    const double u = p(1);
    const double alpha = free_alpha ? p(2) : alpha_fixed;
    r.resize(t.size());
    if (jac) jac->resize(t.size(), np);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      double z = 0.0;
      double log_ratio = 0.0;
      if (t(i) > 0.0) {
        log_ratio = std::log(t(i)) - u;
        z = std::exp(alpha * log_ratio);
      }
      const double e = std::exp(-z);
      r(i) = a * e - y(i);
      if (jac) {
        (*jac)(i, 0) = e;
        (*jac)(i, 1) = a * e * z * alpha;
        if (free_alpha) (*jac)(i, 2) = -a * e * z * log_ratio;
      }
    }
  };
  auto project = [&](Eigen::VectorXd& p) {
    if (free_alpha) p(2) = std::clamp(p(2), 1e-3, 2.0);
  };

  const detail::LmResult lm = detail::levenberg_marquardt(evaluate, p0, lm_options(settings), project);
  if (!lm.converged) {
    throw Error(ErrorCode::NonConvergence, "stretched-exponential fit did not converge in " +
                                               std::to_string(settings.max_iterations) + " iterations");
  }

  StretchedFit fit;
  fit.amplitude = lm.params(0);
  fit.lifetime_s = std::exp(lm.params(1));
  fit.exponent = free_alpha ? lm.params(2) : alpha_fixed;
  fit.exponent_fixed = !free_alpha;
  fit.residual_rms = rms(lm.residual);
  fit.iterations = lm.iterations;
  fit.n_points = trace.size();

  const double dof = static_cast<double>(t.size() - np);
  if (dof > 0) {
    const double sigma2 = lm.residual.squaredNorm() / dof;
    const Eigen::MatrixXd normal = lm.jacobian.transpose() * lm.jacobian;
    Eigen::MatrixXd cov = sigma2 * normal.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::VectorXd chain = Eigen::VectorXd::Ones(np);
    chain(1) = fit.lifetime_s;
    cov = chain.asDiagonal() * cov * chain.asDiagonal();
    fit.covariance.topLeftCorner(np, np) = cov;
  }
  return fit;
}

Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iterations) {
  const Eigen::Index n = a.cols();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(n, false);
  const double tol = 1e-12 * std::max(1.0, a.norm() * b.norm());

  auto solve_passive = [&](Eigen::VectorXd& z) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < n; ++j) if (passive[j]) idx.push_back(j);
    z = Eigen::VectorXd::Zero(n);
    if (idx.empty()) return;
    Eigen::MatrixXd sub(a.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t c = 0; c < idx.size(); ++c) sub.col(static_cast<Eigen::Index>(c)) = a.col(idx[c]);
    const Eigen::VectorXd sol = sub.colPivHouseholderQr().solve(b);
    for (std::size_t c = 0; c < idx.size(); ++c) z(idx[c]) = sol(static_cast<Eigen::Index>(c));
  };

  for (int outer = 0; outer < max_iterations; ++outer) {
    const Eigen::VectorXd w = a.transpose() * (b - a * x);
    Eigen::Index best = -1;
    double best_w = tol;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!passive[j] && w(j) > best_w) {
        best_w = w(j);
        best = j;
      }
    }
    if (best < 0) break;
    passive[best] = true;

    Eigen::VectorXd z;
    for (int inner = 0; inner < max_iterations; ++inner) {
      solve_passive(z);
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[j] && z(j) <= 0.0) feasible = false;
      }
      if (feasible) break;
      double step = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[j] && z(j) <= 0.0) step = std::min(step, x(j) / (x(j) - z(j)));
      }
      x += step * (z - x);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[j] && x(j) <= 1e-300) {
          passive[j] = false;
          x(j) = 0.0;
        }
      }
    }
    x = z;
  }
  return x;
}

namespace {

struct VarProState {
  Eigen::VectorXd amplitudes;
};

MultiExpFit fit_multi_from(const Eigen::VectorXd& t, const Eigen::VectorXd& y, Eigen::VectorXd log_tau,
                           const FitSettings& settings) {
  const Eigen::Index k = log_tau.size();
  const double log_lo = std::log(1e-6 * std::max(t.maxCoeff(), 1e-300));
  const double log_hi = std::log(1e6 * std::max(t.maxCoeff(), 1e-300));
  VarProState state;

  auto design = [&](const Eigen::VectorXd& lt) {
    Eigen::MatrixXd phi(t.size(), k);
    for (Eigen::Index i = 0; i < k; ++i) phi.col(i) = (-t.array() * std::exp(-lt(i))).exp();
    return phi;
  };

  // Variable projection: amplitudes are the NNLS solution for the current lifetimes, and the
  // Jacobian is Kaufman's approximation restricted to the active columns.
  auto evaluate = [&](const Eigen::VectorXd& lt, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    const Eigen::MatrixXd phi = design(lt);
    const Eigen::VectorXd a = nnls(phi, y);
    state.amplitudes = a;
    r = phi * a - y;
    if (!jac) return;
    std::vector<Eigen::Index> active;
    for (Eigen::Index i = 0; i < k; ++i) if (a(i) > 0.0) active.push_back(i);
    Eigen::MatrixXd q;
    if (!active.empty()) {
      Eigen::MatrixXd sub(t.size(), static_cast<Eigen::Index>(active.size()));
      for (std::size_t c = 0; c < active.size(); ++c) sub.col(static_cast<Eigen::Index>(c)) = phi.col(active[c]);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(sub);
      q = qr.householderQ() * Eigen::MatrixXd::Identity(t.size(), sub.cols());
    }
    jac->setZero(t.size(), k);
    for (Eigen::Index i = 0; i < k; ++i) {
      if (a(i) <= 0.0) continue;
      // d/d(ln tau) exp(-t/tau) = (t/tau) exp(-t/tau)
      Eigen::VectorXd col = a(i) * (phi.col(i).array() * t.array() * std::exp(-lt(i))).matrix();
      if (q.size() > 0) col -= q * (q.transpose() * col);
      jac->col(i) = col;
    }
  };
  auto project = [&](Eigen::VectorXd& lt) {
    for (Eigen::Index i = 0; i < k; ++i) lt(i) = std::clamp(lt(i), log_lo, log_hi);
  };

  const detail::LmResult lm = detail::levenberg_marquardt(evaluate, std::move(log_tau), lm_options(settings), project);
  if (!lm.converged) {
    throw Error(ErrorCode::NonConvergence, "multi-exponential fit did not converge");
  }
  Eigen::VectorXd r;
  evaluate(lm.params, r, nullptr);

  MultiExpFit fit;
  for (Eigen::Index i = 0; i < k; ++i) fit.terms.push_back({state.amplitudes(i), std::exp(lm.params(i))});
  std::stable_sort(fit.terms.begin(), fit.terms.end(),
                   [](const ExponentialTerm& a, const ExponentialTerm& b) { return a.lifetime_s < b.lifetime_s; });
  fit.residual_rms = rms(r);
  fit.iterations = lm.iterations;
  fit.n_points = static_cast<std::size_t>(t.size());
  return fit;
}

}  // namespace

MultiExpFit fit_multi_exponential(const DecayTrace& trace, int terms, const FitSettings& settings) {
  if (terms < 1) throw Error(ErrorCode::InvalidConfig, "need at least one exponential term");
  check_trace(trace, static_cast<std::size_t>(5 * terms), "multi-exponential fit");
  const Eigen::VectorXd t = as_vector(trace.times);
  const Eigen::VectorXd y = as_vector(trace.amplitudes);

  double span_lo = trace.times[1] - trace.times[0];
  const double span_hi = trace.times.back();
  if (!(span_lo > 0.0)) span_lo = span_hi / static_cast<double>(trace.size());

  double single_guess;
  try {
    single_guess = one_over_e_lifetime(trace, std::max(trace.amplitudes.front(), y.maxCoeff()));
  } catch (const Error&) {
    single_guess = span_hi;
  }
  if (!(single_guess > 0.0)) single_guess = span_hi;

  if (terms == 1) {
    Eigen::VectorXd lt(1);
    lt(0) = std::log(single_guess);
    return fit_multi_from(t, y, lt, settings);
  }

  Eigen::VectorXd lt(terms);
  for (int i = 0; i < terms; ++i) {
    const double frac = static_cast<double>(i) / (terms - 1);
    lt(i) = std::log(span_lo) + frac * (std::log(span_hi) - std::log(span_lo));
  }
  MultiExpFit fit = fit_multi_from(t, y, lt, settings);

  const MultiExpFit single = fit_multi_exponential(trace, 1, settings);
  if (fit.residual_rms > single.residual_rms) {
    // Seed one term at the single-exponential optimum so the larger model contains it.
    Eigen::VectorXd seeded = lt;
    Eigen::Index nearest = 0;
    const double target = std::log(single.terms.front().lifetime_s);
    (seeded.array() - target).abs().minCoeff(&nearest);
    seeded(nearest) = target;
    MultiExpFit retry = fit_multi_from(t, y, seeded, settings);
    if (retry.residual_rms < fit.residual_rms) fit = std::move(retry);
    if (fit.residual_rms > single.residual_rms) {
      fit.terms.assign(terms, ExponentialTerm{0.0, single.terms.front().lifetime_s});
      fit.terms.front() = single.terms.front();
      fit.residual_rms = single.residual_rms;
    }
  }
  return fit;
}

namespace {

struct HingeResult {
  double rms = 0.0;
  Eigen::Vector3d coeffs = Eigen::Vector3d::Zero();
};

HingeResult hinge_fit(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double x_break) {
  Eigen::MatrixXd a(x.size(), 3);
  a.col(0).setOnes();
  a.col(1) = x;
  a.col(2) = (x.array() - x_break).max(0.0).matrix();
  HingeResult out;
  out.coeffs = a.colPivHouseholderQr().solve(y);
  out.rms = rms(a * out.coeffs - y);
  return out;
}

}  // namespace

CuspFit detect_cusp(const DecayTrace& trace, double rms_gain) {
  check_trace(trace, 6, "cusp detection");
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (!(trace.amplitudes[i] > 0.0)) break;
    xs.push_back(std::sqrt(std::max(trace.times[i], 0.0)));
    ys.push_back(std::log(trace.amplitudes[i]));
  }
  if (xs.size() < 6) throw Error(ErrorCode::InsufficientData, "cusp detection needs >= 6 positive points");
  const Eigen::VectorXd x = as_vector(xs);
  const Eigen::VectorXd y = as_vector(ys);

  const LinearFit line = linear_fit(xs, ys);
  const Eigen::VectorXd resid = (line.intercept + line.slope * x.array()).matrix() - y;
  const double rms_one = rms(resid);
  const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
  if (rms_one <= 1e-12 * scale) throw Error(ErrorCode::NoCusp, "single segment fits exactly");

  HingeResult best;
  best.rms = HUGE_VAL;
  Eigen::Index best_index = -1;
  const Eigen::Index n = x.size();
  for (Eigen::Index m = 2; m + 2 < n; ++m) {
    const HingeResult h = hinge_fit(x, y, x(m));
    if (h.rms < best.rms) {
      best = h;
      best_index = m;
    }
  }
  if (best_index < 0 || best.rms > (1.0 - rms_gain) * rms_one) {
    throw Error(ErrorCode::NoCusp, "two-segment fit does not improve RMS enough");
  }
  CuspFit cusp;
  cusp.cusp_time_s = x(best_index) * x(best_index);
  cusp.rms_one_segment = rms_one;
  cusp.rms_two_segment = best.rms;
  cusp.slope_before = best.coeffs(1);
  cusp.slope_after = best.coeffs(1) + best.coeffs(2);
  return cusp;
}

RegimeSegmentation segment_regimes(const DecayTrace& trace, const RegimeSettings& settings) {
  check_trace(trace, 6, "regime segmentation");
  RegimeSegmentation seg;
  std::size_t plateau_index = 0;
  try {
    seg.cusp_time_s = detect_cusp(trace, settings.cusp_rms_gain).cusp_time_s;
    const auto it = std::lower_bound(trace.times.begin(), trace.times.end(), *seg.cusp_time_s * (1.0 - 1e-12));
    plateau_index = static_cast<std::size_t>(it - trace.times.begin());
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NoCusp && e.code() != ErrorCode::InsufficientData) throw;
  }

  const double plateau = trace.amplitudes[plateau_index];
  std::vector<double> lx;
  std::vector<double> ly;
  if (plateau > 0.0) {
    for (std::size_t i = plateau_index + 1; i < trace.size(); ++i) {
      const double ratio = trace.amplitudes[i] / plateau;
      if (trace.times[i] > 0.0 && ratio > 0.0 && ratio < 1.0) {
        lx.push_back(std::log(trace.times[i]));
        ly.push_back(std::log(-std::log(ratio)));
      }
    }
  }
  if (lx.size() >= 3) {
    const double half = 0.5 * settings.alpha_window_decades * std::log(10.0);
    const int samples = std::max(settings.alpha_samples, 2);
    for (int s = 0; s < samples; ++s) {
      const double centre = lx.front() + (lx.back() - lx.front()) * s / (samples - 1);
      std::vector<double> wx;
      std::vector<double> wy;
      for (std::size_t i = 0; i < lx.size(); ++i) {
        if (std::abs(lx[i] - centre) <= half) {
          wx.push_back(lx[i]);
          wy.push_back(ly[i]);
        }
      }
      if (wx.size() < 3 || wx.back() - wx.front() < 0.25 * half) continue;
      const LinearFit local = linear_fit(wx, wy);
      seg.alpha_times_s.push_back(std::exp(centre));
      seg.local_alpha.push_back(local.slope);
    }
    for (std::size_t i = 0; i < seg.local_alpha.size(); ++i) {
      if (std::abs(seg.local_alpha[i] - 0.5) > settings.alpha_threshold) {
        seg.boundary_ii_iii_s = seg.alpha_times_s[i];
        break;
      }
    }
  }

  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace.amplitudes[i] < settings.infinite_temperature_level) {
      seg.onset_iv_s = trace.times[i];
      break;
    }
  }

  seg.labels.resize(trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const double t = trace.times[i];
    Regime r = Regime::II;
    if (seg.cusp_time_s && t <= *seg.cusp_time_s) r = Regime::I;
    if (seg.boundary_ii_iii_s && t >= *seg.boundary_ii_iii_s) r = Regime::III;
    if (seg.onset_iv_s && t >= *seg.onset_iv_s) r = Regime::IV;
    seg.labels[i] = r;
  }
  return seg;
}

std::optional<double> HarmonicSpectrum::primary_hz() const {
  for (const auto& h : harmonics) {
    if (h.harmonic == 1) return h.unfolded_hz;
  }
  return std::nullopt;
}

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::vector<double> real_spectrum_magnitude(const std::vector<double>& input) {
  const int n = static_cast<int>(input.size());
  std::vector<double> in(input);
  const int bins = n / 2 + 1;
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(bins));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n, in.data(), out, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::vector<double> mag(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(out);
  return mag;
}

double fold_frequency(double f, double tau) {
  const double fs = 1.0 / tau;
  return std::abs(f - std::round(f / fs) * fs);
}

double nearest_alias(double observed, double target, double tau) {
  const double fs = 1.0 / tau;
  const double m = std::round(target / fs);
  double best = observed;
  for (double mm = m - 1; mm <= m + 1; mm += 1.0) {
    for (double sign : {-1.0, 1.0}) {
      const double image = mm * fs + sign * observed;
      if (image >= 0.0 && std::abs(image - target) < std::abs(best - target)) best = image;
    }
  }
  return best;
}

}  // namespace

HarmonicSpectrum harmonic_spectrum(const DecayTrace& trace, double tau_s, const HarmonicSettings& settings) {
  if (trace.size() < 64) throw Error(ErrorCode::InsufficientData, "harmonic spectrum needs >= 64 points");
  if (!(tau_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "tau must be > 0");
  const std::size_t n = trace.size();

  // Quadratic detrend in the sample index, then a periodic Hann taper.
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0;
    basis(static_cast<Eigen::Index>(i), 0) = 1.0;
    basis(static_cast<Eigen::Index>(i), 1) = u;
    basis(static_cast<Eigen::Index>(i), 2) = u * u;
  }
  const Eigen::VectorXd y = as_vector(trace.amplitudes);
  const Eigen::VectorXd detrended = y - basis * basis.colPivHouseholderQr().solve(y);
  std::vector<double> tapered(n);
  double window_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 0.5 * (1.0 - std::cos(constants::two_pi * static_cast<double>(i) / static_cast<double>(n)));
    tapered[i] = w * detrended(static_cast<Eigen::Index>(i));
    window_sum += w;
  }
  std::vector<double> mag = real_spectrum_magnitude(tapered);
  for (double& m : mag) m *= 2.0 / window_sum;

  HarmonicSpectrum spec;
  spec.tau_s = tau_s;
  spec.bin_width_hz = 1.0 / (static_cast<double>(n) * tau_s);
  const std::size_t bins = mag.size();
  spec.frequencies_hz.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) spec.frequencies_hz[k] = static_cast<double>(k) * spec.bin_width_hz;
  spec.magnitudes = mag;

  std::vector<double> sorted(mag.begin() + 1, mag.end());
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  spec.noise_floor = sorted[sorted.size() / 2];
  const double peak_max = *std::max_element(mag.begin() + 1, mag.end());
  const double threshold =
      std::max(settings.peak_threshold * spec.noise_floor, settings.relative_threshold * peak_max);

  // Bin 1 lies inside the Hann main lobe of whatever trend survives detrending.
  std::vector<std::size_t> candidates;
  for (std::size_t k = 2; k < bins; ++k) {
    const double left = mag[k - 1];
    const double right = k + 1 < bins ? mag[k + 1] : -1.0;
    if (mag[k] > threshold && mag[k] >= left && mag[k] >= right) candidates.push_back(k);
  }
  std::vector<std::size_t> merged;
  for (std::size_t i = 0; i < candidates.size();) {
    std::size_t j = i;
    std::size_t best = candidates[i];
    while (j + 1 < candidates.size() &&
           candidates[j + 1] - candidates[i] <= static_cast<std::size_t>(settings.merge_bins)) {
      ++j;
      if (mag[candidates[j]] > mag[best]) best = candidates[j];
    }
    merged.push_back(best);
    i = j + 1;
  }
  for (std::size_t k : merged) {
    spec.peaks.push_back({0, spec.frequencies_hz[k], spec.frequencies_hz[k], mag[k]});
  }
  if (spec.peaks.empty()) return spec;

  double strongest = 0.0;
  for (const auto& p : spec.peaks) strongest = std::max(strongest, p.amplitude);
  double f1 = 0.0;
  for (const auto& p : spec.peaks) {
    if (p.amplitude >= settings.primary_fraction * strongest) {
      f1 = p.frequency_hz;
      break;
    }
  }
  for (int h = 1; h <= settings.max_harmonic; ++h) {
    const double target = fold_frequency(h * f1, tau_s);
    if (target < spec.bin_width_hz) continue;
    const double tol = settings.match_bins * spec.bin_width_hz * h;
    std::optional<std::size_t> hit;
    for (std::size_t p = 0; p < spec.peaks.size(); ++p) {
      const double d = std::abs(spec.peaks[p].frequency_hz - target);
      if (d <= tol && (!hit || d < std::abs(spec.peaks[*hit].frequency_hz - target))) hit = p;
    }
    if (!hit) continue;
    HarmonicPeak peak = spec.peaks[*hit];
    peak.harmonic = h;
    peak.unfolded_hz = nearest_alias(peak.frequency_hz, h * f1, tau_s);
    if (spec.peaks[*hit].harmonic == 0) spec.peaks[*hit].harmonic = h;
    spec.harmonics.push_back(peak);
  }
  return spec;
}

HarmonicSlopes harmonic_slope_fit(const std::vector<std::pair<double, HarmonicSpectrum>>& spectra) {
  std::size_t with_primary = 0;
  for (const auto& [theta, s] : spectra) {
    if (s.primary_hz()) ++with_primary;
  }
  if (with_primary < 4) {
    throw Error(ErrorCode::TooFewPoints, "harmonic slope fit needs >= 4 flip angles with a primary peak");
  }
  int max_h = 0;
  for (const auto& [theta, s] : spectra) {
    for (const auto& h : s.harmonics) max_h = std::max(max_h, h.harmonic);
  }
  HarmonicSlopes out;
  for (int n = 1; n <= max_h; ++n) {
    std::vector<double> x;
    std::vector<double> f;
    for (const auto& [theta, s] : spectra) {
      for (const auto& h : s.harmonics) {
        if (h.harmonic == n) {
          x.push_back(theta / (constants::two_pi * s.tau_s));
          f.push_back(h.unfolded_hz);
        }
      }
    }
    if (x.size() < 3) continue;
    const LinearFit line = linear_fit(x, f);
    out.harmonics.push_back(n);
    out.slopes.push_back(line.slope);
    out.intercepts_hz.push_back(line.intercept);
  }
  if (out.harmonics.size() > 1 && out.harmonics.front() == 1) {
    for (double s : out.slopes) out.ratios.push_back(s / out.slopes.front());
  }
  return out;
}

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw Error(ErrorCode::TooFewPoints, "linear fit needs >= 2 paired points");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw Error(ErrorCode::DegenerateTrace, "linear fit abscissae are all equal");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw Error(ErrorCode::TooFewPoints, "rank correlation needs >= 2 paired points");
  }
  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = 0.5 * (n + 1.0);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

ScalingFit decay_rate_scaling(const std::vector<ScalingPoint>& points, ScalingAxis axis) {
  if (points.size() < 3) throw Error(ErrorCode::TooFewPoints, "scaling fit needs >= 3 points");
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& p : points) {
    if (!(p.lifetime_s > 0.0)) throw Error(ErrorCode::InvalidConfig, "lifetimes must be positive");
    if (axis == ScalingAxis::semilog_rate_vs_jtau) {
      x.push_back(p.x);
      y.push_back(-std::log(p.lifetime_s));
    } else {
      if (!(p.x > 0.0)) throw Error(ErrorCode::InvalidConfig, "omega must be positive for log-log scaling");
      x.push_back(std::log(p.x));
      y.push_back(std::log(p.lifetime_s));
    }
  }
  ScalingFit fit;
  fit.line = linear_fit(x, y);
  fit.axis = axis;
  fit.n_points = points.size();
  return fit;
}

double throughput_gain(double epsilon, double t1_ratio, double t2_ratio) {
  if (!(epsilon > 0.0 && t1_ratio > 0.0 && t2_ratio > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "throughput inputs must be positive");
  }
  return 0.5 * epsilon * epsilon * t1_ratio * t1_ratio * t2_ratio;
}

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::I: return "I";
    case Regime::II: return "II";
    case Regime::III: return "III";
    case Regime::IV: return "IV";
  }
  return "?";
}

nlohmann::json to_json(const StretchedFit& fit, const FitSettings& settings) {
  nlohmann::json doc;
  doc["model"] = "stretched_exponential";
  doc["params"] = {{"amplitude", fit.amplitude}, {"lifetime_s", fit.lifetime_s}, {"exponent", fit.exponent}};
  doc["errors"] = {{"amplitude", std::sqrt(std::max(0.0, fit.covariance(0, 0)))},
                   {"lifetime_s", std::sqrt(std::max(0.0, fit.covariance(1, 1)))},
                   {"exponent", std::sqrt(std::max(0.0, fit.covariance(2, 2)))}};
  doc["residual_rms"] = fit.residual_rms;
  doc["n_points"] = fit.n_points;
  doc["settings"] = {{"exponent_fixed", fit.exponent_fixed},
                     {"max_iterations", settings.max_iterations},
                     {"relative_tolerance", settings.relative_tolerance},
                     {"iterations", fit.iterations}};
  return doc;
}

StretchedFit stretched_from_json(const nlohmann::json& doc) {
  StretchedFit fit;
  try {
    const auto& p = doc.at("params");
    fit.amplitude = p.at("amplitude").get<double>();
    fit.lifetime_s = p.at("lifetime_s").get<double>();
    fit.exponent = p.at("exponent").get<double>();
    fit.residual_rms = doc.value("residual_rms", 0.0);
    fit.n_points = doc.value("n_points", std::size_t{0});
    if (doc.contains("settings")) fit.exponent_fixed = doc.at("settings").value("exponent_fixed", false);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed fit report: ") + e.what());
  }
  return fit;
}

nlohmann::json to_json(const MultiExpFit& fit, const FitSettings& settings) {
  nlohmann::json doc;
  doc["model"] = "multi_exponential";
  doc["params"] = nlohmann::json::array();
  for (const auto& t : fit.terms) doc["params"].push_back({{"amplitude", t.amplitude}, {"lifetime_s", t.lifetime_s}});
  doc["errors"] = nullptr;
  doc["residual_rms"] = fit.residual_rms;
  doc["n_points"] = fit.n_points;
  doc["settings"] = {{"terms", fit.terms.size()},
                     {"max_iterations", settings.max_iterations},
                     {"relative_tolerance", settings.relative_tolerance},
                     {"iterations", fit.iterations}};
  return doc;
}

nlohmann::json to_json(const CuspFit& fit) {
  return {{"model", "two_segment_sqrt_time"},
          {"params", {{"cusp_time_s", fit.cusp_time_s},
                      {"slope_before", fit.slope_before},
                      {"slope_after", fit.slope_after}}},
          {"rms_one_segment", fit.rms_one_segment},
          {"rms_two_segment", fit.rms_two_segment}};
}

nlohmann::json to_json(const RegimeSegmentation& seg, const RegimeSettings& settings) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json doc;
  doc["cusp_time_s"] = opt(seg.cusp_time_s);
  doc["boundary_ii_iii_s"] = opt(seg.boundary_ii_iii_s);
  doc["onset_iv_s"] = opt(seg.onset_iv_s);
  doc["labels"] = nlohmann::json::array();
  for (Regime r : seg.labels) doc["labels"].push_back(to_string(r));
  doc["alpha_times_s"] = seg.alpha_times_s;
  doc["local_alpha"] = seg.local_alpha;
  doc["settings"] = {{"alpha_threshold", settings.alpha_threshold},
                     {"infinite_temperature_level", settings.infinite_temperature_level},
                     {"cusp_rms_gain", settings.cusp_rms_gain},
                     {"alpha_window_decades", settings.alpha_window_decades}};
  return doc;
}

nlohmann::json to_json(const HarmonicSpectrum& spectrum, const HarmonicSettings& settings) {
  auto peaks = [](const std::vector<HarmonicPeak>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : list) {
      arr.push_back({{"harmonic", p.harmonic},
                     {"frequency_hz", p.frequency_hz},
                     {"unfolded_hz", p.unfolded_hz},
                     {"amplitude", p.amplitude}});
    }
    return arr;
  };
  nlohmann::json doc;
  doc["tau_s"] = spectrum.tau_s;
  doc["bin_width_hz"] = spectrum.bin_width_hz;
  doc["noise_floor"] = spectrum.noise_floor;
  doc["peaks"] = peaks(spectrum.peaks);
  doc["harmonics"] = peaks(spectrum.harmonics);
  doc["frequencies_hz"] = spectrum.frequencies_hz;
  doc["magnitudes"] = spectrum.magnitudes;
  doc["settings"] = {{"peak_threshold", settings.peak_threshold},
                     {"relative_threshold", settings.relative_threshold},
                     {"primary_fraction", settings.primary_fraction},
                     {"merge_bins", settings.merge_bins},
                     {"max_harmonic", settings.max_harmonic},
                     {"match_bins", settings.match_bins}};
  return doc;
}

nlohmann::json to_json(const HarmonicSlopes& slopes) {
  return {{"harmonics", slopes.harmonics},
          {"slopes", slopes.slopes},
          {"intercepts_hz", slopes.intercepts_hz},
          {"ratios", slopes.ratios}};
}

nlohmann::json to_json(const ScalingFit& fit) {
  return {{"model", fit.axis == ScalingAxis::semilog_rate_vs_jtau ? "semilog_rate_vs_jtau"
                                                                  : "loglog_lifetime_vs_omega"},
          {"params", {{"slope", fit.line.slope}, {"intercept", fit.line.intercept}}},
          {"r_squared", fit.line.r_squared},
          {"n_points", fit.n_points}};
}

}  // namespace prethermal
