#pragma once

// Stability analysis of score functions: closed-form extremum results,
// expected-value arguments, band-pass gain, Monte-Carlo saturation and
// submersion measurements, row pre-normalization, and curve generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <tuple>
#include <string>
#include <vector>

#include "pattn/matrix.hpp"
#include "pattn/random.hpp"
#include "pattn/score_functions.hpp"

namespace pattn {

inline constexpr double kVarianceGuard = 1e-12;

class DegenerateRow : public std::domain_error {
 public:
  explicit DegenerateRow(double variance)
      : std::domain_error("row variance " + std::to_string(variance) + " is below the guard"),
        variance_(variance) {}
  double variance() const noexcept { return variance_; }

 private:
  double variance_;
};

struct ExtremumInterval {
  double lower = 0.0;
  double upper = 0.0;
  double m_value = 0.0;
  // Set when M + cos x changes sign on the circle; lower/upper are then +/-inf.
  bool unbounded = false;
};

struct CurveSeries {
  std::vector<double> x_values;
  std::vector<double> y_values;
  std::string label;
  std::map<std::string, double> params;
};

struct SaturationReport {
  ScoreFunctionKind kind;
  double epsilon = 0.0;
  double fraction_saturated = 0.0;
  std::size_t sample_count = 0;
  double input_scale = 1.0;
  std::size_t skipped_trials = 0;
};

// ---------------------------------------------------------------------------
// One-dimensional extremum search

struct Extremum {
  double x = std::numeric_limits<double>::quiet_NaN();
  double value = -std::numeric_limits<double>::infinity();
};

/// Maximizes `objective` over [lo, hi]: grid scan at `step`, then
/// golden-section refinement around the best grid point down to `tol`.
/// Points where the objective throws ScoreError or returns NaN are ignored.
inline Extremum maximize(const std::function<double(double)>& objective, double lo, double hi,
                         double step = 1e-4, double tol = 1e-10) {
  auto safe = [&](double x) {
    try {
      const double v = objective(x);
      return std::isnan(v) ? -std::numeric_limits<double>::infinity() : v;
    } catch (const ScoreError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  const auto n = static_cast<std::size_t>(std::ceil((hi - lo) / step));
  Extremum best;
  std::size_t best_i = 0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double x = std::min(hi, lo + static_cast<double>(i) * step);
    const double v = safe(x);
    if (v > best.value) {
      best = {x, v};
      best_i = i;
    }
  }
  if (!std::isfinite(best.value)) return best;

  double a = std::max(lo, lo + (static_cast<double>(best_i) - 1.0) * step);
  double b = std::min(hi, lo + (static_cast<double>(best_i) + 1.0) * step);
  constexpr double inv_phi = 0.6180339887498949;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = safe(c), fd = safe(d);
  while (b - a > tol) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = safe(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = safe(d);
    }
  }
  const double xm = 0.5 * (a + b);
  const double vm = safe(xm);
  if (vm > best.value) best = {xm, vm};
  return best;
}

inline Extremum minimize(const std::function<double(double)>& objective, double lo, double hi,
                         double step = 1e-4, double tol = 1e-10) {
  auto r = maximize([&](double x) { return -objective(x); }, lo, hi, step, tol);
  r.value = -r.value;
  return r;
}

// ---------------------------------------------------------------------------
// Closed-form results

/// Largest value of the Softmax diagonal gradient, attained where e^{x_j} = M.
inline constexpr double softmax_extreme_gradient() { return 0.25; }

/// Numeric maximum of the Softmax diagonal gradient over x in [-20, 20] at
/// fixed off-sum M.
inline double softmax_numeric_extreme_gradient(double off_sum) {
  const auto kind = ScoreFunctionKind::of(ScoreTag::Softmax);
  return maximize([&](double x) { return diagonal_gradient(kind, x, off_sum); }, -20.0, 20.0)
      .value;
}

/// Cos-max diagonal gradient with the off-sum held fixed: -M sin x / (M + cos x)^2.
inline double cosmax_diagonal_gradient(double off_sum, double x) {
  return diagonal_gradient(ScoreFunctionKind::of(ScoreTag::CosMax), x, off_sum);
}

/// The two closed-form endpoints M^2/(2M+2) - M/2 and M^2/(2M-2) - M/2, as
/// written, with no ordering or boundedness handling.
inline std::pair<double, double> cosmax_interval_endpoints(double off_sum) {
  const double m = off_sum;
  return {m * m / (2.0 * m + 2.0) - m / 2.0, m * m / (2.0 * m - 2.0) - m / 2.0};
}

/// Range of the Cos-max extreme gradient for a fixed off-sum M.
///
/// For |M| < 1 the denominator M + cos x has real roots, the gradient is
/// unbounded and the interval is flagged as (-inf, +inf). M = 0 gives the
/// identically-zero gradient. Throws ScoreError(PoleProximity) at M = +/-1.
inline ExtremumInterval cosmax_extremum_interval(double off_sum) {
  if (!std::isfinite(off_sum)) throw ScoreError(ScoreErrorKind::NonFiniteInput, 0, off_sum);
  if (std::abs(off_sum - 1.0) < 1e-8 || std::abs(off_sum + 1.0) < 1e-8)
    throw ScoreError(ScoreErrorKind::PoleProximity, 0, off_sum);
  ExtremumInterval out;
  out.m_value = off_sum;
  if (off_sum == 0.0) return out;
  if (std::abs(off_sum) < 1.0) {
    out.lower = -std::numeric_limits<double>::infinity();
    out.upper = std::numeric_limits<double>::infinity();
    out.unbounded = true;
    return out;
  }
  std::tie(out.lower, out.upper) = cosmax_interval_endpoints(off_sum);
  return out;
}

/// x_j in (0, pi/2) maximizing the Sin2-max diagonal gradient at off-sum M:
/// (1/2) arccos(-(2M + 1 - sqrt(8 + (2M+1)^2)) / 2).
inline double sin2max_extremum_location(double off_sum) {
  if (!(off_sum > 0.0)) throw std::domain_error("sin2-max extremum location needs M > 0");
  const double b = 2.0 * off_sum + 1.0;
  const double arg = -0.5 * (b - std::sqrt(8.0 + b * b));
  if (!(arg >= -1.0 && arg <= 1.0))
    throw std::domain_error("arccos argument outside [-1, 1]");
  return 0.5 * std::acos(arg);
}

/// Band-pass gain g(M) = M / (M + f(x_j))^2 coupling f'(x_j) to dS_j/dx_j.
inline double filter_gain(double off_sum, double f_x) {
  const double den = off_sum + f_x;
  if (std::abs(den) < 1e-12) throw ScoreError(ScoreErrorKind::DenominatorNearZero, 0, den);
  return off_sum / (den * den);
}

/// E[S_j] for Sin-max-constant under E[M] ~ -sin(x_j): (1 + sin x_j) / d.
inline double sinmax_constant_expected_score(int dim, double x_j) {
  if (dim < 2) throw std::invalid_argument("dimension must be >= 2");
  return (1.0 + std::sin(x_j)) / static_cast<double>(dim);
}

/// E[dS_j/dx_j] for Sin-max-constant: (d - 1 - sin x_j) cos x_j / d^2.
inline double sinmax_constant_expected_gradient(int dim, double x_j) {
  if (dim < 2) throw std::invalid_argument("dimension must be >= 2");
  const double d = static_cast<double>(dim);
  return (d - 1.0 - std::sin(x_j)) * std::cos(x_j) / (d * d);
}

// ---------------------------------------------------------------------------
// Monte-Carlo measurements

/// Fraction of diagonal Jacobian entries with |value| < epsilon over `trials`
/// draws of N(0, input_scale^2) vectors. Draws that raise ScoreError are
/// counted in skipped_trials and excluded.
inline SaturationReport saturation_fraction(const ScoreFunctionKind& kind, int dim, int trials,
                                            double input_scale, double epsilon,
                                            std::uint64_t seed) {
  if (dim < 2) throw std::invalid_argument("dim must be >= 2");
  if (trials < 1) throw std::invalid_argument("trials must be >= 1");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  SaturationReport rep;
  rep.kind = kind;
  rep.epsilon = epsilon;
  rep.input_scale = input_scale;
  CounterRng rng(seed);
  std::vector<double> x(static_cast<std::size_t>(dim));
  std::size_t saturated = 0;
  for (int t = 0; t < trials; ++t) {
    for (auto& v : x) v = rng.normal(0.0, input_scale);
    try {
      const auto jac = jacobian(kind, x);
      for (std::size_t j = 0; j < x.size(); ++j)
        if (std::abs(jac(j, j)) < epsilon) ++saturated;
      rep.sample_count += x.size();
    } catch (const ScoreError&) {
      ++rep.skipped_trials;
    }
  }
  rep.fraction_saturated =
      rep.sample_count == 0 ? 0.0
                            : static_cast<double>(saturated) / static_cast<double>(rep.sample_count);
  return rep;
}

/// Mean over standard-normal draws of max_j |S_j - 1/d| for each d.
/// Shrinking values with d show element differences being swamped by a
/// constant term in f.
inline std::vector<double> information_submersion(const ScoreFunctionKind& kind,
                                                  std::span<const int> dims, int draws,
                                                  std::uint64_t seed) {
  std::vector<double> out;
  out.reserve(dims.size());
  for (int d : dims) {
    CounterRng rng(seed, static_cast<std::uint64_t>(d));
    std::vector<double> x(static_cast<std::size_t>(d));
    double total = 0.0;
    int accepted = 0;
    for (int t = 0; t < draws; ++t) {
      for (auto& v : x) v = rng.normal();
      try {
        const auto eval = scores(kind, x);
        double dev = 0.0;
        for (double s : eval.scores) dev = std::max(dev, std::abs(s - 1.0 / d));
        total += dev;
        ++accepted;
      } catch (const ScoreError&) {
      }
    }
    out.push_back(accepted ? total / accepted : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row pre-normalization

/// (x - mean) / sqrt(var) with the population variance.
inline std::vector<double> row_normalize(std::span<const double> x) {
  if (x.size() < 2) throw std::invalid_argument("row_normalize needs dim >= 2");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  if (!(var > kVarianceGuard)) throw DegenerateRow(var);
  const double inv_sd = 1.0 / std::sqrt(var);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * inv_sd;
  return y;
}

/// d norm_i / d x_k = (delta_ik - 1/d - y_i y_k / d) / sd.
inline Matrix row_normalize_jacobian(std::span<const double> x) {
  const auto y = row_normalize(x);
  const std::size_t d = x.size();
  const double n = static_cast<double>(d);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double inv_sd = 1.0 / std::sqrt(var / n);
  Matrix jac(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k)
      jac(i, k) = ((i == k ? 1.0 : 0.0) - 1.0 / n - y[i] * y[k] / n) * inv_sd;
  return jac;
}

inline ScoreEval prenormed_scores(const ScoreFunctionKind& kind, std::span<const double> x) {
  return scores(kind, row_normalize(x));
}

inline Matrix prenormed_jacobian(const ScoreFunctionKind& kind, std::span<const double> x) {
  return jacobian(kind, row_normalize(x)) * row_normalize_jacobian(x);
}

// ---------------------------------------------------------------------------
// Curves

namespace detail {

inline std::vector<double> linspace(double lo, double hi, int steps) {
  std::vector<double> xs(static_cast<std::size_t>(steps));
  const double dx = (hi - lo) / static_cast<double>(steps - 1);
  for (int i = 0; i < steps; ++i) xs[static_cast<std::size_t>(i)] = lo + dx * i;
  xs.back() = hi;
  return xs;
}

inline void check_curve_range(double x_min, double x_max, int steps) {
  if (steps < 2) throw std::invalid_argument("steps must be >= 2");
  if (!(x_min < x_max)) throw std::invalid_argument("x_min must be < x_max");
}

}  // namespace detail

/// Diagonal gradient M f'(x) / (M + f(x))^2 over a grid, off-sum fixed.
/// Guard points are emitted as NaN and counted in params["nan_count"].
inline CurveSeries gradient_curve(const ScoreFunctionKind& kind, double off_sum, double x_min,
                                  double x_max, int steps) {
  detail::check_curve_range(x_min, x_max, steps);
  CurveSeries c;
  c.label = std::string(name_of(kind.tag));
  c.x_values = detail::linspace(x_min, x_max, steps);
  c.y_values.reserve(c.x_values.size());
  std::size_t nan_count = 0;
  for (double x : c.x_values) {
    try {
      c.y_values.push_back(diagonal_gradient(kind, x, off_sum));
    } catch (const ScoreError&) {
      c.y_values.push_back(std::numeric_limits<double>::quiet_NaN());
      ++nan_count;
    }
  }
  c.params["M"] = off_sum;
  c.params["nan_count"] = static_cast<double>(nan_count);
  return c;
}

/// Pre-normalized counterpart of gradient_curve: element 0 of a row sweeps
/// [x_min, x_max] while the other `context_dim - 1` elements sit evenly
/// spaced on [-1, 1]; y is the diagonal entry of prenormed_jacobian.
inline CurveSeries prenormed_gradient_curve(const ScoreFunctionKind& kind, int context_dim,
                                            double x_min, double x_max, int steps) {
  detail::check_curve_range(x_min, x_max, steps);
  if (context_dim < 2) throw std::invalid_argument("context_dim must be >= 2");
  CurveSeries c;
  c.label = "norm-" + std::string(name_of(kind.tag));
  c.x_values = detail::linspace(x_min, x_max, steps);
  std::vector<double> row(static_cast<std::size_t>(context_dim));
  for (int i = 1; i < context_dim; ++i)
    row[static_cast<std::size_t>(i)] =
        context_dim == 2 ? 0.0 : -1.0 + 2.0 * (i - 1) / static_cast<double>(context_dim - 2);
  std::size_t nan_count = 0;
  for (double x : c.x_values) {
    row[0] = x;
    try {
      c.y_values.push_back(prenormed_jacobian(kind, row)(0, 0));
    } catch (const ScoreError&) {
      c.y_values.push_back(std::numeric_limits<double>::quiet_NaN());
      ++nan_count;
    } catch (const DegenerateRow&) {
      c.y_values.push_back(std::numeric_limits<double>::quiet_NaN());
      ++nan_count;
    }
  }
  c.params["d"] = context_dim;
  c.params["nan_count"] = static_cast<double>(nan_count);
  return c;
}

/// Largest |diagonal gradient| over x in [-2pi, 2pi] for each off-sum M.
/// M values where every grid point trips a guard emit NaN and are counted in
/// params["skipped_count"].
inline CurveSeries extremum_vs_m_curve(const ScoreFunctionKind& kind,
                                       std::span<const double> m_values) {
  if (m_values.empty()) throw std::invalid_argument("m_values must be nonempty");
  if (!std::is_sorted(m_values.begin(), m_values.end(), std::less_equal<>{}))
    throw std::invalid_argument("m_values must be strictly increasing");
  CurveSeries c;
  c.label = std::string(name_of(kind.tag));
  std::size_t skipped = 0;
  for (double m : m_values) {
    const auto best = maximize(
        [&](double x) { return std::abs(diagonal_gradient(kind, x, m)); },
        -2.0 * std::numbers::pi, 2.0 * std::numbers::pi);
    c.x_values.push_back(m);
    if (std::isfinite(best.value)) {
      c.y_values.push_back(best.value);
    } else {
      c.y_values.push_back(std::numeric_limits<double>::quiet_NaN());
      ++skipped;
    }
  }
  c.params["skipped_count"] = static_cast<double>(skipped);
  return c;
}

}  // namespace pattn
