#pragma once

// Score functions for attention: S_j = f(x_j) / sum_i f(x_i) for a family of
// element-wise maps f (exponential, Taylor, soft-margin and periodic variants),
// with analytic Jacobians and a central finite-difference oracle.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pattn/matrix.hpp"

namespace pattn {

enum class ScoreTag {
  Softmax,
  TaylorSoftmax,
  SMSoftmax,
  SMTaylorSoftmax,
  SinMaxConstant,
  SinMax,
  CosMax,
  Sin2Max,
  Sin2MaxShifted,
  SinSoftmax,
  SirenMax,
};

inline constexpr std::array<ScoreTag, 11> kAllScoreTags = {
    ScoreTag::Softmax,        ScoreTag::TaylorSoftmax, ScoreTag::SMSoftmax,
    ScoreTag::SMTaylorSoftmax, ScoreTag::SinMaxConstant, ScoreTag::SinMax,
    ScoreTag::CosMax,         ScoreTag::Sin2Max,       ScoreTag::Sin2MaxShifted,
    ScoreTag::SinSoftmax,     ScoreTag::SirenMax,
};

/// |sum f| below this raises DenominatorNearZero.
inline constexpr double kDenominatorGuard = 1e-8;
/// (1 - sin x) below this raises PoleProximity for Siren-max.
inline constexpr double kPoleGuard = 1e-6;

/// A score function together with its parameters.
///
/// `taylor_order` is read by the Taylor kinds, `margin` by the soft-margin
/// kinds and `phase` by Sin2-max-shifted; other kinds ignore them.
struct ScoreFunctionKind {
  ScoreTag tag = ScoreTag::Softmax;
  int taylor_order = 2;
  double margin = 0.0;
  double phase = std::numbers::pi / 4.0;

  static ScoreFunctionKind of(ScoreTag t) { return ScoreFunctionKind{t}; }

  static ScoreFunctionKind taylor(int order) {
    if (order < 1) throw std::invalid_argument("taylor order must be >= 1");
    return ScoreFunctionKind{ScoreTag::TaylorSoftmax, order};
  }

  static ScoreFunctionKind soft_margin(double m) {
    if (!(m >= 0.0)) throw std::invalid_argument("margin must be >= 0");
    ScoreFunctionKind k{ScoreTag::SMSoftmax};
    k.margin = m;
    return k;
  }

  static ScoreFunctionKind soft_margin_taylor(int order, double m) {
    if (order < 1) throw std::invalid_argument("taylor order must be >= 1");
    if (!(m >= 0.0)) throw std::invalid_argument("margin must be >= 0");
    ScoreFunctionKind k{ScoreTag::SMTaylorSoftmax, order};
    k.margin = m;
    return k;
  }

  static ScoreFunctionKind sin2_shifted(double phi = std::numbers::pi / 4.0) {
    ScoreFunctionKind k{ScoreTag::Sin2MaxShifted};
    k.phase = phi;
    return k;
  }

  bool uses_margin() const {
    return tag == ScoreTag::SMSoftmax || tag == ScoreTag::SMTaylorSoftmax;
  }
  bool uses_taylor() const {
    return tag == ScoreTag::TaylorSoftmax || tag == ScoreTag::SMTaylorSoftmax;
  }
  /// True when the numerator map differs from the map used for the other
  /// elements, i.e. a soft-margin kind with a non-zero margin.
  bool has_margin_shift() const { return uses_margin() && margin != 0.0; }

  friend bool operator==(const ScoreFunctionKind&, const ScoreFunctionKind&) = default;
};

struct ScoreNameEntry {
  std::string_view name;
  ScoreTag tag;
};

// Kebab-case names used on the command line and in report files.
inline constexpr std::array<ScoreNameEntry, 11> kScoreNames = {{
    {"softmax", ScoreTag::Softmax},
    {"taylor-softmax", ScoreTag::TaylorSoftmax},
    {"sm-softmax", ScoreTag::SMSoftmax},
    {"sm-taylor-softmax", ScoreTag::SMTaylorSoftmax},
    {"sin-max-constant", ScoreTag::SinMaxConstant},
    {"sin-max", ScoreTag::SinMax},
    {"cos-max", ScoreTag::CosMax},
    {"sin2-max", ScoreTag::Sin2Max},
    {"sin2-max-shifted", ScoreTag::Sin2MaxShifted},
    {"sin-softmax", ScoreTag::SinSoftmax},
    {"siren-max", ScoreTag::SirenMax},
}};

inline std::string_view name_of(ScoreTag tag) {
  for (const auto& e : kScoreNames)
    if (e.tag == tag) return e.name;
  return "unknown";
}

inline std::optional<ScoreTag> parse_score_tag(std::string_view name) {
  for (const auto& e : kScoreNames)
    if (e.name == name) return e.tag;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Errors

enum class ScoreErrorKind { DenominatorNearZero, PoleProximity, NonFiniteInput };

inline std::string_view name_of(ScoreErrorKind k) {
  switch (k) {
    case ScoreErrorKind::DenominatorNearZero: return "DenominatorNearZero";
    case ScoreErrorKind::PoleProximity: return "PoleProximity";
    case ScoreErrorKind::NonFiniteInput: return "NonFiniteInput";
  }
  return "unknown";
}

class ScoreError : public std::runtime_error {
 public:
  ScoreError(ScoreErrorKind kind, std::size_t index, double value)
      : std::runtime_error(describe(kind, index, value)),
        kind_(kind), index_(index), value_(value) {}

  ScoreErrorKind kind() const noexcept { return kind_; }
  std::size_t index() const noexcept { return index_; }
  double value() const noexcept { return value_; }

 private:
  static std::string describe(ScoreErrorKind kind, std::size_t index, double value) {
    std::ostringstream os;
    os << name_of(kind) << " at index " << index << " (value " << value << ")";
    return os.str();
  }

  ScoreErrorKind kind_;
  std::size_t index_;
  double value_;
};

// ---------------------------------------------------------------------------
// Element-wise maps

namespace detail {

inline double taylor_series(double x, int order) {
  // Horner form of sum_{i=0}^{n} x^i / i!
  double acc = 1.0;
  for (int i = order; i >= 1; --i) acc = 1.0 + acc * x / static_cast<double>(i);
  return acc;
}

inline double taylor_series_derivative(double x, int order) {
  return order <= 1 ? 1.0 : taylor_series(x, order - 1);
}

inline void check_input(const ScoreFunctionKind& kind, double x, std::size_t index) {
  if (!std::isfinite(x)) throw ScoreError(ScoreErrorKind::NonFiniteInput, index, x);
  if (kind.tag == ScoreTag::SirenMax && std::abs(1.0 - std::sin(x)) < kPoleGuard)
    throw ScoreError(ScoreErrorKind::PoleProximity, index, x);
}

// f(x) without the soft-margin shift.
inline double base_value(const ScoreFunctionKind& kind, double x) {
  switch (kind.tag) {
    case ScoreTag::Softmax:
    case ScoreTag::SMSoftmax: return std::exp(x);
    case ScoreTag::TaylorSoftmax:
    case ScoreTag::SMTaylorSoftmax: return taylor_series(x, kind.taylor_order);
    case ScoreTag::SinMaxConstant: return 1.0 + std::sin(x);
    case ScoreTag::SinMax: return std::sin(x);
    case ScoreTag::CosMax: return std::cos(x);
    case ScoreTag::Sin2Max: {
      const double s = std::sin(x);
      return s * s;
    }
    case ScoreTag::Sin2MaxShifted: {
      const double s = std::sin(x + kind.phase);
      return s * s;
    }
    case ScoreTag::SinSoftmax: return std::exp(std::sin(x));
    case ScoreTag::SirenMax: {
      const double s = std::sin(x);
      return (1.0 + s) / (2.0 - 2.0 * s);
    }
  }
  return 0.0;
}

inline double base_derivative(const ScoreFunctionKind& kind, double x) {
  switch (kind.tag) {
    case ScoreTag::Softmax:
    case ScoreTag::SMSoftmax: return std::exp(x);
    case ScoreTag::TaylorSoftmax:
    case ScoreTag::SMTaylorSoftmax: return taylor_series_derivative(x, kind.taylor_order);
    case ScoreTag::SinMaxConstant:
    case ScoreTag::SinMax: return std::cos(x);
    case ScoreTag::CosMax: return -std::sin(x);
    case ScoreTag::Sin2Max: return std::sin(2.0 * x);
    case ScoreTag::Sin2MaxShifted: return std::sin(2.0 * (x + kind.phase));
    case ScoreTag::SinSoftmax: return std::exp(std::sin(x)) * std::cos(x);
    case ScoreTag::SirenMax: {
      // d/dx (1+s)/(2-2s) = cos x / (1-s)^2
      const double one_minus = 1.0 - std::sin(x);
      return std::cos(x) / (one_minus * one_minus);
    }
  }
  return 0.0;
}

inline double shift_of(const ScoreFunctionKind& kind) {
  return kind.uses_margin() ? kind.margin : 0.0;
}

}  // namespace detail

/// f(x) as used in the numerator of S_j. For the soft-margin kinds this is
/// the margin-shifted map f(x - m).
inline double intermediate(const ScoreFunctionKind& kind, double x) {
  detail::check_input(kind, x, 0);
  return detail::base_value(kind, x - detail::shift_of(kind));
}

inline double intermediate_derivative(const ScoreFunctionKind& kind, double x) {
  detail::check_input(kind, x, 0);
  return detail::base_derivative(kind, x - detail::shift_of(kind));
}

// ---------------------------------------------------------------------------
// Row evaluation

struct ScoreEval {
  std::vector<double> intermediates;
  double sum = 0.0;
  std::vector<double> scores;
  std::size_t dim = 0;
};

namespace detail {

// Per-row quantities shared by scores() and jacobian().
struct RowTerms {
  std::vector<double> numer;    // f(x_j - m)
  std::vector<double> base;     // f(x_j)
  std::vector<double> off_sum;  // M_j = sum_{i != j} f(x_i)
  double total = 0.0;           // sum_i f(x_i)
};

inline RowTerms row_terms(const ScoreFunctionKind& kind, std::span<const double> x) {
  if (x.size() < 2) throw std::invalid_argument("score rows need dim >= 2");
  const std::size_t d = x.size();
  const bool shifted = kind.has_margin_shift();
  RowTerms t;
  t.base.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    check_input(kind, x[i], i);
    t.base[i] = base_value(kind, x[i]);
  }
  for (double v : t.base) t.total += v;
  if (shifted) {
    t.numer.resize(d);
    for (std::size_t i = 0; i < d; ++i) t.numer[i] = base_value(kind, x[i] - kind.margin);
  } else {
    t.numer = t.base;
  }
  t.off_sum.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      if (i != j) m += t.base[i];
    t.off_sum[j] = m;
  }
  if (!shifted) {
    if (std::abs(t.total) < kDenominatorGuard)
      throw ScoreError(ScoreErrorKind::DenominatorNearZero, 0, t.total);
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      const double den = t.numer[j] + t.off_sum[j];
      if (std::abs(den) < kDenominatorGuard)
        throw ScoreError(ScoreErrorKind::DenominatorNearZero, j, den);
    }
  }
  return t;
}

}  // namespace detail

/// Normalized scores for one input row.
///
/// Throws ScoreError on non-finite input, Siren-max pole proximity, or a
/// denominator below kDenominatorGuard.
inline ScoreEval scores(const ScoreFunctionKind& kind, std::span<const double> x) {
  auto t = detail::row_terms(kind, x);
  ScoreEval out;
  out.dim = x.size();
  out.sum = t.total;
  out.scores.resize(out.dim);
  if (!kind.has_margin_shift()) {
    for (std::size_t j = 0; j < out.dim; ++j) out.scores[j] = t.base[j] / t.total;
  } else {
    for (std::size_t j = 0; j < out.dim; ++j)
      out.scores[j] = t.numer[j] / (t.numer[j] + t.off_sum[j]);
  }
  out.intermediates = std::move(t.numer);
  return out;
}

/// entries(j, k) = dS_j / dx_k.
///
/// Diagonal: M_j f'(x_j) / (M_j + f(x_j))^2. Off-diagonal: -f(x_j) f'(x_k) / D_j^2.
inline Matrix jacobian(const ScoreFunctionKind& kind, std::span<const double> x) {
  const auto t = detail::row_terms(kind, x);
  const std::size_t d = x.size();
  const double shift = detail::shift_of(kind);
  std::vector<double> base_prime(d), numer_prime(d);
  for (std::size_t i = 0; i < d; ++i) {
    base_prime[i] = detail::base_derivative(kind, x[i]);
    numer_prime[i] = shift != 0.0 ? detail::base_derivative(kind, x[i] - shift) : base_prime[i];
  }
  Matrix jac(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    const double den = t.numer[j] + t.off_sum[j];
    const double den2 = den * den;
    for (std::size_t k = 0; k < d; ++k) {
      jac(j, k) = (j == k) ? t.off_sum[j] * numer_prime[j] / den2
                           : -t.numer[j] * base_prime[k] / den2;
    }
  }
  return jac;
}

enum class FdStencil {
  Central2,  // (S(x+h) - S(x-h)) / 2h
  Central4,  // (-S(x+2h) + 8S(x+h) - 8S(x-h) + S(x-2h)) / 12h
};

/// Central-difference Jacobian, column k built from S(x +/- h e_k).
///
/// Central2 is the plain two-point difference. Central4 adds the +/- 2h
/// points and stays accurate near Sin-max denominators and Siren-max poles,
/// where the two-point truncation error exceeds 1e-6.
inline Matrix finite_diff_jacobian(const ScoreFunctionKind& kind, std::span<const double> x,
                                   double h, FdStencil stencil = FdStencil::Central2) {
  const std::size_t d = x.size();
  // Validates x itself so guard errors at the base point are reported.
  (void)detail::row_terms(kind, x);
  Matrix jac(d, d);
  std::vector<double> probe(x.begin(), x.end());
  auto eval_at = [&](std::size_t k, double offset) {
    probe[k] = x[k] + offset;
    auto s = scores(kind, probe).scores;
    probe[k] = x[k];
    return s;
  };
  for (std::size_t k = 0; k < d; ++k) {
    const auto plus = eval_at(k, h);
    const auto minus = eval_at(k, -h);
    if (stencil == FdStencil::Central2) {
      for (std::size_t j = 0; j < d; ++j) jac(j, k) = (plus[j] - minus[j]) / (2.0 * h);
    } else {
      const auto plus2 = eval_at(k, 2.0 * h);
      const auto minus2 = eval_at(k, -2.0 * h);
      for (std::size_t j = 0; j < d; ++j)
        jac(j, k) = (8.0 * (plus[j] - minus[j]) - (plus2[j] - minus2[j])) / (12.0 * h);
    }
  }
  return jac;
}

/// Vector-Jacobian product: returns dL/dx given dL/dS for one row.
inline std::vector<double> scores_vjp(const ScoreFunctionKind& kind, std::span<const double> x,
                                      std::span<const double> upstream) {
  const std::size_t d = x.size();
  std::vector<double> grad(d, 0.0);
  if (kind.has_margin_shift()) {
    const auto jac = jacobian(kind, x);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) grad[k] += upstream[j] * jac(j, k);
    return grad;
  }
  // J = (diag(f') - S f'^T) / sum, so J^T g = f' (g - <g, S>) / sum.
  const auto eval = scores(kind, x);
  double dot = 0.0;
  for (std::size_t j = 0; j < d; ++j) dot += upstream[j] * eval.scores[j];
  for (std::size_t k = 0; k < d; ++k)
    grad[k] = detail::base_derivative(kind, x[k]) * (upstream[k] - dot) / eval.sum;
  return grad;
}

/// Diagonal gradient with the off-sum held fixed: M f'(x) / (M + f(x))^2.
///
/// This is the single-element view used for gradient curves and extremum
/// sweeps. Guard violations throw ScoreError.
inline double diagonal_gradient(const ScoreFunctionKind& kind, double x, double off_sum) {
  const double f = intermediate(kind, x);
  const double fp = intermediate_derivative(kind, x);
  const double den = off_sum + f;
  if (std::abs(den) < kDenominatorGuard)
    throw ScoreError(ScoreErrorKind::DenominatorNearZero, 0, den);
  return off_sum * fp / (den * den);
}

}  // namespace pattn
