#pragma once

// Modified Bessel functions of order 0 and 1 in log/ratio form, and the
// angle conventions used throughout the library. Every angle lives in the
// half-open interval [-pi, pi); fractional coordinates in [0, 1) are only
// converted at the data boundary.

#include <cmath>
#include <numbers>

#include "torusbfn/error.hpp"

namespace torusbfn {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// Maps any finite real onto [-pi, pi), congruent modulo 2*pi.
inline double wrap_value(double x) {
  detail::require_finite(x, "wrap");
  double r = std::fmod(x + kPi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  // fmod can land exactly on 2*pi after the correction above
  if (r >= kTwoPi) r = 0.0;
  return r - kPi;
}

/// An angle in radians, always held in [-pi, pi).
class Angle {
 public:
  constexpr Angle() = default;
  explicit Angle(double radians) : value_(wrap_value(radians)) {}

  double value() const { return value_; }
  explicit operator double() const { return value_; }

  friend bool operator==(const Angle&, const Angle&) = default;

 private:
  double value_ = 0.0;
};

inline Angle wrap(double x) { return Angle(x); }

/// Smallest absolute difference between two angles on the circle, in [0, pi].
inline double circular_distance(double a, double b) {
  return std::abs(wrap_value(a - b));
}

inline Angle frac_to_angle(double f) {
  detail::require_finite(f, "frac_to_angle");
  if (f < 0.0 || f >= 1.0) {
    throw DomainError("frac_to_angle: fractional coordinate must lie in [0, 1)");
  }
  return Angle(kTwoPi * f - kPi);
}

inline double angle_to_frac(Angle a) {
  double f = (a.value() + kPi) / kTwoPi;
  return f >= 1.0 ? 0.0 : f;
}

namespace detail {

inline constexpr double kBesselSwitch = 20.0;
inline constexpr double kSeriesEps = 1e-17;

// sum_k (x^2/4)^k / (k!)^2
inline double i0_series(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 500; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < kSeriesEps * sum) break;
  }
  return sum;
}

// sum_k (x^2/4)^k / (k! (k+1)!), so that I1(x) = (x/2) * i1_series(x)
inline double i1_series_reduced(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 500; ++k) {
    term *= q / (static_cast<double>(k) * (k + 1));
    sum += term;
    if (term < kSeriesEps * sum) break;
  }
  return sum;
}

// Hankel asymptotic series: I_nu(x) ~ e^x / sqrt(2 pi x) * S_nu(x).
inline double bessel_asymptotic_factor(int order, double x) {
  const double mu = 4.0 * order * order;
  double term = 1.0;
  double sum = 1.0;
  double prev_abs = 1.0;
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (8.0 * k * x);
    const double a = std::abs(term);
    if (a > prev_abs) break;  // series started to diverge
    sum += term;
    if (a < kSeriesEps * std::abs(sum)) break;
    prev_abs = a;
  }
  return sum;
}

}  // namespace detail

/// Natural log of I0(x) for x >= 0. Accurate to ~1e-15 relative over the
/// whole range; never forms I0 itself above the series/asymptotic split.
inline double bessel_i0_log(double x) {
  detail::require_nonnegative(x, "bessel_i0_log");
  if (x <= detail::kBesselSwitch) return std::log(detail::i0_series(x));
  return x - 0.5 * std::log(kTwoPi * x) + std::log(detail::bessel_asymptotic_factor(0, x));
}

/// I1(x) / I0(x) for x >= 0, in [0, 1).
inline double bessel_ratio_i1_i0(double x) {
  detail::require_nonnegative(x, "bessel_ratio_i1_i0");
  if (x <= detail::kBesselSwitch) {
    return 0.5 * x * detail::i1_series_reduced(x) / detail::i0_series(x);
  }
  return detail::bessel_asymptotic_factor(1, x) / detail::bessel_asymptotic_factor(0, x);
}

struct LogBesselPair {
  double log_i0 = 0.0;
  double ratio_i1_i0 = 0.0;
};

inline LogBesselPair log_bessel_pair(double x) {
  return {bessel_i0_log(x), bessel_ratio_i1_i0(x)};
}

}  // namespace torusbfn
