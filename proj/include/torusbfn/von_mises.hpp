#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "torusbfn/error.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/special_fn.hpp"

namespace torusbfn {

/// von Mises distribution vM(mean, concentration). Concentration 0 is the
/// uniform distribution on the circle.
class VonMises {
 public:
  VonMises(Angle mean, double concentration) : mean_(mean), concentration_(concentration) {
    detail::require_nonnegative(concentration, "VonMises concentration");
  }
  VonMises(double mean, double concentration) : VonMises(Angle(mean), concentration) {}

  Angle mean() const { return mean_; }
  double concentration() const { return concentration_; }

 private:
  Angle mean_;
  double concentration_;
};

inline double log_pdf(const VonMises& d, double x) {
  detail::require_finite(x, "von Mises log_pdf");
  const double c = d.concentration();
  return c * std::cos(x - d.mean().value()) - kLogTwoPi - bessel_i0_log(c);
}

inline double log_pdf(const VonMises& d, Angle x) { return log_pdf(d, x.value()); }

/// Differential entropy of vM(., c); independent of the mean.
inline double entropy(double concentration) {
  detail::require_nonnegative(concentration, "von Mises entropy");
  const double c = concentration;
  return -c * bessel_ratio_i1_i0(c) + kLogTwoPi + bessel_i0_log(c);
}

/// KL(p || q) in the resultant-vector form with log-Bessel differences.
inline double kl_divergence(const VonMises& p, const VonMises& q) {
  const double c1 = p.concentration();
  const double c2 = q.concentration();
  const double dm = p.mean().value() - q.mean().value();
  return -(bessel_i0_log(c1) - bessel_i0_log(c2)) + bessel_ratio_i1_i0(c1) * (c1 - c2 * std::cos(dm));
}

namespace detail {

// Offset of a von Mises draw from its mean, as (cos, sin) of the offset angle.
struct UnitOffset {
  double cos_offset;
  double sin_offset;
};

// Best & Fisher (1979) wrapped-Cauchy envelope rejection sampler. Consumes two
// uniforms per proposal and one for the sign. Concentration 0 takes the exact
// uniform branch.
inline UnitOffset sample_offset(double concentration, Rng& rng) {
  const double kappa = concentration;
  const double s = 0.5 / kappa;
  if (kappa == 0.0 || !std::isfinite(s)) {
    const double theta = kTwoPi * uniform01(rng) - kPi;
    return {std::cos(theta), std::sin(theta)};
  }
  const double r = s + std::hypot(1.0, s);
  double w = 0.0;
  for (;;) {
    const double z = std::cos(kPi * uniform01(rng));
    w = (1.0 + r * z) / (r + z);
    const double y = kappa * (r - w);
    const double v = uniform01(rng);
    if (y * (2.0 - y) - v >= 0.0) break;
    if (v > 0.0 && std::log(y / v) + 1.0 - y >= 0.0) break;
  }
  w = std::clamp(w, -1.0, 1.0);
  const double sin_abs = std::sqrt(std::max(0.0, 1.0 - w * w));
  return {w, uniform01(rng) < 0.5 ? -sin_abs : sin_abs};
}

}  // namespace detail

/// One draw as an angle in [-pi, pi).
inline Angle sample(const VonMises& d, Rng& rng) {
  if (d.concentration() == 0.0) {
    return Angle(kTwoPi * uniform01(rng) - kPi);
  }
  const auto off = detail::sample_offset(d.concentration(), rng);
  const double theta = std::atan2(off.sin_offset, off.cos_offset);
  return Angle(d.mean().value() + theta);
}

/// Unit vector [cos y, sin y] of one draw y ~ vM(mean, c), given the
/// precomputed (cos mean, sin mean). Consumes the rng exactly like sample().
inline void sample_direction(double cos_mean, double sin_mean, double concentration, Rng& rng,
                             double& cos_y, double& sin_y) {
  if (concentration == 0.0) {
    const double theta = kTwoPi * uniform01(rng) - kPi;
    cos_y = std::cos(theta);
    sin_y = std::sin(theta);
    return;
  }
  const auto off = detail::sample_offset(concentration, rng);
  cos_y = cos_mean * off.cos_offset - sin_mean * off.sin_offset;
  sin_y = sin_mean * off.cos_offset + cos_mean * off.sin_offset;
}

}  // namespace torusbfn
