#pragma once

// Gaussian Bayesian flow for the lattice vector.

#include <Eigen/Dense>
#include <cmath>

#include "torusbfn/error.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/schedule.hpp"

namespace torusbfn {

/// Isotropic Gaussian belief N(mean, 1/precision I). The prior is (0, 1).
struct GaussBelief {
  Eigen::VectorXd mean;
  double precision = 1.0;

  static GaussBelief prior(Eigen::Index dims) { return {Eigen::VectorXd::Zero(dims), 1.0}; }
};

/// Draw of the lattice flow state at time t: mean ~ N(gamma L, gamma (1 - gamma) I),
/// precision = 1 / (1 - gamma).
inline GaussBelief gauss_flow_sample(const Eigen::VectorXd& lattice, double t, const GaussianScheduleParams& params,
                                     Rng& rng) {
  const double gamma = gaussian_gamma(t, params);
  const double sd = std::sqrt(gamma * (1.0 - gamma));
  GaussBelief b;
  b.mean.resize(lattice.size());
  for (Eigen::Index k = 0; k < lattice.size(); ++k) b.mean[k] = gamma * lattice[k] + sd * standard_normal(rng);
  b.precision = 1.0 / (1.0 - gamma);
  return b;
}

/// Precision-weighted posterior after observing y with accuracy alpha.
inline GaussBelief gauss_update(const GaussBelief& prev, const Eigen::VectorXd& y, double alpha) {
  if (y.size() != prev.mean.size()) throw ShapeError("gauss_update: dimension mismatch");
  detail::require_nonnegative(alpha, "gauss_update alpha");
  const double rho = prev.precision + alpha;
  return {(prev.precision * prev.mean + alpha * y) / rho, rho};
}

/// n-step lattice loss at step i: (n/2)(1 - sigma1^(2/n)) |L - L_hat|^2 / sigma1^(2i/n).
inline double gauss_loss_weight(std::size_t i, const GaussianScheduleParams& params) {
  return 0.5 * static_cast<double>(params.steps) * gaussian_alpha(i, params);
}

inline double gauss_loss(const Eigen::VectorXd& lattice, const Eigen::VectorXd& predicted, std::size_t i,
                         const GaussianScheduleParams& params) {
  if (lattice.size() != predicted.size()) throw ShapeError("gauss_loss: dimension mismatch");
  return gauss_loss_weight(i, params) * (lattice - predicted).squaredNorm();
}

}  // namespace torusbfn
