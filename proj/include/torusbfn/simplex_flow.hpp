#pragma once

// Discrete Bayesian flow for the atom-type modality. Beliefs are N x K
// row-stochastic matrices; every product and normalization runs in the log
// domain with per-row max subtraction.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "torusbfn/error.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/schedule.hpp"

namespace torusbfn {

struct OneHot {
  int index = 0;
  friend bool operator==(const OneHot&, const OneHot&) = default;
};

struct SimplexBelief {
  Eigen::MatrixXd theta;  // N x K, rows sum to one

  static SimplexBelief uniform(Eigen::Index slots, Eigen::Index classes) {
    return {Eigen::MatrixXd::Constant(slots, classes, 1.0 / static_cast<double>(classes))};
  }
};

namespace detail {

inline void check_classes(const std::vector<OneHot>& a, Eigen::Index classes) {
  for (const auto& oh : a) {
    if (oh.index < 0 || oh.index >= classes) throw DomainError("class index out of range");
  }
}

// Row-wise softmax of a log-weight matrix.
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double hi = logits.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp(logits(r, c) - hi);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return out;
}

inline double logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double hi = v.maxCoeff();
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  double s = 0.0;
  for (Eigen::Index c = 0; c < v.size(); ++c) s += std::exp(v[c] - hi);
  return hi + std::log(s);
}

}  // namespace detail

/// Sender sample y ~ N(alpha (K e_A - 1), alpha K I), one row per slot.
inline Eigen::MatrixXd sender_sample(const std::vector<OneHot>& a, double alpha, Eigen::Index classes, Rng& rng) {
  detail::check_classes(a, classes);
  detail::require_nonnegative(alpha, "sender_sample alpha");
  const auto k = static_cast<double>(classes);
  const double sd = std::sqrt(alpha * k);
  Eigen::MatrixXd y(static_cast<Eigen::Index>(a.size()), classes);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    for (Eigen::Index c = 0; c < classes; ++c) {
      const double mean = alpha * ((c == a[r].index ? k : 0.0) - 1.0);
      y(r, c) = mean + sd * standard_normal(rng);
    }
  }
  return y;
}

/// theta_i proportional to exp(y) * theta_{i-1}, row-normalized.
inline SimplexBelief simplex_update(const SimplexBelief& prev, const Eigen::MatrixXd& y) {
  if (y.rows() != prev.theta.rows() || y.cols() != prev.theta.cols()) {
    throw ShapeError("simplex_update: shape mismatch");
  }
  return {detail::softmax_rows(prev.theta.array().log().matrix() + y)};
}

/// Draw of the atom-type flow state at time t with beta(t) = beta1 t^2.
inline SimplexBelief simplex_flow_sample(const std::vector<OneHot>& a, double t, const DiscreteScheduleParams& params,
                                         Rng& rng) {
  params.validate();
  const auto k = static_cast<Eigen::Index>(params.classes);
  const double beta = discrete_beta(t, params);
  return simplex_update(SimplexBelief::uniform(static_cast<Eigen::Index>(a.size()), k),
                        sender_sample(a, beta, k, rng));
}

/// Single-draw estimate of n KL(sender || receiver) for the atom types, given
/// the sender draw y and the network's log class probabilities (rows of
/// log p_O; -inf entries are allowed).
inline double simplex_loss(const std::vector<OneHot>& a, const Eigen::MatrixXd& log_p_out, double alpha,
                           std::size_t steps, const Eigen::MatrixXd& y) {
  const Eigen::Index classes = log_p_out.cols();
  if (log_p_out.rows() != static_cast<Eigen::Index>(a.size()) || y.rows() != log_p_out.rows() ||
      y.cols() != classes) {
    throw ShapeError("simplex_loss: shape mismatch");
  }
  detail::check_classes(a, classes);
  const auto k = static_cast<double>(classes);
  const double inv_var2 = 1.0 / (2.0 * alpha * k);
  double total = 0.0;
  Eigen::RowVectorXd mix(classes);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    // log N(y_r | alpha (K e_j - 1), alpha K I) up to a constant shared by all j:
    // -|y_r - alpha (K e_j - 1)|^2 / (2 alpha K)
    const Eigen::RowVectorXd shifted = y.row(r).array() + alpha;
    const double base = shifted.squaredNorm();
    auto log_gauss = [&](Eigen::Index j) {
      const double sq = base - 2.0 * alpha * k * shifted[j] + alpha * alpha * k * k;
      return -sq * inv_var2;
    };
    for (Eigen::Index j = 0; j < classes; ++j) mix[j] = log_p_out(r, j) + log_gauss(j);
    total += log_gauss(a[r].index) - detail::logsumexp(mix);
  }
  return static_cast<double>(steps) * total;
}

/// simplex_loss with a fresh sender draw for step i.
inline double simplex_loss(const std::vector<OneHot>& a, const SimplexBelief& p_out, std::size_t i,
                           const DiscreteScheduleParams& params, Rng& rng) {
  const double alpha = discrete_alpha(i, params);
  const auto y = sender_sample(a, alpha, static_cast<Eigen::Index>(params.classes), rng);
  return simplex_loss(a, p_out.theta.array().log().matrix(), alpha, params.steps, y);
}

}  // namespace torusbfn
