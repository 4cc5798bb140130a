#pragma once

// Periodic Bayesian flow on the hyper-torus: the conjugate von Mises update,
// the grid-product posterior oracle, the iterated and resultant-vector ("fast")
// flow samplers, and the two-step non-additivity experiment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/parallel.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/special_fn.hpp"
#include "torusbfn/von_mises.hpp"

namespace torusbfn {

/// Per-dimension von Mises belief (mean direction, concentration).
struct TorusBelief {
  std::vector<Angle> mean;
  std::vector<double> concentration;

  std::size_t dims() const { return mean.size(); }

  /// Uninformative belief: concentration 0, mean 0 (the mean is irrelevant).
  static TorusBelief prior(std::size_t dims) {
    return {std::vector<Angle>(dims), std::vector<double>(dims, 0.0)};
  }

  /// Uninformative belief with the mean drawn uniformly, as in the sampling prior.
  static TorusBelief uniform_prior(std::size_t dims, Rng& rng) {
    TorusBelief b = prior(dims);
    for (auto& m : b.mean) m = Angle(kTwoPi * uniform01(rng) - kPi);
    return b;
  }
};

/// Observation y ~ vM(x, alpha) from the sender, one angle per dimension.
struct SenderDraw {
  std::vector<Angle> y;
  double alpha = 0.0;
};

struct BeliefComponent {
  double mean;
  double concentration;
};

/// Conjugate update of a single dimension. The resultant-vector angle of an
/// exactly cancelled pair is 0 (with concentration 0).
inline BeliefComponent update_component(double mean, double concentration, double y, double alpha) {
  const double ax = alpha * std::cos(y) + concentration * std::cos(mean);
  const double ay = alpha * std::sin(y) + concentration * std::sin(mean);
  const double m = (ax == 0.0 && ay == 0.0) ? 0.0 : std::atan2(ay, ax);
  const double sq = alpha * alpha + concentration * concentration +
                    2.0 * alpha * concentration * std::cos(y - mean);
  double c = std::sqrt(std::max(0.0, sq));
  // |alpha - c_prev| <= c_new <= alpha + c_prev holds exactly in real arithmetic
  c = std::clamp(c, std::abs(alpha - concentration), alpha + concentration);
  // A zero resultant leaves a uniform belief; its mean is canonically 0.
  if (c == 0.0) return {0.0, 0.0};
  return {wrap_value(m), c};
}

inline TorusBelief bayesian_update(const TorusBelief& prev, const SenderDraw& draw) {
  if (draw.y.size() != prev.dims() || prev.concentration.size() != prev.dims()) {
    throw ShapeError("bayesian_update: belief and draw dimensions differ");
  }
  detail::require_nonnegative(draw.alpha, "bayesian_update alpha");
  TorusBelief next = prev;
  for (std::size_t d = 0; d < prev.dims(); ++d) {
    const auto upd = update_component(prev.mean[d].value(), prev.concentration[d],
                                      draw.y[d].value(), draw.alpha);
    next.mean[d] = Angle(upd.mean);
    next.concentration[d] = upd.concentration;
  }
  return next;
}

/// Probability masses on a uniform midpoint grid over [-pi, pi).
struct GridDensity {
  std::vector<double> nodes;
  std::vector<double> mass;
};

inline GridDensity discretize(const VonMises& d, std::size_t grid_size) {
  GridDensity g;
  g.nodes.resize(grid_size);
  g.mass.resize(grid_size);
  const double h = kTwoPi / static_cast<double>(grid_size);
  for (std::size_t k = 0; k < grid_size; ++k) {
    g.nodes[k] = -kPi + (static_cast<double>(k) + 0.5) * h;
    g.mass[k] = std::exp(log_pdf(d, g.nodes[k])) * h;
  }
  return g;
}

inline double total_variation(const GridDensity& a, const GridDensity& b) {
  if (a.mass.size() != b.mass.size()) throw ShapeError("total_variation: grid sizes differ");
  double tv = 0.0;
  for (std::size_t k = 0; k < a.mass.size(); ++k) tv += std::abs(a.mass[k] - b.mass[k]);
  return 0.5 * tv;
}

/// Posterior over x by brute force: the normalized grid product of the sender
/// likelihood vM(y | x, alpha) and the prior belief vM(x | m, c), per dimension.
inline std::vector<GridDensity> posterior_oracle(const TorusBelief& prev, const SenderDraw& draw,
                                                 std::size_t grid_size) {
  if (grid_size < 1000) throw DomainError("posterior_oracle: grid_size must be at least 1000");
  if (draw.y.size() != prev.dims()) throw ShapeError("posterior_oracle: dimension mismatch");
  std::vector<GridDensity> out;
  out.reserve(prev.dims());
  const double h = kTwoPi / static_cast<double>(grid_size);
  for (std::size_t d = 0; d < prev.dims(); ++d) {
    GridDensity g;
    g.nodes.resize(grid_size);
    g.mass.resize(grid_size);
    std::vector<double> logw(grid_size);
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < grid_size; ++k) {
      const double x = -kPi + (static_cast<double>(k) + 0.5) * h;
      g.nodes[k] = x;
      logw[k] = draw.alpha * std::cos(draw.y[d].value() - x) +
                prev.concentration[d] * std::cos(x - prev.mean[d].value());
      hi = std::max(hi, logw[k]);
    }
    double total = 0.0;
    for (std::size_t k = 0; k < grid_size; ++k) {
      g.mass[k] = std::exp(logw[k] - hi);
      total += g.mass[k];
    }
    for (auto& m : g.mass) m /= total;
    out.push_back(std::move(g));
  }
  return out;
}

namespace detail {

inline void check_alphas(std::span<const double> alphas) {
  for (double a : alphas) {
    detail::require_finite(a, "flow alpha");
    if (a <= 0.0) throw DomainError("flow: every sender accuracy must be positive");
  }
}

// Resultant vector -> belief. The zero resultant maps to (0, 0).
template <class Real>
TorusBelief belief_from_resultants(const std::vector<Real>& sx, const std::vector<Real>& sy) {
  TorusBelief b = TorusBelief::prior(sx.size());
  for (std::size_t d = 0; d < sx.size(); ++d) {
    const double x = static_cast<double>(sx[d]);
    const double y = static_cast<double>(sy[d]);
    b.mean[d] = Angle((x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x));
    b.concentration[d] = std::hypot(x, y);
  }
  return b;
}

// Above this many steps the resultant is accumulated in long double.
inline constexpr std::size_t kExtendedPrecisionSteps = 10000;

template <class Real>
TorusBelief fast_flow_impl(std::span<const Angle> x, std::span<const double> alphas, Rng& rng) {
  const std::size_t dims = x.size();
  std::vector<double> cx(dims), sx(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    cx[d] = std::cos(x[d].value());
    sx[d] = std::sin(x[d].value());
  }
  std::vector<Real> rx(dims, Real(0)), ry(dims, Real(0));
  for (double a : alphas) {
    for (std::size_t d = 0; d < dims; ++d) {
      double cy, sy;
      sample_direction(cx[d], sx[d], a, rng, cy, sy);
      rx[d] += static_cast<Real>(a * cy);
      ry[d] += static_cast<Real>(a * sy);
    }
  }
  return belief_from_resultants(rx, ry);
}

}  // namespace detail

/// theta_i by folding i sequential sender draws through the Bayesian update,
/// starting from the concentration-0 prior. Kept as a reference path.
inline TorusBelief flow_sample_iterated(std::span<const Angle> x, std::span<const double> alphas,
                                        Rng& rng) {
  detail::check_alphas(alphas);
  TorusBelief belief = TorusBelief::prior(x.size());
  SenderDraw draw{std::vector<Angle>(x.size()), 0.0};
  for (double a : alphas) {
    draw.alpha = a;
    for (std::size_t d = 0; d < x.size(); ++d) draw.y[d] = sample(VonMises(x[d], a), rng);
    belief = bayesian_update(belief, draw);
  }
  return belief;
}

/// theta_i from the accuracy-weighted resultant of i independent sender draws,
/// with no intermediate beliefs. Consumes the rng exactly like the iterated path.
inline TorusBelief flow_sample_fast(std::span<const Angle> x, std::span<const double> alphas, Rng& rng) {
  detail::check_alphas(alphas);
  if (alphas.size() > detail::kExtendedPrecisionSteps) {
    return detail::fast_flow_impl<long double>(x, alphas, rng);
  }
  return detail::fast_flow_impl<double>(x, alphas, rng);
}

/// Iterated flow on given draws; draws[j][d] is the j-th observation of dimension d.
inline TorusBelief flow_from_draws_iterated(const std::vector<std::vector<Angle>>& draws,
                                            std::span<const double> alphas, std::size_t dims) {
  if (draws.size() != alphas.size()) throw ShapeError("flow_from_draws: draws/alphas length mismatch");
  TorusBelief belief = TorusBelief::prior(dims);
  for (std::size_t j = 0; j < draws.size(); ++j) {
    belief = bayesian_update(belief, SenderDraw{draws[j], alphas[j]});
  }
  return belief;
}

inline TorusBelief flow_from_draws_fast(const std::vector<std::vector<Angle>>& draws,
                                        std::span<const double> alphas, std::size_t dims) {
  if (draws.size() != alphas.size()) throw ShapeError("flow_from_draws: draws/alphas length mismatch");
  std::vector<long double> rx(dims, 0.0L), ry(dims, 0.0L);
  for (std::size_t j = 0; j < draws.size(); ++j) {
    if (draws[j].size() != dims) throw ShapeError("flow_from_draws: draw dimension mismatch");
    for (std::size_t d = 0; d < dims; ++d) {
      rx[d] += alphas[j] * std::cos(draws[j][d].value());
      ry[d] += alphas[j] * std::sin(draws[j][d].value());
    }
  }
  return detail::belief_from_resultants(rx, ry);
}

enum class FlowMode { kFast, kIterated };

inline FlowMode parse_flow_mode(const std::string& s) {
  if (s == "fast") return FlowMode::kFast;
  if (s == "iterated") return FlowMode::kIterated;
  throw DomainError("unknown flow mode '" + s + "' (expected fast or iterated)");
}

/// Beliefs after steps 0..n of one trajectory (index 0 is the prior).
inline std::vector<TorusBelief> flow_trajectory(std::span<const Angle> x, std::span<const double> alphas,
                                                FlowMode mode, Rng& rng) {
  detail::check_alphas(alphas);
  const std::size_t dims = x.size();
  std::vector<TorusBelief> out;
  out.reserve(alphas.size() + 1);
  out.push_back(TorusBelief::prior(dims));
  if (mode == FlowMode::kIterated) {
    SenderDraw draw{std::vector<Angle>(dims), 0.0};
    for (double a : alphas) {
      draw.alpha = a;
      for (std::size_t d = 0; d < dims; ++d) draw.y[d] = sample(VonMises(x[d], a), rng);
      out.push_back(bayesian_update(out.back(), draw));
    }
    return out;
  }
  std::vector<double> cx(dims), sx(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    cx[d] = std::cos(x[d].value());
    sx[d] = std::sin(x[d].value());
  }
  std::vector<long double> rx(dims, 0.0L), ry(dims, 0.0L);
  for (double a : alphas) {
    for (std::size_t d = 0; d < dims; ++d) {
      double cy, sy;
      sample_direction(cx[d], sx[d], a, rng, cy, sy);
      rx[d] += a * cy;
      ry[d] += a * sy;
    }
    out.push_back(detail::belief_from_resultants(rx, ry));
  }
  return out;
}

/// `count` independent flow samples; trajectory k uses the stream derived from
/// (seed, k), so results do not depend on the number of threads.
inline std::vector<TorusBelief> flow_sample_batch(std::span<const Angle> x, std::span<const double> alphas,
                                                  std::size_t count, std::uint64_t seed, FlowMode mode,
                                                  int threads = 1) {
  std::vector<TorusBelief> out(count);
  parallel_for(count, threads, [&](std::size_t k) {
    Rng rng = make_rng(seed, k);
    out[k] = mode == FlowMode::kFast ? flow_sample_fast(x, alphas, rng) : flow_sample_iterated(x, alphas, rng);
  });
  return out;
}

/// Two-step versus one-step accumulated concentration from the flat prior.
struct NonAdditivityReport {
  double x = 0.0;
  double alpha_a = 0.0;
  double alpha_b = 0.0;
  std::size_t trials = 0;
  double one_step = 0.0;
  double two_step_mean = 0.0;
  double two_step_variance = 0.0;
  std::vector<double> histogram_edges;
  std::vector<std::size_t> histogram_counts;

  nlohmann::json to_json() const {
    return {{"inputs", {{"x", x}, {"alpha_a", alpha_a}, {"alpha_b", alpha_b}, {"trials", trials}}},
            {"one_step_concentration", one_step},
            {"two_step",
             {{"mean", two_step_mean},
              {"variance", two_step_variance},
              {"histogram", {{"edges", histogram_edges}, {"counts", histogram_counts}}}}}};
  }
};

inline NonAdditivityReport demonstrate_nonadditivity(Angle x, double alpha_a, double alpha_b,
                                                     std::size_t trials, Rng& rng,
                                                     std::size_t bins = 32) {
  detail::require_finite(alpha_a, "demonstrate_nonadditivity alpha_a");
  detail::require_nonnegative(alpha_b, "demonstrate_nonadditivity alpha_b");
  if (alpha_a <= 0.0) throw DomainError("demonstrate_nonadditivity: alpha_a must be positive");
  if (trials < 2) throw DomainError("demonstrate_nonadditivity: need at least two trials");

  NonAdditivityReport rep;
  rep.x = x.value();
  rep.alpha_a = alpha_a;
  rep.alpha_b = alpha_b;
  rep.trials = trials;
  // From c = 0 a single update of accuracy a + b gives c'' = a + b for every y.
  rep.one_step = update_component(0.0, 0.0, x.value(), alpha_a + alpha_b).concentration;

  const double cx = std::cos(x.value());
  const double sx = std::sin(x.value());
  const double top = alpha_a + alpha_b;
  rep.histogram_edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) rep.histogram_edges[b] = top * static_cast<double>(b) / bins;
  rep.histogram_counts.assign(bins, 0);

  // Welford running moments
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    double ca, sa, cb, sb;
    sample_direction(cx, sx, alpha_a, rng, ca, sa);
    sample_direction(cx, sx, alpha_b, rng, cb, sb);
    const double c2 = std::hypot(alpha_a * ca + alpha_b * cb, alpha_a * sa + alpha_b * sb);
    const double delta = c2 - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (c2 - mean);
    auto bin = static_cast<std::size_t>(c2 / top * static_cast<double>(bins));
    rep.histogram_counts[std::min(bin, bins - 1)]++;
  }
  rep.two_step_mean = mean;
  rep.two_step_variance = m2 / static_cast<double>(trials - 1);
  return rep;
}

}  // namespace torusbfn

namespace torusbfn {

/// Weight n alpha A(alpha) of the n-step torus loss at sender accuracy alpha.
inline double torus_loss_weight(double alpha, std::size_t steps) {
  detail::require_nonnegative(alpha, "torus_loss alpha");
  return static_cast<double>(steps) * alpha * bessel_ratio_i1_i0(alpha);
}

/// n alpha A(alpha) sum_d (1 - cos(x_d - x_hat_d)), i.e. n KL(vM(x, alpha) || vM(x_hat, alpha)).
inline double torus_loss(std::span<const Angle> x, std::span<const Angle> predicted, double alpha,
                         std::size_t steps) {
  if (x.size() != predicted.size()) throw ShapeError("torus_loss: dimension mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) s += 1.0 - std::cos(x[d].value() - predicted[d].value());
  return torus_loss_weight(alpha, steps) * s;
}

}  // namespace torusbfn
