#pragma once

// Accuracy schedules for the three modalities. The von Mises schedule is built
// numerically: receiver concentrations c(t_i) whose entropy falls linearly in
// t_i, then sender accuracies alpha_i that move the expected receiver
// concentration onto those targets step by step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/quadrature.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/special_fn.hpp"
#include "torusbfn/von_mises.hpp"

namespace torusbfn {

struct AccuracySchedule {
  std::size_t steps = 0;
  std::vector<double> alphas;     // sender accuracies alpha_1..alpha_n
  std::vector<double> c_targets;  // receiver concentrations c(t_1)..c(t_n)
  double c_final = 0.0;
  double tol = 0.0;

  double time(std::size_t i) const { return static_cast<double>(i) / static_cast<double>(steps); }
};

struct VmScheduleOptions {
  double tol = 1e-8;                   // entropy residual bound for the targets
  std::size_t particles = 8192;        // flow-state population for the expectation
  std::size_t quadrature_points = 64;  // Gauss-Legendre nodes over the sender draw
  std::uint64_t seed = 0x7a5c4e11d0b5f00dULL;
  int max_iterations = 200;
};

/// Entropy of the receiver belief at t_i = i/n under the linear-entropy rule.
inline double linear_entropy_target(std::size_t i, std::size_t n, double c_final) {
  const double t = static_cast<double>(i) / static_cast<double>(n);
  return (1.0 - t) * entropy(0.0) + t * entropy(c_final);
}

namespace detail {

inline double bisection_width(double c_final) { return 1e-10 * c_final; }

// Concentration in [0, c_final] with the given entropy (entropy is decreasing).
inline double concentration_for_entropy(double target, double c_final, int max_iterations) {
  double lo = 0.0;
  double hi = c_final;
  for (int it = 0; it < max_iterations && hi - lo > bisection_width(c_final); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (entropy(mid) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// E |R + alpha * u|, R over the particle population and u ~ vM(0, alpha) by
// self-normalized Gauss-Legendre quadrature restricted to where the density
// is non-negligible.
class ResultantExpectation {
 public:
  ResultantExpectation(std::size_t particles, std::size_t quadrature_points)
      : rx_(particles, 0.0), ry_(particles, 0.0), rule_(gauss_legendre(quadrature_points)) {}

  double operator()(double alpha) const {
    const std::size_t q = rule_.nodes.size();
    if (alpha == 0.0) {
      double s = 0.0;
      for (std::size_t p = 0; p < rx_.size(); ++p) s += std::hypot(rx_[p], ry_[p]);
      return s / static_cast<double>(rx_.size());
    }
    // vM(0, alpha) mass beyond 12/sqrt(alpha) is below exp(-70)
    const double half = std::min(kPi, 12.0 / std::sqrt(alpha));
    const QuadratureRule r = rescale(rule_, -half, half);
    std::vector<double> ux(q), uy(q), w(q);
    double wsum = 0.0;
    for (std::size_t k = 0; k < q; ++k) {
      ux[k] = alpha * std::cos(r.nodes[k]);
      uy[k] = alpha * std::sin(r.nodes[k]);
      w[k] = r.weights[k] * std::exp(alpha * (std::cos(r.nodes[k]) - 1.0));
      wsum += w[k];
    }
    for (auto& v : w) v /= wsum;
    double total = 0.0;
    for (std::size_t p = 0; p < rx_.size(); ++p) {
      const double px = rx_[p];
      const double py = ry_[p];
      double acc = 0.0;
      for (std::size_t k = 0; k < q; ++k) {
        const double ax = px + ux[k];
        const double ay = py + uy[k];
        acc += w[k] * std::sqrt(ax * ax + ay * ay);
      }
      total += acc;
    }
    return total / static_cast<double>(rx_.size());
  }

  // Folds one sender draw of accuracy alpha into every particle. The draws are
  // stratified: particle p receives the inverse-CDF value at the midpoint of a
  // randomly assigned stratum, so each step's offsets match vM(0, alpha) exactly
  // in their empirical quantiles.
  void advance(double alpha, Rng& rng) {
    const std::size_t count = rx_.size();
    std::vector<std::size_t> stratum(count);
    for (std::size_t p = 0; p < count; ++p) stratum[p] = p;
    std::shuffle(stratum.begin(), stratum.end(), rng);

    constexpr std::size_t kGrid = 8192;
    const double half = alpha > 0.0 ? std::min(kPi, 12.0 / std::sqrt(alpha)) : kPi;
    const double h = 2.0 * half / static_cast<double>(kGrid);
    std::vector<double> cdf(kGrid + 1, 0.0);
    double prev = std::exp(alpha * (std::cos(-half) - 1.0));
    for (std::size_t k = 1; k <= kGrid; ++k) {
      const double cur = std::exp(alpha * (std::cos(-half + h * static_cast<double>(k)) - 1.0));
      cdf[k] = cdf[k - 1] + 0.5 * h * (prev + cur);
      prev = cur;
    }
    const double total = cdf[kGrid];
    for (std::size_t p = 0; p < count; ++p) {
      const double u = (static_cast<double>(stratum[p]) + 0.5) / static_cast<double>(count) * total;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const std::size_t k = std::min<std::size_t>(kGrid, std::max<std::ptrdiff_t>(1, it - cdf.begin()));
      const double span = cdf[k] - cdf[k - 1];
      const double frac = span > 0.0 ? (u - cdf[k - 1]) / span : 0.5;
      const double y = -half + h * (static_cast<double>(k - 1) + frac);
      rx_[p] += alpha * std::cos(y);
      ry_[p] += alpha * std::sin(y);
    }

    // The resultant's mean and per-axis variance are known exactly:
    // E[cos y] = A(alpha), Var[cos y] = 1 - A/alpha - A^2, Var[sin y] = A/alpha.
    if (alpha > 0.0) {
      const double a = bessel_ratio_i1_i0(alpha);
      mean_x_ += alpha * a;
      var_x_ += alpha * alpha * std::max(0.0, 1.0 - a / alpha - a * a);
      var_y_ += alpha * a;
    }
    match_moments();
  }

 private:
  // Affine per-axis correction so the population's mean and variance equal
  // the exact moments of the resultant.
  void match_moments() {
    const auto count = static_cast<double>(rx_.size());
    if (rx_.size() < 2) return;
    double mx = 0.0, my = 0.0;
    for (std::size_t p = 0; p < rx_.size(); ++p) {
      mx += rx_[p];
      my += ry_[p];
    }
    mx /= count;
    my /= count;
    double sx = 0.0, sy = 0.0;
    for (std::size_t p = 0; p < rx_.size(); ++p) {
      sx += (rx_[p] - mx) * (rx_[p] - mx);
      sy += (ry_[p] - my) * (ry_[p] - my);
    }
    sx /= count;
    sy /= count;
    const double fx = sx > 0.0 ? std::sqrt(var_x_ / sx) : 1.0;
    const double fy = sy > 0.0 ? std::sqrt(var_y_ / sy) : 1.0;
    for (std::size_t p = 0; p < rx_.size(); ++p) {
      rx_[p] = mean_x_ + (rx_[p] - mx) * fx;
      ry_[p] = (ry_[p] - my) * fy;
    }
  }

  std::vector<double> rx_;
  std::vector<double> ry_;
  QuadratureRule rule_;
  double mean_x_ = 0.0;
  double var_x_ = 0.0;
  double var_y_ = 0.0;
};

}  // namespace detail

/// Linear-entropy von Mises schedule for (c_final, n).
///
/// Stage 1 bisects for each target concentration c(t_i). Stage 2 bisects, for
/// i = 1..n in order, for the sender accuracy alpha_i whose expected receiver
/// concentration E[c_i] equals c(t_i). The expectation is taken over the
/// sender draw and over a fixed-seed population of flow states theta_{i-1}
/// simulated with the already-solved alpha_1..alpha_{i-1}, anchored at x = 0.
inline AccuracySchedule solve_vm_schedule(double c_final, std::size_t n, const VmScheduleOptions& opt) {
  detail::require_finite(c_final, "solve_vm_schedule c_final");
  if (c_final <= 0.0) throw DomainError("solve_vm_schedule: c_final must be positive");
  if (n < 1) throw DomainError("solve_vm_schedule: need at least one step");
  if (!(opt.tol > 0.0)) throw DomainError("solve_vm_schedule: tol must be positive");
  if (opt.particles < 1 || opt.quadrature_points < 2) throw DomainError("solve_vm_schedule: bad solver sizes");

  AccuracySchedule s;
  s.steps = n;
  s.c_final = c_final;
  s.tol = opt.tol;
  s.c_targets.resize(n);
  s.alphas.resize(n);

  for (std::size_t i = 1; i <= n; ++i) {
    const double h = linear_entropy_target(i, n, c_final);
    const double c = i == n ? c_final : detail::concentration_for_entropy(h, c_final, opt.max_iterations);
    if (std::abs(entropy(c) - h) > opt.tol) {
      std::ostringstream msg;
      msg << "solve_vm_schedule: entropy residual " << std::abs(entropy(c) - h) << " at step " << i
          << " exceeds tol " << opt.tol;
      throw SolverError(msg.str());
    }
    if (i > 1 && !(c > s.c_targets[i - 2])) {
      throw SolverError("solve_vm_schedule: target concentrations are not increasing at step " +
                        std::to_string(i));
    }
    s.c_targets[i - 1] = c;
  }

  detail::ResultantExpectation expect(opt.particles, opt.quadrature_points);
  Rng rng(opt.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double target = s.c_targets[i];
    if (i == 0) {
      // From c = 0 one update yields c = alpha for every draw.
      s.alphas[0] = target;
      if (n > 1) expect.advance(target, rng);
      continue;
    }
    double lo = 0.0;
    double hi = c_final;
    double g_lo = expect(lo);
    double g_hi = expect(hi);
    if (!(g_lo <= target && target <= g_hi)) {
      std::ostringstream msg;
      msg << "solve_vm_schedule: cannot bracket alpha at step " << (i + 1) << ": E[c] spans [" << g_lo
          << ", " << g_hi << "] over [0, " << c_final << "], target " << target;
      throw SolverError(msg.str());
    }
    double alpha = hi;
    if (target < g_hi) {
      for (int it = 0; it < opt.max_iterations && hi - lo > detail::bisection_width(c_final); ++it) {
        const double mid = 0.5 * (lo + hi);
        const double g = expect(mid);
        if (g < g_lo || g > g_hi) {
          std::ostringstream msg;
          msg << "solve_vm_schedule: expected concentration is not monotone in alpha at step " << (i + 1)
              << " (alpha " << mid << ")";
          throw SolverError(msg.str());
        }
        if (g < target) {
          lo = mid;
          g_lo = g;
        } else {
          hi = mid;
          g_hi = g;
        }
      }
      alpha = 0.5 * (lo + hi);
    }
    if (!(alpha > 0.0)) {
      throw SolverError("solve_vm_schedule: non-positive accuracy at step " + std::to_string(i + 1));
    }
    s.alphas[i] = alpha;
    if (i + 1 < n) expect.advance(alpha, rng);
  }
  return s;
}

inline AccuracySchedule solve_vm_schedule(double c_final, std::size_t n, double tol = 1e-8) {
  VmScheduleOptions opt;
  opt.tol = tol;
  return solve_vm_schedule(c_final, n, opt);
}

// ---------------------------------------------------------------------------
// Gaussian (lattice) and discrete (atom type) schedules

struct GaussianScheduleParams {
  double sigma1_sq = 0.001;
  std::size_t steps = 50;

  void validate() const {
    if (!(sigma1_sq > 0.0 && sigma1_sq < 1.0)) throw DomainError("sigma1_sq must lie in (0, 1)");
    if (steps < 1) throw DomainError("Gaussian schedule needs at least one step");
  }
};

/// gamma(t) = 1 - sigma1^(2t).
inline double gaussian_gamma(double t, const GaussianScheduleParams& p) {
  detail::require_finite(t, "gaussian_gamma");
  if (t < 0.0 || t > 1.0) throw DomainError("gaussian_gamma: t must lie in [0, 1]");
  p.validate();
  return -std::expm1(t * std::log(p.sigma1_sq));
}

/// alpha_i = sigma1^(-2i/n) (1 - sigma1^(2/n)).
inline double gaussian_alpha(std::size_t i, const GaussianScheduleParams& p) {
  p.validate();
  if (i < 1 || i > p.steps) throw DomainError("gaussian_alpha: step index out of range");
  const double n = static_cast<double>(p.steps);
  const double ls = std::log(p.sigma1_sq);
  return std::exp(-static_cast<double>(i) / n * ls) * -std::expm1(ls / n);
}

/// Receiver precision after i updates from rho_0 = 1: sigma1^(-2i/n).
inline double gaussian_precision(std::size_t i, const GaussianScheduleParams& p) {
  p.validate();
  return std::exp(-static_cast<double>(i) / static_cast<double>(p.steps) * std::log(p.sigma1_sq));
}

struct DiscreteScheduleParams {
  double beta1 = 3.0;
  std::size_t steps = 50;
  std::size_t classes = 4;

  void validate() const {
    if (!(beta1 > 0.0) || !std::isfinite(beta1)) throw DomainError("beta1 must be positive");
    if (steps < 1) throw DomainError("discrete schedule needs at least one step");
    if (classes < 2) throw DomainError("discrete schedule needs at least two classes");
  }
};

/// beta(t) = beta1 t^2.
inline double discrete_beta(double t, const DiscreteScheduleParams& p) {
  if (t < 0.0 || t > 1.0) throw DomainError("discrete_beta: t must lie in [0, 1]");
  return p.beta1 * t * t;
}

/// alpha_i = beta1 (2i - 1) / n^2, so that sum_{j<=i} alpha_j = beta(i/n).
inline double discrete_alpha(std::size_t i, const DiscreteScheduleParams& p) {
  p.validate();
  if (i < 1 || i > p.steps) throw DomainError("discrete_alpha: step index out of range");
  const double n = static_cast<double>(p.steps);
  return p.beta1 * (2.0 * static_cast<double>(i) - 1.0) / (n * n);
}

// ---------------------------------------------------------------------------
// Schedule cache

inline constexpr int kScheduleCacheVersion = 1;
inline constexpr const char* kScheduleSolverTag = "particle-bisection-v2";

inline std::filesystem::path schedule_cache_file(const std::filesystem::path& dir, double c_final,
                                                 std::size_t n, double tol) {
  std::ostringstream name;
  name.precision(17);
  name << "vm_schedule_c" << c_final << "_n" << n << "_tol" << tol << ".json";
  return dir / name.str();
}

inline nlohmann::json schedule_to_json(const AccuracySchedule& s) {
  return {{"version", kScheduleCacheVersion}, {"solver", kScheduleSolverTag},
          {"c_final", s.c_final},            {"n", s.steps},
          {"tol", s.tol},                    {"alphas", s.alphas},
          {"c_targets", s.c_targets}};
}

inline void save_schedule(const std::filesystem::path& path, const AccuracySchedule& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write schedule cache " + path.string());
  out << schedule_to_json(s).dump(1) << '\n';
}

/// Cached schedule for the key, or nullopt on a missing, corrupt, or
/// mismatched file.
inline std::optional<AccuracySchedule> load_schedule(const std::filesystem::path& path, double c_final,
                                                     std::size_t n, double tol) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("version").get<int>() != kScheduleCacheVersion) return std::nullopt;
    if (j.at("solver").get<std::string>() != kScheduleSolverTag) return std::nullopt;
    if (j.at("c_final").get<double>() != c_final || j.at("n").get<std::size_t>() != n ||
        j.at("tol").get<double>() != tol) {
      return std::nullopt;
    }
    AccuracySchedule s;
    s.steps = n;
    s.c_final = c_final;
    s.tol = tol;
    s.alphas = j.at("alphas").get<std::vector<double>>();
    s.c_targets = j.at("c_targets").get<std::vector<double>>();
    if (s.alphas.size() != n || s.c_targets.size() != n) return std::nullopt;
    for (double a : s.alphas) {
      if (!(a > 0.0) || !std::isfinite(a)) return std::nullopt;
    }
    return s;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

/// Reads the cache entry for (c_final, n, tol) or solves and writes it.
inline AccuracySchedule load_or_solve_schedule(const std::filesystem::path& dir, double c_final, std::size_t n,
                                               double tol = 1e-8, bool* solved = nullptr) {
  const auto path = schedule_cache_file(dir, c_final, n, tol);
  if (auto cached = load_schedule(path, c_final, n, tol)) {
    if (solved) *solved = false;
    return *cached;
  }
  AccuracySchedule s = solve_vm_schedule(c_final, n, tol);
  save_schedule(path, s);
  if (solved) *solved = true;
  return s;
}

}  // namespace torusbfn
