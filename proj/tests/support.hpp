#pragma once

// Check routines shared by the unit tests and the acceptance runner. Each one
// compares library output with an independent computation from oracles.hpp or
// with a hand-built stub, and returns the raw statistic so callers choose the
// threshold.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "torusbfn/torusbfn.hpp"

namespace support {

using namespace torusbfn;

// ---------------------------------------------------------------------------
// Conjugacy

/// Largest TV distance, over `pairs` random (prior, draw) pairs, between the
/// closed-form posterior and a grid product of the two factors.
inline double max_conjugacy_tv(int pairs, std::uint64_t seed, int grid = 10000) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-oracle::kPi, oracle::kPi), c(0.0, 50.0);
  double worst = 0.0;
  for (int k = 0; k < pairs; ++k) {
    const TorusBelief prev{{Angle(u(gen))}, {c(gen)}};
    const SenderDraw draw{{Angle(u(gen))}, c(gen) + 1e-3};
    const auto post = bayesian_update(prev, draw);
    const auto grid_post = posterior_oracle(prev, draw, grid);
    const oracle::NumericVonMises closed(post.mean[0].value(), post.concentration[0], 1 << 18);
    const double h = 2 * oracle::kPi / grid;
    double tv = 0.0;
    for (int j = 0; j < grid; ++j) {
      tv += std::abs(grid_post[0].mass[j] - std::exp(closed.log_pdf(grid_post[0].nodes[j])) * h);
    }
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Fast versus iterated flow

/// Largest per-step disagreement of the two flow paths on shared draws.
inline double max_shared_draw_gap(const AccuracySchedule& s, int trajectories, std::uint64_t seed) {
  const std::vector<Angle> x{frac_to_angle(0.3)};
  double worst = 0.0;
  for (int k = 0; k < trajectories; ++k) {
    Rng a = make_rng(seed, k), b = make_rng(seed, k);
    const auto it = flow_trajectory(x, s.alphas, FlowMode::kIterated, a);
    const auto fa = flow_trajectory(x, s.alphas, FlowMode::kFast, b);
    for (std::size_t i = 0; i < it.size(); ++i) {
      worst = std::max(worst, std::abs(it[i].concentration[0] - fa[i].concentration[0]));
      worst = std::max(worst, std::abs(oracle::angle_diff(it[i].mean[0].value(), fa[i].mean[0].value())));
    }
  }
  return worst;
}

struct TwoSampleReport {
  double p_mean = 0.0;
  double p_concentration = 0.0;
  double p_joint = 0.0;
};

/// Two-sample tests between independent fast and iterated final states:
/// KS on m (as an offset from x), KS on c, chi-square on an 8 x 8 grid of
/// pooled (m, c) quantiles.
inline TwoSampleReport flow_two_sample(const AccuracySchedule& s, double x, std::size_t trajectories,
                                       std::uint64_t seed) {
  const std::vector<Angle> xs{Angle(x)};
  const auto fast = flow_sample_batch(xs, s.alphas, trajectories, derive_seed(seed, 1), FlowMode::kFast);
  const auto iter = flow_sample_batch(xs, s.alphas, trajectories, derive_seed(seed, 2), FlowMode::kIterated);
  std::vector<double> mf, mi, cf, ci;
  for (const auto& b : fast) {
    mf.push_back(oracle::angle_diff(b.mean[0].value(), x));
    cf.push_back(b.concentration[0]);
  }
  for (const auto& b : iter) {
    mi.push_back(oracle::angle_diff(b.mean[0].value(), x));
    ci.push_back(b.concentration[0]);
  }
  TwoSampleReport r;
  r.p_mean = oracle::ks_p_value(oracle::ks_statistic(mf, mi), mf.size(), mi.size());
  r.p_concentration = oracle::ks_p_value(oracle::ks_statistic(cf, ci), cf.size(), ci.size());

  const int bins = 8;
  std::vector<double> pooled_m = mf, pooled_c = cf;
  pooled_m.insert(pooled_m.end(), mi.begin(), mi.end());
  pooled_c.insert(pooled_c.end(), ci.begin(), ci.end());
  const auto em = oracle::quantile_edges(pooled_m, bins), ec = oracle::quantile_edges(pooled_c, bins);
  std::vector<double> ha(bins * bins, 0.0), hb(bins * bins, 0.0);
  for (std::size_t k = 0; k < mf.size(); ++k) ha[oracle::bin_of(mf[k], em) * bins + oracle::bin_of(cf[k], ec)] += 1;
  for (std::size_t k = 0; k < mi.size(); ++k) hb[oracle::bin_of(mi[k], em) * bins + oracle::bin_of(ci[k], ec)] += 1;
  r.p_joint = oracle::chi2_homogeneity_p(ha, hb);
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checks through the predictor

struct GradCase {
  PredictorConfig cfg;
  PredictorParams params;
  FlowSchedules sched;
  std::vector<ToyCrystal> crystals;
  std::vector<TrainingExample> examples;
};

/// A small random predictor with non-zero heads, a hand-made torus schedule and
/// a few training examples at random steps.
inline GradCase random_grad_case(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(gen() % static_cast<unsigned>(hi - lo + 1)); };
  GradCase g;
  g.cfg.slots = pick(1, 3);
  g.cfg.classes = pick(2, 4);
  g.cfg.torus_dims = pick(1, 3);
  g.cfg.lattice_dims = pick(1, 3);
  g.cfg.hidden = pick(3, 8);
  g.cfg.layers = pick(1, 2);
  g.cfg.time_frequencies = pick(0, 2);
  g.cfg.c_final = 100.0;
  g.cfg.entropy_conditioning = gen() % 4 != 0;
  g.cfg.equivariant_features = gen() % 3 == 0;
  g.cfg.lattice_scale = 0.5 + std::uniform_real_distribution<double>(0, 1)(gen);

  Rng rng = make_rng(seed, 1);
  g.params = init_params(g.cfg, rng);
  for (std::size_t k = 0; k < g.params.tensor_count(); ++k) {
    auto& t = g.params.tensor(k);
    for (Eigen::Index j = 0; j < t.size(); ++j) t(j) = std::uniform_real_distribution<double>(-0.8, 0.8)(gen);
  }

  const std::size_t n = static_cast<std::size_t>(pick(3, 10));
  AccuracySchedule torus;
  torus.steps = n;
  torus.c_final = g.cfg.c_final;
  double c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    torus.alphas.push_back(std::uniform_real_distribution<double>(0.5, 20.0)(gen));
    c += torus.alphas.back();
    torus.c_targets.push_back(c);
  }
  g.sched = FlowSchedules::make(torus, 0.001, 3.0, static_cast<std::size_t>(g.cfg.classes));

  SyntheticSpec spec;
  spec.slots = g.cfg.slots;
  spec.classes = g.cfg.classes;
  spec.torus_dims = g.cfg.torus_dims;
  MixtureComponent comp;
  comp.mean.assign(static_cast<std::size_t>(g.cfg.torus_dims), 0.5);
  comp.concentration = 2.0;
  comp.class_probs.assign(static_cast<std::size_t>(g.cfg.classes), 1.0 / g.cfg.classes);
  spec.components = {comp};
  spec.lattice_mean.assign(static_cast<std::size_t>(g.cfg.lattice_dims), 0.7);
  g.crystals = generate_synthetic(spec, static_cast<std::size_t>(pick(1, 4)), rng);
  for (const auto& x : g.crystals) {
    g.examples.push_back(draw_training_example(x, static_cast<std::size_t>(pick(1, static_cast<int>(n))), g.sched, rng));
  }
  return g;
}

/// max |g - fd| / max(|g|, |fd|, 1) over every parameter scalar, for the loss
/// selected by `weights`, with central differences of step h.
inline double gradient_violation(const GradCase& g, const LossWeights& weights, double h = 1e-5) {
  std::vector<const ToyCrystal*> ptrs;
  for (const auto& x : g.crystals) ptrs.push_back(&x);
  PredictorParams grads;
  batch_loss(g.cfg, g.params, weights, g.sched, ptrs, g.examples, &grads);
  PredictorParams p = g.params;
  double worst = 0.0;
  for (std::size_t k = 0; k < p.tensor_count(); ++k) {
    for (Eigen::Index j = 0; j < p.tensor(k).size(); ++j) {
      const double orig = p.tensor(k)(j);
      p.tensor(k)(j) = orig + h;
      const double up = batch_loss(g.cfg, p, weights, g.sched, ptrs, g.examples, nullptr).total;
      p.tensor(k)(j) = orig - h;
      const double dn = batch_loss(g.cfg, p, weights, g.sched, ptrs, g.examples, nullptr).total;
      p.tensor(k)(j) = orig;
      const double fd = (up - dn) / (2 * h);
      const double an = grads.tensor(k)(j);
      worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0}));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Equivariance of sampling chains

inline Eigen::Matrix3d random_rotation(std::mt19937_64& gen) {
  std::normal_distribution<double> n;
  Eigen::Matrix3d a;
  for (int k = 0; k < 9; ++k) a(k) = n(gen);
  Eigen::Matrix3d q = Eigen::HouseholderQR<Eigen::Matrix3d>(a).householderQ();
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

/// Lattice chain with the equivariant stub psi(mu) = target + 0.3 mu tanh|mu|.
/// Rotating the target and each receiver noise by Q must rotate the chain;
/// returns the largest deviation from that over identity and random rotations.
inline double rotation_chain_error(std::uint64_t seed, std::size_t steps = 30) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  const GaussianScheduleParams p{0.001, steps};
  auto stub = [](const Eigen::Vector3d& mu, const Eigen::Vector3d& target) {
    return Eigen::Vector3d(target + 0.3 * mu * std::tanh(mu.norm()));
  };
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Matrix3d q = trial == 0 ? Eigen::Matrix3d::Identity() : random_rotation(gen);
    const Eigen::Vector3d target(nd(gen), nd(gen), nd(gen));
    GaussBelief a = GaussBelief::prior(3), b = GaussBelief::prior(3);
    Eigen::Vector3d out_a, out_b;
    for (std::size_t i = 1; i <= steps; ++i) {
      out_a = stub(a.mean, target);
      out_b = stub(b.mean, q * target);
      if (i == steps) break;
      const double alpha = gaussian_alpha(i, p);
      const Eigen::Vector3d eps = Eigen::Vector3d(nd(gen), nd(gen), nd(gen)) / std::sqrt(alpha);
      a = gauss_update(a, out_a + eps, alpha);
      b = gauss_update(b, out_b + q * eps, alpha);
    }
    worst = std::max(worst, (q * out_a - out_b).cwiseAbs().maxCoeff());
  }
  return worst;
}

/// Predictor in equivariant-feature mode with a constant torus offset:
/// F_hat = net(theta) + tau. Shifting every mean of theta by t shifts F_hat by t.
struct ShiftStub {
  PredictorConfig cfg;
  PredictorParams params;
  std::vector<double> tau;

  static ShiftStub make(std::uint64_t seed, int torus_dims = 2) {
    ShiftStub s;
    s.cfg.slots = 1;
    s.cfg.classes = 2;
    s.cfg.torus_dims = torus_dims;
    s.cfg.lattice_dims = 1;
    s.cfg.hidden = 16;
    s.cfg.layers = 1;
    s.cfg.c_final = 1000.0;
    s.cfg.equivariant_features = true;
    Rng rng = make_rng(seed, 0);
    s.params = init_params(s.cfg, rng);
    auto& head = s.params.weights.back();
    for (Eigen::Index j = 0; j < head.size(); ++j) head(j) = 0.3 * (2 * uniform01(rng) - 1);
    s.tau.assign(static_cast<std::size_t>(torus_dims), 0.0);
    for (auto& t : s.tau) t = 0.4 * (2 * uniform01(rng) - 1);
    return s;
  }

  Prediction operator()(std::span<const JointParamState> states, std::span<const double> times) const {
    Prediction p = predict(cfg, params, states, times);
    for (Eigen::Index r = 0; r < p.torus.rows(); ++r) {
      for (int d = 0; d < cfg.torus_dims; ++d) p.torus(r, d) = wrap_value(p.torus(r, d) + tau[d]);
    }
    return p;
  }
};

/// Torus part of the sampling chain run twice on the same random stream, the
/// second time with the prior mean shifted by t. Returns the largest deviation
/// of the second final prediction from the first plus t.
inline double shift_chain_error(const ShiftStub& base, const AccuracySchedule& s, double t, int chains,
                                std::uint64_t seed) {
  const std::size_t dims = static_cast<std::size_t>(base.cfg.torus_dims);
  double worst = 0.0;
  for (int k = 0; k < chains; ++k) {
    Rng init = make_rng(seed, 2 * k);
    JointParamState a = JointParamState::prior(1, 2, dims, 1, init);
    JointParamState b = a;
    for (std::size_t d = 0; d < dims; ++d) b.torus.mean[d] = Angle(a.torus.mean[d].value() + t);
    Rng ra = make_rng(seed, 2 * k + 1), rb = make_rng(seed, 2 * k + 1);
    Prediction pa, pb;
    for (std::size_t i = 1; i <= s.steps; ++i) {
      const double time = static_cast<double>(i - 1) / static_cast<double>(s.steps);
      pa = base(std::span<const JointParamState>(&a, 1), std::span<const double>(&time, 1));
      pb = base(std::span<const JointParamState>(&b, 1), std::span<const double>(&time, 1));
      if (i == s.steps) break;
      const double alpha = s.alphas[i - 1];
      SenderDraw ya{std::vector<Angle>(dims), alpha}, yb = ya;
      for (std::size_t d = 0; d < dims; ++d) {
        ya.y[d] = sample(VonMises(pa.torus(0, d), alpha), ra);
        yb.y[d] = sample(VonMises(pb.torus(0, d), alpha), rb);
      }
      a.torus = bayesian_update(a.torus, ya);
      b.torus = bayesian_update(b.torus, yb);
    }
    for (std::size_t d = 0; d < dims; ++d) {
      worst = std::max(worst, std::abs(oracle::angle_diff(pb.torus(0, d), pa.torus(0, d) + t)));
    }
  }
  return worst;
}

/// KL between 64-bin histograms of (sample_b - t) and sample_a, per torus dim,
/// with half-count smoothing; returns the largest over dims.
inline double shifted_histogram_kl(const std::vector<ToyCrystal>& a, const std::vector<ToyCrystal>& b, double t) {
  const std::size_t bins = 64;
  const std::size_t dims = a.front().coords.size();
  double worst = 0.0;
  for (std::size_t d = 0; d < dims; ++d) {
    std::vector<double> ha(bins, 0.5), hb(bins, 0.5);
    for (const auto& x : a) ha[angle_bin(x.coords[d].value(), bins)] += 1;
    for (const auto& x : b) hb[angle_bin(wrap_value(x.coords[d].value() - t), bins)] += 1;
    const double na = a.size() + 0.5 * bins, nb = b.size() + 0.5 * bins;
    double kl = 0.0;
    for (std::size_t k = 0; k < bins; ++k) kl += hb[k] / nb * std::log((hb[k] / nb) / (ha[k] / na));
    worst = std::max(worst, kl);
  }
  return worst;
}

}  // namespace support
