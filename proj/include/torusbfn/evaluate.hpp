#pragma once

// Sample-quality metrics against the synthetic reference distribution.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "json.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/state.hpp"
#include "torusbfn/synthetic.hpp"
#include "torusbfn/von_mises.hpp"

namespace torusbfn {

inline constexpr std::size_t kHistogramBins = 64;
inline constexpr std::size_t kMinEvaluationSamples = 1000;

struct Metrics {
  std::vector<double> histogram_kl;  // per torus dim
  double energy_distance = 0.0;
  double atom_tv = 0.0;              // worst slot
  double class_mode_agreement = 0.0;
  std::size_t samples = 0;

  double mean_histogram_kl() const {
    double s = 0.0;
    for (double k : histogram_kl) s += k;
    return histogram_kl.empty() ? 0.0 : s / static_cast<double>(histogram_kl.size());
  }
  double max_histogram_kl() const {
    return histogram_kl.empty() ? 0.0 : *std::max_element(histogram_kl.begin(), histogram_kl.end());
  }

  nlohmann::json to_json() const {
    return {{"samples", samples},
            {"histogram_kl", histogram_kl},
            {"histogram_kl_mean", mean_histogram_kl()},
            {"energy_distance", energy_distance},
            {"atom_marginal_tv", atom_tv},
            {"class_mode_agreement", class_mode_agreement}};
  }
};

/// Probability of each of `bins` equal arcs of [-pi, pi) under the spec's
/// marginal mixture density of torus dim d (midpoint rule inside each bin).
inline std::vector<double> reference_bin_probabilities(const SyntheticSpec& spec, int d, std::size_t bins = kHistogramBins,
                                                       std::size_t sub = 64) {
  std::vector<double> p(bins, 0.0);
  const double width = kTwoPi / static_cast<double>(bins * sub);
  for (std::size_t b = 0; b < bins; ++b) {
    for (std::size_t s = 0; s < sub; ++s) {
      const double x = -kPi + (static_cast<double>(b * sub + s) + 0.5) * width;
      for (const auto& c : spec.components) {
        p[b] += c.weight * std::exp(log_pdf(VonMises(c.mean[d], c.concentration), x)) * width;
      }
    }
  }
  double total = 0.0;
  for (double v : p) total += v;
  for (double& v : p) v /= total;
  return p;
}

inline std::size_t angle_bin(double angle, std::size_t bins) {
  const auto b = static_cast<std::size_t>((angle + kPi) / kTwoPi * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

/// KL(empirical histogram || reference histogram) for torus dim d.
inline double histogram_kl(std::span<const ToyCrystal> samples, const SyntheticSpec& spec, int d,
                           std::size_t bins = kHistogramBins) {
  const auto ref = reference_bin_probabilities(spec, d, bins);
  std::vector<double> counts(bins, 0.0);
  for (const auto& x : samples) counts[angle_bin(x.coords.at(d).value(), bins)] += 1.0;
  double kl = 0.0;
  const double n = static_cast<double>(samples.size());
  for (std::size_t b = 0; b < bins; ++b) {
    if (counts[b] == 0.0) continue;
    const double q = counts[b] / n;
    kl += q * std::log(q / ref[b]);
  }
  return kl;
}

/// Energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| with unbiased within-sample terms.
inline double energy_distance(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("energy_distance: need at least two points per sample");
  auto within = [](const std::vector<Eigen::VectorXd>& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t j = i + 1; j < v.size(); ++j) s += (v[i] - v[j]).norm();
    }
    return 2.0 * s / (static_cast<double>(v.size()) * static_cast<double>(v.size() - 1));
  };
  double cross = 0.0;
  for (const auto& x : a) {
    for (const auto& y : b) cross += (x - y).norm();
  }
  cross /= static_cast<double>(a.size()) * static_cast<double>(b.size());
  return 2.0 * cross - within(a) - within(b);
}

/// Most likely mixture component given the torus coordinates.
inline std::size_t mode_from_coords(const ToyCrystal& x, const SyntheticSpec& spec) {
  std::size_t best = 0;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < spec.components.size(); ++j) {
    const auto& c = spec.components[j];
    if (c.weight <= 0.0) continue;
    double lp = std::log(c.weight);
    for (int d = 0; d < spec.torus_dims; ++d) lp += log_pdf(VonMises(c.mean[d], c.concentration), x.coords[d]);
    if (lp > best_lp) {
      best_lp = lp;
      best = j;
    }
  }
  return best;
}

/// Most likely mixture component given the atom classes alone.
inline std::size_t mode_from_atoms(const ToyCrystal& x, const SyntheticSpec& spec) {
  std::size_t best = 0;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < spec.components.size(); ++j) {
    double lp = 0.0;
    for (const auto& a : x.atoms) lp += std::log(spec.components[j].class_probs.at(a.index));
    if (lp > best_lp) {
      best_lp = lp;
      best = j;
    }
  }
  return best;
}

/// `reference_count` lattice draws from the spec (seeded) serve as the energy
/// distance reference.
inline Metrics evaluate(std::span<const ToyCrystal> samples, const SyntheticSpec& spec,
                        std::uint64_t reference_seed = 0x5eedu, std::size_t reference_count = 2000) {
  spec.validate();
  if (samples.size() < kMinEvaluationSamples) {
    throw DomainError("evaluate: need at least " + std::to_string(kMinEvaluationSamples) + " samples");
  }
  for (const auto& x : samples) {
    if (static_cast<int>(x.atoms.size()) != spec.slots || static_cast<int>(x.coords.size()) != spec.torus_dims ||
        x.lattice.size() != spec.lattice_dims()) {
      throw ShapeError("evaluate: sample shape does not match the reference spec");
    }
    for (const auto& a : x.atoms) {
      if (a.index < 0 || a.index >= spec.classes) throw DomainError("evaluate: class index out of range");
    }
  }
  Metrics m;
  m.samples = samples.size();
  for (int d = 0; d < spec.torus_dims; ++d) m.histogram_kl.push_back(histogram_kl(samples, spec, d));

  Rng rng = make_rng(reference_seed, 0);
  std::vector<Eigen::VectorXd> ref_l, sample_l;
  for (std::size_t k = 0; k < reference_count; ++k) {
    Eigen::VectorXd v(spec.lattice_dims());
    for (int d = 0; d < spec.lattice_dims(); ++d) v[d] = spec.lattice_mean[d] + spec.lattice_sd * standard_normal(rng);
    ref_l.push_back(std::move(v));
  }
  for (const auto& x : samples) sample_l.push_back(x.lattice);
  m.energy_distance = energy_distance(sample_l, ref_l);

  std::vector<double> marginal(spec.classes, 0.0);
  for (const auto& c : spec.components) {
    for (int k = 0; k < spec.classes; ++k) marginal[k] += c.weight * c.class_probs[k];
  }
  for (int s = 0; s < spec.slots; ++s) {
    std::vector<double> counts(spec.classes, 0.0);
    for (const auto& x : samples) counts[x.atoms[s].index] += 1.0;
    double tv = 0.0;
    for (int k = 0; k < spec.classes; ++k) tv += std::abs(counts[k] / static_cast<double>(samples.size()) - marginal[k]);
    m.atom_tv = std::max(m.atom_tv, 0.5 * tv);
  }

  std::size_t agree = 0;
  for (const auto& x : samples) agree += mode_from_coords(x, spec) == mode_from_atoms(x, spec) ? 1 : 0;
  m.class_mode_agreement = static_cast<double>(agree) / static_cast<double>(samples.size());
  return m;
}

}  // namespace torusbfn
