#pragma once

// Toy data: a von Mises mixture on the torus whose component also selects the
// class distribution of every atom slot; the lattice is an independent Gaussian.

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

#include "json.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/state.hpp"
#include "torusbfn/von_mises.hpp"

namespace torusbfn {

struct MixtureComponent {
  double weight = 1.0;
  std::vector<double> mean;         // one angle per torus dim
  double concentration = 8.0;
  std::vector<double> class_probs;  // K entries, shared by all slots
};

struct SyntheticSpec {
  int slots = 4;
  int classes = 4;
  int torus_dims = 2;
  std::vector<MixtureComponent> components;
  std::vector<double> lattice_mean;
  double lattice_sd = 0.3;

  int lattice_dims() const { return static_cast<int>(lattice_mean.size()); }

  void validate() const {
    if (slots < 1 || classes < 2 || torus_dims < 1) throw DomainError("synthetic spec: bad shape");
    if (components.empty()) throw DomainError("synthetic spec: needs at least one component");
    if (lattice_mean.empty()) throw DomainError("synthetic spec: lattice_mean must be non-empty");
    if (!(lattice_sd >= 0.0)) throw DomainError("synthetic spec: lattice_sd must be nonnegative");
    double total = 0.0;
    for (const auto& c : components) {
      if (!(c.weight >= 0.0)) throw DomainError("synthetic spec: negative mixture weight");
      if (static_cast<int>(c.mean.size()) != torus_dims) throw DomainError("synthetic spec: mean length != torus_dims");
      if (static_cast<int>(c.class_probs.size()) != classes) {
        throw DomainError("synthetic spec: class_probs length != classes");
      }
      if (!(c.concentration >= 0.0)) throw DomainError("synthetic spec: negative concentration");
      const double s = std::accumulate(c.class_probs.begin(), c.class_probs.end(), 0.0);
      if (std::abs(s - 1.0) > 1e-9) throw DomainError("synthetic spec: class_probs must sum to 1");
      for (double p : c.class_probs) {
        if (p < 0.0) throw DomainError("synthetic spec: negative class probability");
      }
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("synthetic spec: mixture weights must sum to 1");
  }

  /// Two modes on T^2 with classes {0,1} tied to the first and {2,3} to the second.
  static SyntheticSpec default_spec() {
    SyntheticSpec s;
    s.components = {{0.5, {-1.5, 0.5}, 8.0, {0.48, 0.48, 0.02, 0.02}},
                    {0.5, {1.5, -2.0}, 8.0, {0.02, 0.02, 0.48, 0.48}}};
    s.lattice_mean = {1.0, -0.5, 2.0};
    s.lattice_sd = 0.3;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const MixtureComponent& c) {
  j = {{"weight", c.weight}, {"mean", c.mean}, {"concentration", c.concentration}, {"class_probs", c.class_probs}};
}
inline void from_json(const nlohmann::json& j, MixtureComponent& c) {
  c.weight = j.at("weight").get<double>();
  c.mean = j.at("mean").get<std::vector<double>>();
  c.concentration = j.at("concentration").get<double>();
  c.class_probs = j.at("class_probs").get<std::vector<double>>();
}
inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"slots", s.slots},           {"classes", s.classes},           {"torus_dims", s.torus_dims},
       {"components", s.components}, {"lattice_mean", s.lattice_mean}, {"lattice_sd", s.lattice_sd}};
}
inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  const SyntheticSpec d = SyntheticSpec::default_spec();
  s.slots = j.value("slots", d.slots);
  s.classes = j.value("classes", d.classes);
  s.torus_dims = j.value("torus_dims", d.torus_dims);
  s.components = j.contains("components") ? j.at("components").get<std::vector<MixtureComponent>>() : d.components;
  s.lattice_mean = j.value("lattice_mean", d.lattice_mean);
  s.lattice_sd = j.value("lattice_sd", d.lattice_sd);
}

namespace detail {

inline std::size_t draw_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  // Round-off: fall back to the last class with positive mass.
  for (std::size_t k = probs.size(); k-- > 0;) {
    if (probs[k] > 0.0) return k;
  }
  return 0;
}

}  // namespace detail

/// One crystal; `component` (optional) receives the mixture component drawn.
inline ToyCrystal draw_crystal(const SyntheticSpec& spec, Rng& rng, std::size_t* component = nullptr) {
  std::vector<double> weights;
  for (const auto& c : spec.components) weights.push_back(c.weight);
  const std::size_t j = detail::draw_categorical(weights, rng);
  const MixtureComponent& comp = spec.components[j];
  ToyCrystal x;
  for (int d = 0; d < spec.torus_dims; ++d) x.coords.push_back(sample(VonMises(comp.mean[d], comp.concentration), rng));
  for (int s = 0; s < spec.slots; ++s) {
    x.atoms.push_back(OneHot{static_cast<int>(detail::draw_categorical(comp.class_probs, rng))});
  }
  x.lattice.resize(spec.lattice_dims());
  for (int d = 0; d < spec.lattice_dims(); ++d) x.lattice[d] = spec.lattice_mean[d] + spec.lattice_sd * standard_normal(rng);
  if (component) *component = j;
  return x;
}

inline std::vector<ToyCrystal> generate_synthetic(const SyntheticSpec& spec, std::size_t count, Rng& rng,
                                                  std::vector<std::size_t>* components = nullptr) {
  spec.validate();
  std::vector<ToyCrystal> out;
  out.reserve(count);
  if (components) components->clear();
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t j = 0;
    out.push_back(draw_crystal(spec, rng, &j));
    if (components) components->push_back(j);
  }
  return out;
}

}  // namespace torusbfn
