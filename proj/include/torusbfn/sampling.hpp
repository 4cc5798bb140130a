#pragma once

// Generation: start every belief at its prior, let the predictor propose a
// crystal, feed receiver draws centred on that proposal back through the
// Bayesian updates, and return the last proposal.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "torusbfn/euclid_flow.hpp"
#include "torusbfn/parallel.hpp"
#include "torusbfn/predictor.hpp"
#include "torusbfn/simplex_flow.hpp"
#include "torusbfn/state.hpp"
#include "torusbfn/synthetic.hpp"
#include "torusbfn/torus_flow.hpp"
#include "torusbfn/training.hpp"

namespace torusbfn {

using PredictFn = std::function<Prediction(std::span<const JointParamState>, std::span<const double>)>;

struct CrystalShape {
  int slots = 4;
  int classes = 4;
  int torus_dims = 2;
  int lattice_dims = 3;

  static CrystalShape of(const PredictorConfig& c) { return {c.slots, c.classes, c.torus_dims, c.lattice_dims}; }
};

namespace detail {

inline int draw_from_logits(const Eigen::Ref<const Eigen::RowVectorXd>& logits, Rng& rng) {
  const double hi = logits.maxCoeff();
  const Eigen::RowVectorXd w = (logits.array() - hi).exp();
  const double u = uniform01(rng) * w.sum();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    acc += w[k];
    if (u < acc) return static_cast<int>(k);
  }
  return static_cast<int>(w.size() - 1);
}

}  // namespace detail

/// Samples `count` crystals with an arbitrary predictor. Sample k uses the
/// stream derived from (seed, k); the batch is split into fixed chunks so the
/// output does not depend on the thread count.
inline std::vector<ToyCrystal> sample_with(const PredictFn& predict_fn, const CrystalShape& shape,
                                           const FlowSchedules& s, std::size_t count, std::uint64_t seed,
                                           int threads = 1, std::size_t chunk = 256) {
  const std::size_t n = s.steps();
  const Eigen::Index classes = shape.classes;
  const double kk = static_cast<double>(classes);
  std::vector<ToyCrystal> out(count);
  const std::size_t chunks = (count + chunk - 1) / chunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk, len = std::min(chunk, count - lo);
    std::vector<Rng> rngs;
    std::vector<JointParamState> states;
    for (std::size_t k = 0; k < len; ++k) {
      rngs.push_back(make_rng(seed, lo + k));
      states.push_back(JointParamState::prior(shape.slots, classes, static_cast<std::size_t>(shape.torus_dims),
                                              shape.lattice_dims, rngs.back()));
    }
    std::vector<double> times(len);
    Prediction pred;
    for (std::size_t i = 1; i <= n; ++i) {
      std::fill(times.begin(), times.end(), static_cast<double>(i - 1) / static_cast<double>(n));
      pred = predict_fn(states, times);
      if (i == n) break;
      const double alpha_l = gaussian_alpha(i, s.lattice);
      const double alpha_f = s.torus.alphas[i - 1];
      const double alpha_a = discrete_alpha(i, s.atoms);
      const double sd_l = 1.0 / std::sqrt(alpha_l);
      const double sd_a = std::sqrt(alpha_a * kk);
      for (std::size_t k = 0; k < len; ++k) {
        Rng& rng = rngs[k];
        JointParamState& st = states[k];
        const auto r = static_cast<Eigen::Index>(k);

        Eigen::VectorXd yl(shape.lattice_dims);
        for (int d = 0; d < shape.lattice_dims; ++d) yl[d] = pred.lattice(r, d) + sd_l * standard_normal(rng);
        st.lattice = gauss_update(st.lattice, yl, alpha_l);

        SenderDraw yf{std::vector<Angle>(static_cast<std::size_t>(shape.torus_dims)), alpha_f};
        for (int d = 0; d < shape.torus_dims; ++d) yf.y[d] = sample(VonMises(pred.torus(r, d), alpha_f), rng);
        st.torus = bayesian_update(st.torus, yf);

        Eigen::MatrixXd ya(shape.slots, classes);
        for (int a = 0; a < shape.slots; ++a) {
          const int cls = detail::draw_from_logits(pred.atom_logits.row(r).segment(a * classes, classes), rng);
          for (Eigen::Index j = 0; j < classes; ++j) {
            ya(a, j) = alpha_a * ((j == cls ? kk : 0.0) - 1.0) + sd_a * standard_normal(rng);
          }
        }
        st.atoms = simplex_update(st.atoms, ya);
      }
    }
    for (std::size_t k = 0; k < len; ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      ToyCrystal& x = out[lo + k];
      for (int a = 0; a < shape.slots; ++a) {
        x.atoms.push_back(OneHot{detail::draw_from_logits(pred.atom_logits.row(r).segment(a * classes, classes), rngs[k])});
      }
      for (int d = 0; d < shape.torus_dims; ++d) x.coords.push_back(Angle(pred.torus(r, d)));
      x.lattice = pred.lattice.row(r).transpose();
    }
  });
  return out;
}

inline PredictFn network_predictor(const PredictorConfig& cfg, const PredictorParams& params) {
  return [&cfg, &params](std::span<const JointParamState> states, std::span<const double> times) {
    return predict(cfg, params, states, times);
  };
}

inline std::vector<ToyCrystal> sample(const PredictorConfig& cfg, const PredictorParams& params,
                                      const FlowSchedules& s, std::size_t count, std::uint64_t seed,
                                      int threads = 1) {
  check_shapes(cfg, params);
  return sample_with(network_predictor(cfg, params), CrystalShape::of(cfg), s, count, seed, threads);
}

}  // namespace torusbfn
