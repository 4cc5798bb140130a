#pragma once

#include <Eigen/Dense>
#include <vector>

#include "torusbfn/euclid_flow.hpp"
#include "torusbfn/simplex_flow.hpp"
#include "torusbfn/special_fn.hpp"
#include "torusbfn/torus_flow.hpp"

namespace torusbfn {

/// One toy crystal: atom classes, torus coordinates (angles) and lattice vector.
struct ToyCrystal {
  std::vector<OneHot> atoms;
  std::vector<Angle> coords;
  Eigen::VectorXd lattice;
};

/// Joint belief over the three modalities.
struct JointParamState {
  SimplexBelief atoms;
  TorusBelief torus;
  GaussBelief lattice;

  static JointParamState prior(Eigen::Index slots, Eigen::Index classes, std::size_t torus_dims,
                               Eigen::Index lattice_dims, Rng& rng) {
    return {SimplexBelief::uniform(slots, classes), TorusBelief::uniform_prior(torus_dims, rng),
            GaussBelief::prior(lattice_dims)};
  }
};

}  // namespace torusbfn
