#pragma once

#include "torusbfn/autodiff.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/euclid_flow.hpp"
#include "torusbfn/evaluate.hpp"
#include "torusbfn/experiment.hpp"
#include "torusbfn/io.hpp"
#include "torusbfn/optimizer.hpp"
#include "torusbfn/parallel.hpp"
#include "torusbfn/predictor.hpp"
#include "torusbfn/quadrature.hpp"
#include "torusbfn/random.hpp"
#include "torusbfn/sampling.hpp"
#include "torusbfn/schedule.hpp"
#include "torusbfn/simplex_flow.hpp"
#include "torusbfn/special_fn.hpp"
#include "torusbfn/state.hpp"
#include "torusbfn/synthetic.hpp"
#include "torusbfn/torus_flow.hpp"
#include "torusbfn/training.hpp"
#include "torusbfn/von_mises.hpp"
