#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "torusbfn/error.hpp"
#include "torusbfn/predictor.hpp"

namespace torusbfn {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(const PredictorParams& shape_of, AdamWConfig cfg) : cfg_(cfg), m_(shape_of.zeros_like()), v_(m_) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }

  void step(PredictorParams& params, const PredictorParams& grads) {
    if (params.tensor_count() != m_.tensor_count() || grads.tensor_count() != m_.tensor_count()) {
      throw ShapeError("AdamW: tensor count mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.tensor_count(); ++k) {
      auto& p = params.tensor(k);
      const auto& g = grads.tensor(k);
      if (p.rows() != g.rows() || p.cols() != g.cols() || p.rows() != m_.tensor(k).rows() ||
          p.cols() != m_.tensor(k).cols()) {
        throw ShapeError("AdamW: tensor shape mismatch");
      }
      auto& m = m_.tensor(k);
      auto& v = v_.tensor(k);
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      p *= 1.0 - cfg_.lr * cfg_.weight_decay;
      p.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
    }
  }

 private:
  AdamWConfig cfg_;
  PredictorParams m_;
  PredictorParams v_;
  long t_ = 0;
};

/// Multiplies the learning rate by `factor` after `patience` evaluations
/// without improvement, never going below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor = 0.6, int patience = 5, double min_lr = 1e-4)
      : factor_(factor), patience_(patience), min_lr_(min_lr) {
    if (!(factor > 0.0 && factor < 1.0)) throw DomainError("plateau factor must lie in (0, 1)");
  }

  /// Returns the learning rate to use after observing `metric`.
  double observe(double metric, double lr) {
    if (metric < best_) {
      best_ = metric;
      bad_ = 0;
      return lr;
    }
    if (++bad_ > patience_) {
      bad_ = 0;
      return std::max(min_lr_, lr * factor_);
    }
    return lr;
  }

  double best() const { return best_; }

 private:
  double factor_;
  int patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace torusbfn
