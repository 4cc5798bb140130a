#pragma once

// Joint training over the three flows: draw a step i per example, build the
// belief state after i-1 updates, predict, and descend on the weighted sum of
// the three n-step losses.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "torusbfn/autodiff.hpp"
#include "torusbfn/euclid_flow.hpp"
#include "torusbfn/optimizer.hpp"
#include "torusbfn/parallel.hpp"
#include "torusbfn/predictor.hpp"
#include "torusbfn/schedule.hpp"
#include "torusbfn/simplex_flow.hpp"
#include "torusbfn/state.hpp"
#include "torusbfn/synthetic.hpp"
#include "torusbfn/torus_flow.hpp"

namespace torusbfn {

struct LossWeights {
  double atoms = 0.05;
  double torus = 0.05;
  double lattice = 0.05;
};

struct TrainConfig {
  std::size_t steps = 50;
  double c_final = 1000.0;
  double sigma1_sq = 0.001;
  double beta1 = 3.0;
  LossWeights weights;
  std::size_t batch_size = 256;
  std::size_t epochs = 400;
  std::size_t max_iterations = 0;  // 0: run all epochs
  std::size_t train_size = 8192;
  std::size_t validation_size = 2048;
  std::size_t eval_every = 100;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double lr_factor = 0.6;
  int lr_patience = 5;
  double min_lr = 1e-4;
  std::uint64_t seed = 1;
  int threads = 1;
  double schedule_tol = 1e-8;
  bool fit_lattice_scale = true;  // set model.lattice_scale from the training set
  PredictorConfig model;
  SyntheticSpec data = SyntheticSpec::default_spec();

  /// Copies the data shapes and c_final into the model config and checks ranges.
  void resolve() {
    data.validate();
    model.slots = data.slots;
    model.classes = data.classes;
    model.torus_dims = data.torus_dims;
    model.lattice_dims = data.lattice_dims();
    model.c_final = c_final;
    validate();
  }

  void validate() const {
    if (steps < 1) throw DomainError("config: steps must be >= 1");
    if (!(c_final > 0.0)) throw DomainError("config: c_final must be positive");
    GaussianScheduleParams{sigma1_sq, steps}.validate();
    DiscreteScheduleParams{beta1, steps, static_cast<std::size_t>(std::max(data.classes, 0))}.validate();
    for (double w : {weights.atoms, weights.torus, weights.lattice}) {
      if (!(w >= 0.0)) throw DomainError("config: loss weights must be nonnegative");
    }
    if (batch_size < 1 || train_size < 1 || validation_size < 1) {
      throw DomainError("config: batch, train and validation sizes must be >= 1");
    }
    if (eval_every < 1) throw DomainError("config: eval_every must be >= 1");
    if (!(lr > 0.0) || !(weight_decay >= 0.0) || !(min_lr > 0.0)) throw DomainError("config: bad optimizer settings");
    if (!(schedule_tol > 0.0)) throw DomainError("config: schedule_tol must be positive");
    if (threads < 1) throw DomainError("config: threads must be >= 1");
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"c_final", c.c_final},
       {"sigma1_sq", c.sigma1_sq},
       {"beta1", c.beta1},
       {"loss_weights", {{"atoms", c.weights.atoms}, {"torus", c.weights.torus}, {"lattice", c.weights.lattice}}},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"max_iterations", c.max_iterations},
       {"train_size", c.train_size},
       {"validation_size", c.validation_size},
       {"eval_every", c.eval_every},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"lr_factor", c.lr_factor},
       {"lr_patience", c.lr_patience},
       {"min_lr", c.min_lr},
       {"seed", c.seed},
       {"threads", c.threads},
       {"schedule_tol", c.schedule_tol},
       {"fit_lattice_scale", c.fit_lattice_scale},
       {"model", c.model},
       {"data", c.data}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"steps",          "c_final",   "sigma1_sq", "beta1",        "loss_weights",
                                "batch_size",     "epochs",    "max_iterations", "train_size", "validation_size",
                                "eval_every",     "lr",        "weight_decay", "lr_factor", "lr_patience",
                                "min_lr",         "seed",      "threads",   "schedule_tol", "model",
                                "data",           "fit_lattice_scale"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known)) {
      throw DomainError("config: unknown key '" + key + "'");
    }
  }
  const TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.c_final = j.value("c_final", d.c_final);
  c.sigma1_sq = j.value("sigma1_sq", d.sigma1_sq);
  c.beta1 = j.value("beta1", d.beta1);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.atoms = w.value("atoms", d.weights.atoms);
    c.weights.torus = w.value("torus", d.weights.torus);
    c.weights.lattice = w.value("lattice", d.weights.lattice);
  }
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.max_iterations = j.value("max_iterations", d.max_iterations);
  c.train_size = j.value("train_size", d.train_size);
  c.validation_size = j.value("validation_size", d.validation_size);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.lr_factor = j.value("lr_factor", d.lr_factor);
  c.lr_patience = j.value("lr_patience", d.lr_patience);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
  c.schedule_tol = j.value("schedule_tol", d.schedule_tol);
  c.fit_lattice_scale = j.value("fit_lattice_scale", d.fit_lattice_scale);
  c.model = j.contains("model") ? j.at("model").get<PredictorConfig>() : d.model;
  c.data = j.contains("data") ? j.at("data").get<SyntheticSpec>() : d.data;
}

/// Accuracy schedules of all three modalities for one step count.
struct FlowSchedules {
  AccuracySchedule torus;
  GaussianScheduleParams lattice;
  DiscreteScheduleParams atoms;

  std::size_t steps() const { return torus.steps; }

  static FlowSchedules make(AccuracySchedule torus, double sigma1_sq, double beta1, std::size_t classes) {
    const std::size_t n = torus.steps;
    FlowSchedules s{std::move(torus), {sigma1_sq, n}, {beta1, n, classes}};
    s.lattice.validate();
    s.atoms.validate();
    return s;
  }
};

/// Network input for one crystal at step i (1-based) plus the atom sender draw
/// used by the discrete loss.
struct TrainingExample {
  std::size_t step = 1;
  double t = 0.0;
  JointParamState state;
  Eigen::MatrixXd atom_draw;
};

/// Belief after i-1 updates, i.e. at t = (i-1)/n. With no torus updates yet the
/// mean is drawn uniformly, matching the sampling prior.
inline TrainingExample draw_training_example(const ToyCrystal& x, std::size_t i, const FlowSchedules& s, Rng& rng) {
  const std::size_t n = s.steps();
  if (i < 1 || i > n) throw DomainError("training example: step out of range");
  TrainingExample ex;
  ex.step = i;
  ex.t = static_cast<double>(i - 1) / static_cast<double>(n);
  ex.state.atoms = simplex_flow_sample(x.atoms, ex.t, s.atoms, rng);
  if (i == 1) {
    ex.state.torus = TorusBelief::uniform_prior(x.coords.size(), rng);
  } else {
    ex.state.torus = flow_sample_fast(x.coords, std::span<const double>(s.torus.alphas.data(), i - 1), rng);
  }
  ex.state.lattice = gauss_flow_sample(x.lattice, ex.t, s.lattice, rng);
  ex.atom_draw = sender_sample(x.atoms, discrete_alpha(i, s.atoms), static_cast<Eigen::Index>(s.atoms.classes), rng);
  return ex;
}

struct LossBreakdown {
  double atoms = 0.0;
  double torus = 0.0;
  double lattice = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    atoms += o.atoms;
    torus += o.torus;
    lattice += o.lattice;
    total += o.total;
    return *this;
  }
};

struct RecordedLoss {
  ad::Var total;
  LossBreakdown parts;
};

/// Row (1 x N K) of -|y_a - alpha (K e_j - 1)|^2 / (2 alpha K) for every slot a
/// and class j: the sender log-density up to a constant shared by all classes.
inline Eigen::RowVectorXd atom_log_gauss(const Eigen::MatrixXd& y, double alpha) {
  const Eigen::Index slots = y.rows(), classes = y.cols();
  const double kk = static_cast<double>(classes);
  Eigen::RowVectorXd out(slots * classes);
  for (Eigen::Index a = 0; a < slots; ++a) {
    const Eigen::RowVectorXd shifted = y.row(a).array() + alpha;
    const double base = shifted.squaredNorm();
    for (Eigen::Index j = 0; j < classes; ++j) {
      const double sq = base - 2.0 * alpha * kk * shifted[j] + alpha * alpha * kk * kk;
      out[a * classes + j] = -sq / (2.0 * alpha * kk);
    }
  }
  return out;
}

/// Summed discrete loss: steps * (true_term - sum logsumexp_j(log_softmax(logits)_j + log_gauss_j)),
/// where true_term is the sum of log_gauss at the true classes.
inline ad::Var record_atom_loss(ad::Tape& tape, ad::Var logits, const Eigen::MatrixXd& log_gauss,
                                Eigen::Index classes, double true_term, double steps) {
  const ad::Var logp = tape.log_softmax_groups(logits, classes);
  const ad::Var lse = tape.logsumexp_groups(tape.add(logp, tape.constant(log_gauss)), classes);
  Eigen::MatrixXd offset(1, 1);
  offset(0, 0) = steps * true_term;
  return tape.add(tape.scale(tape.sum(lse), -steps), tape.constant(offset));
}

/// Summed torus loss: sum w (1 - cos(x - x_hat)).
inline ad::Var record_torus_loss(ad::Tape& tape, ad::Var predicted, const Eigen::MatrixXd& coords,
                                 const Eigen::MatrixXd& weights) {
  const ad::Var cosd = tape.cos(tape.sub(tape.constant(coords), predicted));
  Eigen::MatrixXd total(1, 1);
  total(0, 0) = weights.sum();
  return tape.add(tape.scale(tape.weighted_sum(cosd, weights), -1.0), tape.constant(total));
}

/// Summed lattice loss: sum w (L - L_hat)^2.
inline ad::Var record_lattice_loss(ad::Tape& tape, ad::Var predicted, const Eigen::MatrixXd& target,
                                   const Eigen::MatrixXd& weights) {
  const ad::Var diff = tape.sub(tape.constant(target), predicted);
  return tape.weighted_sum(tape.mul(diff, diff), weights);
}

/// Per-example losses summed and divided by `normalizer`, recorded on the tape.
inline RecordedLoss record_loss(ad::Tape& tape, const PredictorConfig& cfg, const ParamVars& params,
                                const LossWeights& weights, const FlowSchedules& s,
                                std::span<const ToyCrystal* const> crystals, std::span<const TrainingExample> ex,
                                double normalizer) {
  if (crystals.size() != ex.size()) throw ShapeError("record_loss: crystals/examples mismatch");
  const auto rows = static_cast<Eigen::Index>(ex.size());
  const Eigen::Index slots = cfg.slots, classes = cfg.classes, dims = cfg.torus_dims, ldims = cfg.lattice_dims;
  const double n = static_cast<double>(s.steps());

  std::vector<JointParamState> states;
  std::vector<double> times;
  states.reserve(ex.size());
  for (const auto& e : ex) {
    states.push_back(e.state);
    times.push_back(e.t);
  }
  const HeadVars heads =
      forward(tape, cfg, params, make_features(cfg, states, times), torus_mean_matrix(states, cfg.torus_dims),
              lattice_mean_matrix(states, cfg.lattice_dims));

  Eigen::MatrixXd gauss(rows, slots * classes);
  Eigen::MatrixXd coords(rows, dims), torus_w(rows, dims);
  Eigen::MatrixXd lattice(rows, ldims), lattice_w(rows, ldims);
  double true_term = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const ToyCrystal& x = *crystals[r];
    const TrainingExample& e = ex[r];
    gauss.row(r) = atom_log_gauss(e.atom_draw, discrete_alpha(e.step, s.atoms));
    for (Eigen::Index a = 0; a < slots; ++a) true_term += gauss(r, a * classes + x.atoms[a].index);
    const double tw = torus_loss_weight(s.torus.alphas[e.step - 1], s.steps());
    for (Eigen::Index d = 0; d < dims; ++d) {
      coords(r, d) = x.coords[d].value();
      torus_w(r, d) = tw;
    }
    const double lw = gauss_loss_weight(e.step, s.lattice);
    for (Eigen::Index d = 0; d < ldims; ++d) {
      lattice(r, d) = x.lattice[d];
      lattice_w(r, d) = lw;
    }
  }
  const double inv = 1.0 / normalizer;
  const ad::Var atoms = tape.scale(record_atom_loss(tape, heads.atom_logits, gauss, classes, true_term, n), inv);
  const ad::Var torus = tape.scale(record_torus_loss(tape, heads.torus_raw, coords, torus_w), inv);
  const ad::Var lat = tape.scale(record_lattice_loss(tape, heads.lattice, lattice, lattice_w), inv);

  const ad::Var total = tape.add(tape.add(tape.scale(atoms, weights.atoms), tape.scale(torus, weights.torus)),
                                 tape.scale(lat, weights.lattice));
  RecordedLoss out{total, {}};
  out.parts.atoms = tape.value(atoms)(0, 0);
  out.parts.torus = tape.value(torus)(0, 0);
  out.parts.lattice = tape.value(lat)(0, 0);
  out.parts.total = tape.value(total)(0, 0);
  return out;
}

/// Loss over a batch and, if `grads` is non-null, its gradient. Work is split
/// into fixed chunks whose results are reduced in chunk order, so the result
/// does not depend on the thread count.
inline LossBreakdown batch_loss(const PredictorConfig& cfg, const PredictorParams& params, const LossWeights& weights,
                                const FlowSchedules& s, std::span<const ToyCrystal* const> crystals,
                                std::span<const TrainingExample> ex, PredictorParams* grads, int threads = 1,
                                std::size_t chunk = 64) {
  const std::size_t count = ex.size();
  if (count == 0) throw DomainError("batch_loss: empty batch");
  const std::size_t chunks = (count + chunk - 1) / chunk;
  std::vector<LossBreakdown> parts(chunks);
  std::vector<PredictorParams> chunk_grads(grads ? chunks : 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk, len = std::min(chunk, count - lo);
    ad::Tape tape;
    const ParamVars pv = record_params(tape, params, grads != nullptr);
    const RecordedLoss rl = record_loss(tape, cfg, pv, weights, s, crystals.subspan(lo, len), ex.subspan(lo, len),
                                        static_cast<double>(count));
    parts[c] = rl.parts;
    if (grads) {
      tape.backward(rl.total);
      PredictorParams& g = chunk_grads[c];
      for (const auto& w : pv.weights) g.weights.push_back(tape.grad(w));
      for (const auto& b : pv.biases) g.biases.push_back(tape.grad(b));
    }
  });
  LossBreakdown total;
  for (const auto& p : parts) total += p;
  if (grads) {
    *grads = std::move(chunk_grads[0]);
    for (std::size_t c = 1; c < chunks; ++c) {
      for (std::size_t k = 0; k < grads->tensor_count(); ++k) grads->tensor(k) += chunk_grads[c].tensor(k);
    }
  }
  return total;
}

/// Root-mean-square of the training lattice entries: the scale of the lattice
/// head's residual at t = 0, where mu^L = 0.
inline double fit_lattice_scale(const std::vector<ToyCrystal>& train) {
  if (train.empty()) throw DomainError("lattice scale: empty training set");
  double ss = 0.0;
  std::size_t count = 0;
  for (const auto& x : train) {
    ss += x.lattice.squaredNorm();
    count += static_cast<std::size_t>(x.lattice.size());
  }
  const double rms = std::sqrt(ss / static_cast<double>(count));
  return rms > 1e-12 ? rms : 1.0;
}

struct LossRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  LossBreakdown train;
  std::optional<double> validation;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, FlowSchedules schedules, std::vector<ToyCrystal> train, std::vector<ToyCrystal> validation)
      : cfg_(std::move(cfg)),
        sched_(std::move(schedules)),
        train_(std::move(train)),
        validation_(std::move(validation)),
        params_(init_from_seed()),
        opt_(params_, AdamWConfig{cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay}),
        plateau_(cfg_.lr_factor, cfg_.lr_patience, cfg_.min_lr) {
    cfg_.validate();
    if (sched_.steps() != cfg_.steps) throw DomainError("trainer: schedule step count differs from config");
    if (train_.empty() || validation_.empty()) throw DomainError("trainer: empty train or validation set");
    Rng rng = make_rng(cfg_.seed, 0x7661u);
    std::uniform_int_distribution<std::size_t> pick(1, cfg_.steps);
    for (const auto& x : validation_) {
      validation_ptrs_.push_back(&x);
      validation_ex_.push_back(draw_training_example(x, pick(rng), sched_, rng));
    }
  }

  const PredictorParams& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const FlowSchedules& schedules() const { return sched_; }
  std::size_t iteration() const { return iteration_; }
  double lr() const { return opt_.lr(); }

  /// One optimizer step on the given training indices. Example k of
  /// iteration it draws from the stream derived from (seed, it, k).
  LossBreakdown train_step(std::span<const std::size_t> indices) {
    std::vector<const ToyCrystal*> batch;
    std::vector<TrainingExample> ex(indices.size());
    for (std::size_t idx : indices) batch.push_back(&train_.at(idx));
    const std::uint64_t stream = derive_seed(cfg_.seed, iteration_ + 1);
    parallel_for(indices.size(), cfg_.threads, [&](std::size_t k) {
      Rng rng = make_rng(stream, k);
      std::uniform_int_distribution<std::size_t> pick(1, cfg_.steps);
      const std::size_t i = pick(rng);
      ex[k] = draw_training_example(*batch[k], i, sched_, rng);
    });
    PredictorParams grads;
    const LossBreakdown loss =
        batch_loss(cfg_.model, params_, cfg_.weights, sched_, batch, ex, &grads, cfg_.threads);
    if (!std::isfinite(loss.total)) {
      std::ostringstream msg;
      msg << "training diverged at iteration " << iteration_ << ": atoms=" << loss.atoms << " torus=" << loss.torus
          << " lattice=" << loss.lattice << " lr=" << opt_.lr();
      throw NumericError(msg.str());
    }
    opt_.step(params_, grads);
    ++iteration_;
    return loss;
  }

  /// Loss on the fixed validation examples (same draws at every call).
  double validation_loss() const {
    return batch_loss(cfg_.model, params_, cfg_.weights, sched_, validation_ptrs_, validation_ex_, nullptr,
                      cfg_.threads)
        .total;
  }

  /// Runs the configured epochs; `on_record` sees every logged iteration.
  std::vector<LossRecord> run(const std::function<void(const LossRecord&)>& on_record = {}) {
    std::vector<LossRecord> curve;
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t budget = total_iterations();
    for (std::size_t epoch = 0; iteration_ < budget; ++epoch) {
      Rng shuffle_rng = make_rng(derive_seed(cfg_.seed, 0x5e11u), epoch);
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (std::size_t lo = 0; lo < order.size() && iteration_ < budget; lo += cfg_.batch_size) {
        const std::size_t len = std::min(cfg_.batch_size, order.size() - lo);
        LossRecord rec;
        rec.lr = opt_.lr();
        rec.train = train_step(std::span<const std::size_t>(order.data() + lo, len));
        rec.iteration = iteration_;
        if (iteration_ % cfg_.eval_every == 0 || iteration_ == budget) {
          rec.validation = validation_loss();
          opt_.set_lr(plateau_.observe(*rec.validation, opt_.lr()));
        }
        if (on_record) on_record(rec);
        curve.push_back(rec);
      }
    }
    return curve;
  }

  std::size_t total_iterations() const {
    const std::size_t per_epoch = (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::size_t all = per_epoch * cfg_.epochs;
    return cfg_.max_iterations > 0 ? std::min(all, cfg_.max_iterations) : all;
  }

 private:
  PredictorParams init_from_seed() {
    if (cfg_.fit_lattice_scale) cfg_.model.lattice_scale = fit_lattice_scale(train_);
    Rng rng = make_rng(cfg_.seed, 0x1417u);
    return init_params(cfg_.model, rng);
  }

  TrainConfig cfg_;
  FlowSchedules sched_;
  std::vector<ToyCrystal> train_;
  std::vector<ToyCrystal> validation_;
  PredictorParams params_;
  AdamW opt_;
  PlateauScheduler plateau_;
  std::vector<const ToyCrystal*> validation_ptrs_;
  std::vector<TrainingExample> validation_ex_;
  std::size_t iteration_ = 0;
};

/// Training and validation sets drawn from the config's synthetic spec.
struct Datasets {
  std::vector<ToyCrystal> train;
  std::vector<ToyCrystal> validation;
};

inline Datasets make_datasets(const TrainConfig& cfg) {
  Rng rng = make_rng(cfg.seed, 0xda7au);
  Datasets d;
  d.train = generate_synthetic(cfg.data, cfg.train_size, rng);
  d.validation = generate_synthetic(cfg.data, cfg.validation_size, rng);
  return d;
}

}  // namespace torusbfn
