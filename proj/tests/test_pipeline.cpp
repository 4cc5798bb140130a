#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <random>

#include "support.hpp"

using namespace torusbfn;

namespace {

const FlowSchedules& schedules(std::size_t n) {
  static std::map<std::size_t, FlowSchedules> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    it = cache.emplace(n, FlowSchedules::make(solve_vm_schedule(1000.0, n), 0.001, 3.0, 4)).first;
  }
  return it->second;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.train_size = 512;
  cfg.validation_size = 128;
  cfg.batch_size = 64;
  cfg.max_iterations = 12;
  cfg.eval_every = 5;
  cfg.model.hidden = 16;
  cfg.resolve();
  return cfg;
}

ToyCrystal target_crystal() {
  return {{OneHot{1}, OneHot{3}, OneHot{0}, OneHot{2}}, {Angle(0.9), Angle(-2.6)}, Eigen::Vector3d(1.2, -0.4, 2.2)};
}

// Always proposes the target crystal; remembers the states seen at each step.
struct TargetStub {
  ToyCrystal target;
  std::shared_ptr<std::vector<std::vector<JointParamState>>> seen = std::make_shared<std::vector<std::vector<JointParamState>>>();
  std::shared_ptr<std::vector<double>> times_seen = std::make_shared<std::vector<double>>();

  Prediction operator()(std::span<const JointParamState> states, std::span<const double> times) const {
    seen->emplace_back(states.begin(), states.end());
    times_seen->push_back(times.front());
    const auto rows = static_cast<Eigen::Index>(states.size());
    Prediction p{Eigen::MatrixXd::Zero(rows, 16), Eigen::MatrixXd(rows, 2), Eigen::MatrixXd(rows, 3)};
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (int a = 0; a < 4; ++a) p.atom_logits(r, a * 4 + target.atoms[a].index) = 60.0;
      for (int d = 0; d < 2; ++d) p.torus(r, d) = target.coords[d].value();
      p.lattice.row(r) = target.lattice.transpose();
    }
    return p;
  }
};

}  // namespace

TEST(Synthetic, SingleComponentCircularVariance) {
  SyntheticSpec spec = SyntheticSpec::default_spec();
  spec.components = {{1.0, {0.7, -1.0}, 50.0, {0.25, 0.25, 0.25, 0.25}}};
  Rng rng = make_rng(1, 0);
  const auto xs = generate_synthetic(spec, 100000, rng);
  for (int d = 0; d < 2; ++d) {
    std::vector<double> v;
    for (const auto& x : xs) v.push_back(x.coords[d].value());
    double m, r;
    oracle::circular_moments(v, m, r);
    const double expected = 1.0 - static_cast<double>(oracle::i1_series(50.0L) / oracle::i0_series(50.0L));
    EXPECT_NEAR((1.0 - r) / expected, 1.0, 0.01);
  }
}

TEST(Synthetic, ZeroWeightComponentNeverAppears) {
  SyntheticSpec spec = SyntheticSpec::default_spec();
  spec.components[0].weight = 1.0;
  spec.components[1].weight = 0.0;
  Rng rng = make_rng(2, 0);
  std::vector<std::size_t> comp;
  generate_synthetic(spec, 10000, rng, &comp);
  EXPECT_TRUE(std::all_of(comp.begin(), comp.end(), [](std::size_t c) { return c == 0; }));
}

TEST(Synthetic, ClassModeJointFrequencies) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng rng = make_rng(3, 0);
  std::vector<std::size_t> comp;
  const auto xs = generate_synthetic(spec, 50000, rng, &comp);
  std::vector<double> joint(2 * 4, 0.0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (const auto& a : xs[k].atoms) joint[comp[k] * 4 + a.index] += 1.0 / (xs.size() * 4.0);
  }
  for (std::size_t j = 0; j < 2; ++j) {
    for (int c = 0; c < 4; ++c) {
      EXPECT_NEAR(joint[j * 4 + c], spec.components[j].weight * spec.components[j].class_probs[c], 0.02);
    }
  }
}

TEST(Synthetic, DeterministicAndValidated) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng a = make_rng(4, 0), b = make_rng(4, 0);
  const auto xa = generate_synthetic(spec, 100, a), xb = generate_synthetic(spec, 100, b);
  for (std::size_t k = 0; k < 100; ++k) {
    EXPECT_EQ(xa[k].coords, xb[k].coords);
    EXPECT_EQ(xa[k].atoms, xb[k].atoms);
    EXPECT_EQ(xa[k].lattice, xb[k].lattice);
  }
  SyntheticSpec bad = spec;
  bad.components[0].weight = 0.7;
  EXPECT_THROW(bad.validate(), DomainError);
  bad = spec;
  bad.components[1].class_probs = {0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(bad.validate(), DomainError);
  const SyntheticSpec back = nlohmann::json(spec).get<SyntheticSpec>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(spec));
}

TEST(Evaluate, SelfConsistency) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng rng = make_rng(5, 0);
  const auto xs = generate_synthetic(spec, 20000, rng);
  const auto m = evaluate(xs, spec);
  for (double kl : m.histogram_kl) EXPECT_LE(kl, 0.02);
  EXPECT_LE(m.atom_tv, 0.02);
  EXPECT_LE(m.energy_distance, 0.01);
  EXPECT_GE(m.class_mode_agreement, 0.9);
  EXPECT_EQ(m.samples, 20000u);
}

TEST(Evaluate, ReferenceBinsAreNormalized) {
  const auto p = reference_bin_probabilities(SyntheticSpec::default_spec(), 0);
  EXPECT_EQ(p.size(), kHistogramBins);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  // A single component has its bin masses from the numeric density.
  SyntheticSpec one = SyntheticSpec::default_spec();
  one.components = {{1.0, {0.3, 0.3}, 4.0, {0.25, 0.25, 0.25, 0.25}}};
  const auto q = reference_bin_probabilities(one, 0);
  const oracle::NumericVonMises ref(0.3, 4.0);
  for (std::size_t b = 0; b < kHistogramBins; b += 7) {
    const double lo = -kPi + b * kTwoPi / kHistogramBins, hi = lo + kTwoPi / kHistogramBins;
    EXPECT_NEAR(q[b], oracle::simpson([&](double x) { return std::exp(ref.log_pdf(x)); }, lo, hi, 201), 1e-6);
  }
}

TEST(Evaluate, ConstantSamplesAreWorse) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng rng = make_rng(6, 0);
  const auto good = evaluate(generate_synthetic(spec, 5000, rng), spec);
  std::vector<ToyCrystal> constant(5000, target_crystal());
  const auto bad = evaluate(constant, spec);
  EXPECT_GT(bad.max_histogram_kl(), good.max_histogram_kl());
  EXPECT_GT(bad.energy_distance, good.energy_distance);
  EXPECT_GT(bad.atom_tv, good.atom_tv);
}

TEST(Evaluate, PermutationInvariant) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng rng = make_rng(7, 0);
  auto xs = generate_synthetic(spec, 3000, rng);
  const auto a = evaluate(xs, spec);
  std::mt19937_64 gen(7);
  std::shuffle(xs.begin(), xs.end(), gen);
  const auto b = evaluate(xs, spec);
  EXPECT_EQ(a.histogram_kl, b.histogram_kl);
  EXPECT_EQ(a.atom_tv, b.atom_tv);
  EXPECT_EQ(a.class_mode_agreement, b.class_mode_agreement);
  EXPECT_NEAR(a.energy_distance, b.energy_distance, 1e-12);
}

TEST(Evaluate, Errors) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng rng = make_rng(8, 0);
  auto xs = generate_synthetic(spec, 999, rng);
  EXPECT_THROW(evaluate(xs, spec), DomainError);
  xs = generate_synthetic(spec, 1000, rng);
  xs[3].coords.pop_back();
  EXPECT_THROW(evaluate(xs, spec), ShapeError);
}

TEST(Evaluate, EnergyDistanceMatchesDirectSum) {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> n;
  std::vector<Eigen::VectorXd> a, b;
  for (int k = 0; k < 30; ++k) a.push_back(Eigen::Vector2d(n(gen), n(gen)));
  for (int k = 0; k < 40; ++k) b.push_back(Eigen::Vector2d(n(gen) + 1, n(gen)));
  double xy = 0, xx = 0, yy = 0;
  for (auto& x : a)
    for (auto& y : b) xy += (x - y).norm();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if (i != j) xx += (a[i] - a[j]).norm();
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (i != j) yy += (b[i] - b[j]).norm();
  const double expected = 2 * xy / (30.0 * 40.0) - xx / (30.0 * 29.0) - yy / (40.0 * 39.0);
  EXPECT_NEAR(energy_distance(a, b), expected, 1e-12);
}

TEST(TrainingLoss, PerfectPredictionCollapsesLosses) {
  const auto& s = schedules(10);
  const ToyCrystal x = target_crystal();
  Rng rng = make_rng(10, 0);
  SimplexBelief onehot{Eigen::MatrixXd::Zero(4, 4)};
  for (int a = 0; a < 4; ++a) onehot.theta(a, x.atoms[a].index) = 1.0;
  for (std::size_t i = 1; i <= 10; ++i) {
    EXPECT_EQ(torus_loss(x.coords, x.coords, s.torus.alphas[i - 1], 10), 0.0);
    EXPECT_EQ(gauss_loss(x.lattice, x.lattice, i, s.lattice), 0.0);
    EXPECT_NEAR(simplex_loss(x.atoms, onehot, i, s.atoms, rng), 0.0, 1e-12);
  }
}

TEST(TrainingLoss, RandomInitIsFiniteAndPositive) {
  auto cfg = small_config();
  const auto data = make_datasets(cfg);
  Trainer tr(cfg, schedules(10), data.train, data.validation);
  std::vector<std::size_t> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  const auto loss = tr.train_step(idx);
  EXPECT_TRUE(std::isfinite(loss.total));
  EXPECT_GT(loss.total, 0.0);
  EXPECT_GT(loss.atoms, 0.0);
  EXPECT_GT(loss.torus, 0.0);
  EXPECT_GT(loss.lattice, 0.0);
}

TEST(TrainingLoss, TotalIsWeightedSumOfParts) {
  auto cfg = small_config();
  cfg.weights = {0.3, 0.05, 0.011};
  const auto data = make_datasets(cfg);
  Trainer tr(cfg, schedules(10), data.train, data.validation);
  std::vector<std::size_t> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < 3; ++k) {
    const auto l = tr.train_step(idx);
    EXPECT_NEAR(l.total, 0.3 * l.atoms + 0.05 * l.torus + 0.011 * l.lattice, 1e-12 * std::abs(l.total));
  }
}

TEST(TrainingExample, FirstStepIsPrior) {
  const auto& s = schedules(10);
  Rng rng = make_rng(11, 0);
  const auto ex = draw_training_example(target_crystal(), 1, s, rng);
  EXPECT_EQ(ex.t, 0.0);
  EXPECT_EQ(ex.state.torus.concentration, std::vector<double>(2, 0.0));
  EXPECT_LE((ex.state.atoms.theta.array() - 0.25).abs().maxCoeff(), 1e-15);
  EXPECT_EQ(ex.state.lattice.mean, Eigen::VectorXd::Zero(3));
  const auto later = draw_training_example(target_crystal(), 7, s, rng);
  EXPECT_EQ(later.t, 0.6);
  EXPECT_GT(later.state.torus.concentration[0], 0.0);
  EXPECT_THROW(draw_training_example(target_crystal(), 11, s, rng), DomainError);
}

TEST(Trainer, DeterministicAcrossRunsAndThreads) {
  auto cfg = small_config();
  const auto data = make_datasets(cfg);
  auto run = [&](int threads) {
    TrainConfig c = cfg;
    c.threads = threads;
    Trainer tr(c, schedules(10), data.train, data.validation);
    auto curve = tr.run();
    return std::make_pair(curve, tr.params());
  };
  const auto [a, pa] = run(1);
  const auto [b, pb] = run(1);
  const auto [c, pc] = run(3);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].train.total, b[k].train.total);
    EXPECT_EQ(a[k].train.total, c[k].train.total);
    EXPECT_EQ(a[k].validation, c[k].validation);
  }
  for (std::size_t k = 0; k < pa.tensor_count(); ++k) {
    EXPECT_EQ(pa.tensor(k), pb.tensor(k));
    EXPECT_EQ(pa.tensor(k), pc.tensor(k));
  }
  EXPECT_TRUE(a[4].validation.has_value());
  EXPECT_FALSE(a[3].validation.has_value());
  EXPECT_TRUE(a.back().validation.has_value());
}

TEST(Trainer, ShortRunHalvesLoss) {
  TrainConfig cfg;
  cfg.max_iterations = 2000;
  cfg.resolve();
  const auto data = make_datasets(cfg);
  Trainer tr(cfg, schedules(50), data.train, data.validation);
  const auto curve = tr.run();
  double first = 0.0, last = 0.0;
  for (std::size_t k = 0; k < 100; ++k) first += curve[k].train.total / 100.0;
  for (std::size_t k = curve.size() - 100; k < curve.size(); ++k) last += curve[k].train.total / 100.0;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Trainer, RejectsMismatchedSchedule) {
  auto cfg = small_config();
  const auto data = make_datasets(cfg);
  EXPECT_THROW(Trainer(cfg, schedules(50), data.train, data.validation), DomainError);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.model.hidden = 17;
  cfg.resolve();
  const TrainConfig back = nlohmann::json(cfg).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(cfg));
  EXPECT_THROW(nlohmann::json({{"stepz", 3}}).get<TrainConfig>(), DomainError);
  TrainConfig bad = cfg;
  bad.sigma1_sq = 1.5;
  EXPECT_THROW(bad.validate(), DomainError);
  bad = cfg;
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), DomainError);
}

TEST(Sampling, TargetStubConverges) {
  const auto& s = schedules(10);
  const TargetStub stub{target_crystal()};
  const auto out = sample_with(stub, CrystalShape{}, s, 500, 21);
  const ToyCrystal x = target_crystal();
  for (const auto& y : out) {
    EXPECT_EQ(y.atoms, x.atoms);
    EXPECT_EQ(y.coords, x.coords);
    EXPECT_EQ(y.lattice, x.lattice);
  }
  // The beliefs behind the last proposal have moved onto the target.
  const auto& last = stub.seen->back();
  double dist_f = 0.0, dist_l = 0.0, theta_true = 0.0;
  for (const auto& st : last) {
    for (int d = 0; d < 2; ++d) dist_f += circular_distance(st.torus.mean[d].value(), x.coords[d].value()) / (2.0 * last.size());
    dist_l += (st.lattice.mean - x.lattice).norm() / last.size();
    for (int a = 0; a < 4; ++a) theta_true += st.atoms.theta(a, x.atoms[a].index) / (4.0 * last.size());
  }
  // Perfect predictions make the atom beliefs follow the flow marginal at t = 0.9.
  Rng rng = make_rng(21, 1);
  double flow_true = 0.0;
  for (int k = 0; k < 4000; ++k) {
    const auto b = simplex_flow_sample(x.atoms, 0.9, s.atoms, rng);
    for (int a = 0; a < 4; ++a) flow_true += b.theta(a, x.atoms[a].index) / 16000.0;
  }
  EXPECT_NEAR(theta_true, flow_true, 0.05);
  EXPECT_GT(theta_true, 0.25);
  // E|error| <= sqrt(E error^2) with the belief precision after n - 1 updates.
  EXPECT_LT(dist_f, 1.5 / std::sqrt(s.torus.c_targets[8]));
  EXPECT_LT(dist_l, 1.1 * std::sqrt(3.0 / gaussian_precision(9, s.lattice)));
}

TEST(Sampling, PriorStateAtFirstStep) {
  const auto& s = schedules(10);
  const TargetStub stub{target_crystal()};
  sample_with(stub, CrystalShape{}, s, 40, 22);
  ASSERT_EQ(stub.seen->size(), 10u);
  EXPECT_EQ(stub.times_seen->front(), 0.0);
  EXPECT_NEAR(stub.times_seen->back(), 0.9, 1e-15);
  for (const auto& st : stub.seen->front()) {
    EXPECT_EQ(st.torus.concentration, std::vector<double>(2, 0.0));
    EXPECT_LE((st.atoms.theta.array() - 0.25).abs().maxCoeff(), 0.0);
    EXPECT_EQ(st.lattice.mean, Eigen::VectorXd::Zero(3));
  }
}

TEST(Sampling, SingleStepIsOneShotPrediction) {
  const auto s1 = FlowSchedules::make(solve_vm_schedule(1000.0, 1), 0.001, 3.0, 4);
  PredictorConfig cfg;
  cfg.hidden = 16;
  Rng rng = make_rng(23, 0);
  auto params = init_params(cfg, rng);
  for (Eigen::Index j = 0; j < params.weights.back().size(); ++j) params.weights.back()(j) = 0.3 * standard_normal(rng);
  const auto out = sample(cfg, params, s1, 20, 99);
  for (std::size_t k = 0; k < out.size(); ++k) {
    Rng r = make_rng(99, k);
    const std::vector<JointParamState> st{JointParamState::prior(4, 4, 2, 3, r)};
    const std::vector<double> t{0.0};
    const auto p = predict(cfg, params, st, t);
    for (int d = 0; d < 2; ++d) EXPECT_LE(std::abs(oracle::angle_diff(out[k].coords[d].value(), p.torus(0, d))), 1e-12);
    EXPECT_LE((out[k].lattice - p.lattice.row(0).transpose()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sampling, DeterministicAcrossThreads) {
  const auto& s = schedules(10);
  PredictorConfig cfg;
  cfg.hidden = 16;
  Rng rng = make_rng(24, 0);
  auto params = init_params(cfg, rng);
  for (Eigen::Index j = 0; j < params.weights.back().size(); ++j) params.weights.back()(j) = 0.3 * standard_normal(rng);
  const auto a = sample(cfg, params, s, 600, 5, 1);
  const auto b = sample(cfg, params, s, 600, 5, 3);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].atoms, b[k].atoms);
    EXPECT_EQ(a[k].coords, b[k].coords);
    EXPECT_EQ(a[k].lattice, b[k].lattice);
  }
}

TEST(Equivariance, ShiftedChainPathwise) {
  const auto stub = support::ShiftStub::make(31);
  std::mt19937_64 gen(31);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (int k = 0; k < 5; ++k) EXPECT_LE(support::shift_chain_error(stub, schedules(10).torus, u(gen), 20, 31 + k), 1e-12);
}

// With a uniform prior the sample law of an equivariant predictor equals its own shift.
TEST(Equivariance, ShiftedChainHistogram) {
  const auto stub = support::ShiftStub::make(32);
  const double t = 1.3;
  const CrystalShape shape{1, 2, 2, 1};
  const auto a = sample_with(stub, shape, schedules(10), 20000, 41);
  const auto b = sample_with(stub, shape, schedules(10), 20000, 42);
  EXPECT_LE(support::shifted_histogram_kl(a, b, t), 0.02);
}

TEST(Io, SamplesCsvRoundTrip) {
  const SyntheticSpec spec = SyntheticSpec::default_spec();
  Rng rng = make_rng(51, 0);
  const auto xs = generate_synthetic(spec, 50, rng);
  const auto path = std::filesystem::temp_directory_path() / "torusbfn_samples_test.csv";
  write_samples_csv(path, xs);
  const auto back = read_samples_csv(path);
  ASSERT_EQ(back.size(), xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    EXPECT_EQ(back[k].atoms, xs[k].atoms);
    for (int d = 0; d < 2; ++d) EXPECT_NEAR(oracle::angle_diff(back[k].coords[d].value(), xs[k].coords[d].value()), 0.0, 1e-14);
    EXPECT_EQ(back[k].lattice, xs[k].lattice);
  }
  std::filesystem::remove(path);
}
