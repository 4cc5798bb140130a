// torusbfn command-line tool: schedules, flow simulation, training, sampling
// and evaluation. Exit codes: 0 success, 1 runtime failure, 2 invalid input.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "torusbfn/torusbfn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace torusbfn;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = "run";
  std::optional<int> threads;
  std::string cache_dir;
  std::optional<int> hidden;
  std::optional<int> layers;
  std::string entropy_cond;

  fs::path out() const { return out_dir; }
  fs::path cache() const { return cache_dir.empty() ? out() / "schedule_cache" : fs::path(cache_dir); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Root seed (overrides the config)");
  cmd->add_option("--config", c.config, "TrainConfig JSON file")->check(CLI::ExistingFile);
  cmd->add_option("--out-dir", c.out_dir, "Run directory")->capture_default_str();
  cmd->add_option("--threads", c.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  cmd->add_option("--schedule-cache-dir", c.cache_dir, "Schedule cache directory (default <out-dir>/schedule_cache)");
  cmd->add_option("--hidden", c.hidden, "Predictor hidden width")->check(CLI::PositiveNumber);
  cmd->add_option("--layers", c.layers, "Predictor hidden layer count")->check(CLI::PositiveNumber);
  cmd->add_option("--entropy-cond", c.entropy_cond, "Entropy conditioning of the predictor")
      ->check(CLI::IsMember({"on", "off"}));
}

/// Defaults, then the config file, then command-line overrides.
TrainConfig resolve_config(const Common& c, const fs::path& fallback = {}) {
  try {
    TrainConfig cfg;
    if (!c.config.empty()) {
      cfg = read_json(c.config).get<TrainConfig>();
    } else if (!fallback.empty() && fs::exists(fallback)) {
      cfg = read_json(fallback).get<TrainConfig>();
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    if (c.hidden) cfg.model.hidden = *c.hidden;
    if (c.layers) cfg.model.layers = *c.layers;
    if (!c.entropy_cond.empty()) cfg.model.entropy_conditioning = c.entropy_cond == "on";
    cfg.resolve();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

/// Written before any computation and again with the finish time.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args, const Common& c, json config)
      : path_(c.out() / "manifest.json") {
    data_ = {{"command", std::move(command)},
             {"args", args},
             {"config", std::move(config)},
             {"seed", c.seed ? json(*c.seed) : json(nullptr)},
             {"tool_version", kVersion},
             {"started_at", utc_now()},
             {"finished_at", nullptr}};
    write_json(path_, data_);
  }
  void set_seed(std::uint64_t seed) { data_["seed"] = seed; write_json(path_, data_); }
  void finish() {
    data_["finished_at"] = utc_now();
    write_json(path_, data_);
  }

 private:
  fs::path path_;
  json data_;
};

void log_record(const std::string& tag, const LossRecord& r) {
  if (!r.validation) return;
  std::cerr << tag << "iteration " << r.iteration << " lr " << r.lr << " train " << r.train.total << " validation "
            << *r.validation << '\n';
}

int run(const std::vector<std::string>& args);

int dispatch(CLI::App& app, const std::vector<std::string>& args) {
  Common common;

  auto* schedule_cmd = app.add_subcommand("schedule", "Solve the von Mises accuracy schedule and export it as CSV");
  std::optional<double> c_final;
  std::optional<std::size_t> steps;
  std::optional<double> tol;
  std::string out_file;
  schedule_cmd->add_option("--c-final", c_final, "Final concentration (default from config)");
  schedule_cmd->add_option("--steps", steps, "Number of steps n (default from config)");
  schedule_cmd->add_option("--tol", tol, "Bisection tolerance (default from config)");
  schedule_cmd->add_option("--out", out_file, "CSV path (default <out-dir>/schedule.csv)");
  add_common(schedule_cmd, common);

  auto* simulate_cmd = app.add_subcommand("simulate", "Simulate torus flow trajectories (m, c) per step");
  std::string mode = "fast";
  double x_frac = 0.3;
  std::size_t trajectories = 1000;
  simulate_cmd->add_option("--mode", mode, "fast or iterated")->check(CLI::IsMember({"fast", "iterated"}))
      ->capture_default_str();
  simulate_cmd->add_option("--x", x_frac, "Data point as a fraction in [0,1)")->capture_default_str();
  simulate_cmd->add_option("--c-final", c_final, "Final concentration (default from config)");
  simulate_cmd->add_option("--steps", steps, "Number of steps n (default from config)");
  simulate_cmd->add_option("--trajectories", trajectories, "Number of trajectories")->capture_default_str();
  simulate_cmd->add_option("--out", out_file, "CSV path (default <out-dir>/trajectories.csv)");
  add_common(simulate_cmd, common);

  auto* nonadd_cmd = app.add_subcommand("nonadditivity", "Two-step versus one-step accumulated concentration");
  double alpha_a = 5.0, alpha_b = 5.0;
  std::size_t trials = 100000, bins = 32;
  nonadd_cmd->add_option("--alpha-a", alpha_a, "First accuracy")->capture_default_str();
  nonadd_cmd->add_option("--alpha-b", alpha_b, "Second accuracy")->capture_default_str();
  nonadd_cmd->add_option("--x", x_frac, "Data point as a fraction in [0,1)")->capture_default_str();
  nonadd_cmd->add_option("--trials", trials, "Monte Carlo trials")->capture_default_str();
  nonadd_cmd->add_option("--bins", bins, "Histogram bins")->capture_default_str();
  add_common(nonadd_cmd, common);

  auto* train_cmd = app.add_subcommand("train", "Train the joint predictor on synthetic data");
  std::optional<std::size_t> epochs, max_iterations;
  train_cmd->add_option("--epochs", epochs, "Epochs (default from config)");
  train_cmd->add_option("--max-iterations", max_iterations, "Stop after this many optimizer steps");
  train_cmd->add_option("--steps", steps, "Number of steps n (default from config)");
  add_common(train_cmd, common);

  auto* sample_cmd = app.add_subcommand("sample", "Sample crystals from a checkpoint and evaluate them");
  std::string checkpoint;
  std::optional<std::size_t> nfe;
  std::size_t count = 10000;
  sample_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (default <out-dir>/checkpoints/model.json)");
  sample_cmd->add_option("--nfe", nfe, "Network evaluations, i.e. sampling steps (default: training steps)");
  sample_cmd->add_option("--count", count, "Number of samples")->capture_default_str();
  add_common(sample_cmd, common);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a samples CSV against the reference spec");
  std::string samples_file;
  eval_cmd->add_option("--samples", samples_file, "Samples CSV")->required()->check(CLI::ExistingFile);
  add_common(eval_cmd, common);

  auto* generate_cmd = app.add_subcommand("generate", "Draw crystals directly from the synthetic spec");
  generate_cmd->add_option("--count", count, "Number of crystals")->capture_default_str();
  add_common(generate_cmd, common);

  auto* ablate_cmd = app.add_subcommand("ablate", "Entropy-conditioning ablation: train both variants and compare");
  std::size_t few_steps = 10;
  ablate_cmd->add_option("--count", count, "Samples per evaluation")->capture_default_str();
  ablate_cmd->add_option("--few-steps", few_steps, "Step count of the few-step evaluation")->capture_default_str();
  ablate_cmd->add_option("--epochs", epochs, "Epochs (default from config)");
  ablate_cmd->add_option("--max-iterations", max_iterations, "Stop after this many optimizer steps");
  add_common(ablate_cmd, common);

  auto* replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  std::string manifest_file, replay_out;
  replay_cmd->add_option("manifest", manifest_file, "manifest.json of the run")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--out-dir", replay_out, "Run directory of the replay")->required();

  app.require_subcommand(1);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  app.parse(reversed);

  if (*replay_cmd) {
    json m;
    try {
      m = read_json(manifest_file);
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    std::vector<std::string> again;
    const auto recorded = m.at("args").get<std::vector<std::string>>();
    for (std::size_t k = 0; k < recorded.size(); ++k) {
      if (recorded[k] == "--out-dir") {
        ++k;
        continue;
      }
      if (recorded[k].rfind("--out-dir=", 0) == 0) continue;
      again.push_back(recorded[k]);
    }
    again.push_back("--out-dir");
    again.push_back(replay_out);
    return run(again);
  }

  const std::string name = app.get_subcommands().front()->get_name();

  if (*schedule_cmd) {
    TrainConfig cfg = resolve_config(common);
    const double c = c_final.value_or(cfg.c_final);
    const std::size_t n = steps.value_or(cfg.steps);
    const double t = tol.value_or(cfg.schedule_tol);
    if (!(c > 0.0) || n < 1 || !(t > 0.0)) throw ConfigError("schedule: need c-final > 0, steps >= 1, tol > 0");
    Manifest manifest(name, args, common, {{"c_final", c}, {"steps", n}, {"tol", t}});
    bool solved = false;
    const auto s = load_or_solve_schedule(common.cache(), c, n, t, &solved);
    std::cerr << (solved ? "solved schedule" : "loaded schedule from cache") << '\n';
    const fs::path path = out_file.empty() ? common.out() / "schedule.csv" : fs::path(out_file);
    auto out = open_for_write(path);
    out << "i,t,alpha,c_target,entropy\n";
    for (std::size_t i = 1; i <= n; ++i) {
      out << i << ',' << static_cast<double>(i) / static_cast<double>(n) << ',' << s.alphas[i - 1] << ','
          << s.c_targets[i - 1] << ',' << entropy(s.c_targets[i - 1]) << '\n';
    }
    manifest.finish();
    return 0;
  }

  if (*simulate_cmd) {
    TrainConfig cfg = resolve_config(common);
    const double c = c_final.value_or(cfg.c_final);
    const std::size_t n = steps.value_or(cfg.steps);
    if (!(c > 0.0)) throw ConfigError("simulate: c-final must be positive");
    if (!(x_frac >= 0.0 && x_frac < 1.0)) throw ConfigError("simulate: --x must lie in [0,1)");
    Manifest manifest(name, args, common,
                      {{"mode", mode}, {"x", x_frac}, {"c_final", c}, {"steps", n}, {"trajectories", trajectories}});
    manifest.set_seed(cfg.seed);
    std::vector<double> alphas;
    if (n > 0) alphas = load_or_solve_schedule(common.cache(), c, n, cfg.schedule_tol).alphas;
    const std::vector<Angle> x{frac_to_angle(x_frac)};
    const FlowMode fm = parse_flow_mode(mode);
    std::vector<std::vector<TorusBelief>> traj(trajectories);
    parallel_for(trajectories, cfg.threads, [&](std::size_t k) {
      Rng rng = make_rng(cfg.seed, k);
      traj[k] = flow_trajectory(x, alphas, fm, rng);
    });
    const fs::path path = out_file.empty() ? common.out() / "trajectories.csv" : fs::path(out_file);
    auto out = open_for_write(path);
    out << "trajectory,step,t,m,c\n";
    for (std::size_t k = 0; k < trajectories; ++k) {
      for (std::size_t i = 0; i < traj[k].size(); ++i) {
        const double t = n > 0 ? static_cast<double>(i) / static_cast<double>(n) : 0.0;
        out << k << ',' << i << ',' << t << ',' << traj[k][i].mean[0].value() << ',' << traj[k][i].concentration[0]
            << '\n';
      }
    }
    manifest.finish();
    return 0;
  }

  if (*nonadd_cmd) {
    TrainConfig cfg = resolve_config(common);
    if (!(x_frac >= 0.0 && x_frac < 1.0)) throw ConfigError("nonadditivity: --x must lie in [0,1)");
    if (!(alpha_a > 0.0) || !(alpha_b >= 0.0) || trials < 2 || bins < 1) {
      throw ConfigError("nonadditivity: need alpha-a > 0, alpha-b >= 0, trials >= 2, bins >= 1");
    }
    Manifest manifest(name, args, common,
                      {{"alpha_a", alpha_a}, {"alpha_b", alpha_b}, {"x", x_frac}, {"trials", trials}, {"bins", bins}});
    manifest.set_seed(cfg.seed);
    Rng rng = make_rng(cfg.seed, 0);
    const auto rep = demonstrate_nonadditivity(frac_to_angle(x_frac), alpha_a, alpha_b, trials, rng, bins);
    write_json(common.out() / "nonadditivity.json", rep.to_json());
    std::cout << rep.to_json().dump(2) << '\n';
    manifest.finish();
    return 0;
  }

  if (*train_cmd) {
    TrainConfig cfg = resolve_config(common);
    try {
      if (epochs) cfg.epochs = *epochs;
      if (max_iterations) cfg.max_iterations = *max_iterations;
      if (steps) cfg.steps = *steps;
      cfg.resolve();
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    Manifest manifest(name, args, common, cfg);
    manifest.set_seed(cfg.seed);
    const auto model = train_model(cfg, common.cache(), [](const LossRecord& r) { log_record("", r); });
    write_json(common.out() / "config.json", model.config);
    save_checkpoint(common.out() / "checkpoints" / "model.json", model.config.model, model.params);
    write_loss_curve_csv(common.out() / "loss_curve.csv", model.curve);
    std::cerr << "final validation loss " << model.final_validation << '\n';
    manifest.finish();
    return 0;
  }

  if (*sample_cmd) {
    const fs::path ckpt = checkpoint.empty() ? common.out() / "checkpoints" / "model.json" : fs::path(checkpoint);
    if (!fs::exists(ckpt)) throw ConfigError("sample: checkpoint not found: " + ckpt.string());
    TrainConfig cfg = resolve_config(common, ckpt.parent_path().parent_path() / "config.json");
    Checkpoint loaded;
    try {
      loaded = load_checkpoint(ckpt);
    } catch (const json::exception& e) {
      throw ConfigError(ckpt.string() + ": " + e.what());
    } catch (const DomainError& e) {
      throw ConfigError(ckpt.string() + ": " + e.what());
    }
    const auto& m = loaded.config;
    if (m.slots != cfg.model.slots || m.classes != cfg.model.classes || m.torus_dims != cfg.model.torus_dims ||
        m.lattice_dims != cfg.model.lattice_dims) {
      throw ConfigError("sample: checkpoint shapes do not match the config's data spec");
    }
    cfg.model = m;
    const std::size_t n = nfe.value_or(cfg.steps);
    if (n < 1) throw ConfigError("sample: --nfe must be >= 1");
    json recorded = cfg;
    recorded["nfe"] = n;
    recorded["count"] = count;
    recorded["checkpoint"] = ckpt.string();
    Manifest manifest(name, args, common, recorded);
    manifest.set_seed(cfg.seed);
    const auto samples = sample_model(cfg, loaded.params, n, count, derive_seed(cfg.seed, 0x5a4du), common.cache());
    write_samples_csv(common.out() / "samples.csv", samples);
    json metrics = evaluate(samples, cfg.data).to_json();
    metrics["nfe"] = n;
    write_json(common.out() / "metrics.json", metrics);
    std::cout << metrics.dump(2) << '\n';
    manifest.finish();
    return 0;
  }

  if (*eval_cmd) {
    TrainConfig cfg = resolve_config(common);
    Manifest manifest(name, args, common, cfg);
    manifest.set_seed(cfg.seed);
    const auto samples = read_samples_csv(samples_file);
    const json metrics = evaluate(samples, cfg.data).to_json();
    write_json(common.out() / "metrics.json", metrics);
    std::cout << metrics.dump(2) << '\n';
    manifest.finish();
    return 0;
  }

  if (*generate_cmd) {
    TrainConfig cfg = resolve_config(common);
    Manifest manifest(name, args, common, cfg);
    manifest.set_seed(cfg.seed);
    Rng rng = make_rng(cfg.seed, 0x9e7u);
    write_samples_csv(common.out() / "samples.csv", generate_synthetic(cfg.data, count, rng));
    manifest.finish();
    return 0;
  }

  if (*ablate_cmd) {
    TrainConfig cfg = resolve_config(common);
    try {
      if (epochs) cfg.epochs = *epochs;
      if (max_iterations) cfg.max_iterations = *max_iterations;
      cfg.resolve();
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    if (few_steps < 1) throw ConfigError("ablate: --few-steps must be >= 1");
    json recorded = cfg;
    recorded["few_steps"] = few_steps;
    recorded["count"] = count;
    Manifest manifest(name, args, common, recorded);
    manifest.set_seed(cfg.seed);
    const auto result = run_ablation(cfg, common.cache(), count, derive_seed(cfg.seed, 0x5a4du), few_steps,
                                     [](const std::string& tag, const LossRecord& r) { log_record(tag + ": ", r); });
    for (const auto& row : result.rows) {
      save_checkpoint(common.out() / "checkpoints" / (row.name + ".json"), row.model.config.model, row.model.params);
      write_loss_curve_csv(common.out() / ("loss_curve_" + row.name + ".csv"), row.model.curve);
    }
    write_json(common.out() / "config.json", cfg);
    write_json(common.out() / "metrics.json", result.to_json());
    std::cout << result.to_json()["ablation"].dump(2) << '\n';
    manifest.finish();
    return 0;
  }
  return 2;
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Periodic Bayesian flow networks on the torus: schedules, flows, training and sampling"};
  app.set_version_flag("--version", kVersion);
  try {
    return dispatch(app, args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}
