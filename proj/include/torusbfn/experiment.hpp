#pragma once

// End-to-end runs shared by the command-line tool and the acceptance harness.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "torusbfn/evaluate.hpp"
#include "torusbfn/sampling.hpp"
#include "torusbfn/schedule.hpp"
#include "torusbfn/training.hpp"

namespace torusbfn {

inline constexpr const char* kVersion = "0.1.0";

/// Schedules for `steps` transitions under the config's flow parameters. An
/// empty cache directory solves without caching.
inline FlowSchedules flow_schedules(const TrainConfig& cfg, std::size_t steps, const std::filesystem::path& cache_dir) {
  const AccuracySchedule torus = cache_dir.empty()
                                     ? solve_vm_schedule(cfg.c_final, steps, cfg.schedule_tol)
                                     : load_or_solve_schedule(cache_dir, cfg.c_final, steps, cfg.schedule_tol);
  return FlowSchedules::make(torus, cfg.sigma1_sq, cfg.beta1, static_cast<std::size_t>(cfg.data.classes));
}

struct TrainedModel {
  TrainConfig config;  // includes the fitted lattice scale
  PredictorParams params;
  std::vector<LossRecord> curve;
  double final_validation = 0.0;
};

inline TrainedModel train_model(const TrainConfig& cfg, const std::filesystem::path& cache_dir,
                                const std::function<void(const LossRecord&)>& on_record = {}) {
  const Datasets data = make_datasets(cfg);
  Trainer trainer(cfg, flow_schedules(cfg, cfg.steps, cache_dir), data.train, data.validation);
  TrainedModel m;
  m.curve = trainer.run(on_record);
  m.config = trainer.config();
  m.params = trainer.params();
  m.final_validation = trainer.validation_loss();
  return m;
}

/// Samples with `nfe` network evaluations; the network itself is unchanged.
inline std::vector<ToyCrystal> sample_model(const TrainConfig& cfg, const PredictorParams& params, std::size_t nfe,
                                            std::size_t count, std::uint64_t seed,
                                            const std::filesystem::path& cache_dir) {
  return sample(cfg.model, params, flow_schedules(cfg, nfe, cache_dir), count, seed, cfg.threads);
}

struct AblationRow {
  std::string name;
  bool entropy_conditioning = true;
  double final_validation = 0.0;
  Metrics few_step;
  Metrics full_step;
  TrainedModel model;
};

struct AblationResult {
  std::size_t few_steps = 10;
  std::size_t full_steps = 50;
  std::vector<AblationRow> rows;  // entropy-conditioned first

  nlohmann::json to_json() const {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& r : rows) {
      table.push_back({{"model", r.name},
                       {"entropy_conditioning", r.entropy_conditioning},
                       {"final_validation_loss", r.final_validation},
                       {"histogram_kl_few_step", r.few_step.mean_histogram_kl()},
                       {"histogram_kl_full_step", r.full_step.mean_histogram_kl()},
                       {"metrics_few_step", r.few_step.to_json()},
                       {"metrics_full_step", r.full_step.to_json()}});
    }
    return {{"few_steps", few_steps}, {"full_steps", full_steps}, {"ablation", table}};
  }
};

/// Trains the entropy-conditioned and time-only models under identical seeds
/// and budgets, then evaluates both at `few_steps` and at the training step count.
inline AblationResult run_ablation(const TrainConfig& base, const std::filesystem::path& cache_dir,
                                   std::size_t sample_count, std::uint64_t sample_seed, std::size_t few_steps = 10,
                                   const std::function<void(const std::string&, const LossRecord&)>& on_record = {}) {
  AblationResult result;
  result.few_steps = few_steps;
  result.full_steps = base.steps;
  for (bool on : {true, false}) {
    TrainConfig cfg = base;
    cfg.model.entropy_conditioning = on;
    AblationRow row;
    row.name = on ? "entropy_on" : "entropy_off";
    row.entropy_conditioning = on;
    row.model = train_model(cfg, cache_dir, [&](const LossRecord& r) {
      if (on_record) on_record(row.name, r);
    });
    row.final_validation = row.model.final_validation;
    const TrainConfig& c = row.model.config;
    row.few_step = evaluate(sample_model(c, row.model.params, few_steps, sample_count, sample_seed, cache_dir), c.data);
    row.full_step = evaluate(sample_model(c, row.model.params, c.steps, sample_count, sample_seed, cache_dir), c.data);
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace torusbfn
