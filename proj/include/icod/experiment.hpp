#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icod/config.hpp"
#include "icod/eval.hpp"
#include "icod/incremental.hpp"
#include "icod/trainer.hpp"

namespace icod {

/// The four datasets of one seed. For category-incremental scenarios the
/// new-task sets hold only new-class annotations; for domain shift they are
/// the old classes rendered in fog.
struct SeedData {
  Dataset train, test, new_train, new_test;
};

SeedData make_seed_data(const ExperimentConfig& config, std::uint64_t seed);

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(int epoch, const Model&)> on_epoch;
};

/// Trains the old-task model of `config` in `mode` with hyper.seed = seed.
Model train_old_model(const ExperimentConfig& config, const Dataset& train, TrainMode mode, std::uint64_t seed,
                      const TrainHooks& hooks = {});

struct IncrementalOutcome {
  Model model;
  EvalReport before;     // old model, old test set, old classes
  EvalReport after_old;  // new model, old test set, old classes
  EvalReport after_new;  // new model, new test set, new-task classes
  ForgettingReport report;
};

/// Evaluates `old_model`, runs `strategy` on the new task and scores both
/// tasks. For domain shift, report.new_map is the mAP on the fog test set.
IncrementalOutcome run_incremental(const ExperimentConfig& config, const Model& old_model, const SeedData& data,
                                   StrategySpec strategy, const EWCState* ewc = nullptr,
                                   const TrainHooks& hooks = {});

struct EwcSweepRow {
  double weight = 0.0;
  double old_map_before = 0.0;
  double old_map_after = 0.0;
  double retention = 0.0;
  double new_map = 0.0;
};

/// One EWC run per weight from the same old model and Fisher estimate.
std::vector<EwcSweepRow> ewc_sweep(const ExperimentConfig& config, const Model& old_model, const SeedData& data,
                                   const std::vector<double>& weights, std::uint64_t seed);

nlohmann::json to_json(const std::vector<EwcSweepRow>& rows);
std::string to_csv(const std::vector<EwcSweepRow>& rows);

/// Seed of the incremental stage derived from the experiment seed.
std::uint64_t incremental_seed(std::uint64_t seed);

}  // namespace icod
