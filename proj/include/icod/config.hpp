#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icod/datagen.hpp"
#include "icod/detector.hpp"
#include "icod/incremental.hpp"
#include "icod/model.hpp"
#include "icod/trainer.hpp"

namespace icod {

inline constexpr int kConfigFormatVersion = 1;
inline constexpr int kDatasetFormatVersion = 1;

struct Scenario {
  enum class Kind { CategoryIncremental, DomainShift };
  Kind kind = Kind::CategoryIncremental;
  std::vector<int> old_classes;
  std::vector<int> new_classes;  // empty for domain shift
  double fog_intensity = 0.6;

  /// Category split old + new with ids 0..old+new-1.
  static Scenario split(int n_old, int n_new);
  static Scenario domain_shift(int n_classes, double fog_intensity);
  std::vector<int> all_classes() const;
  void validate() const;
};

std::string to_string(Scenario::Kind kind);

struct DataSizes {
  int train = 2000;
  int test = 300;
  int new_train = 1000;
  int new_test = 300;
  int workers = 1;
};

struct EvalSettings {
  double iou = 0.5;
  DetectOptions detect;
  int features_per_class = 50;
};

struct ExperimentConfig {
  Scenario scenario;
  TaskDef task;  // geometry template; class ids come from the scenario
  double rho = 0.95;
  BiasKind bias_kind = BiasKind::BackgroundColor;
  bool new_images_contain_old = false;
  DataSizes data;
  ModelConfig model;
  HyperParams hyper;
  TrainMode mode = TrainMode::Icod;
  StrategySpec strategy;
  std::vector<double> ewc_weights = {0.0, 0.01, 0.1, 0.5};
  EvalSettings eval;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir;

  void validate() const;

  TaskDef old_task() const;
  TaskDef new_task() const;
  /// Bias signatures for every class of the scenario.
  BiasConfig bias() const;
  /// Model geometry of the old task (n_classes = number of old classes).
  ModelConfig old_model() const;
};

// JSON conversions. from_json throws ConfigError naming the offending key.
nlohmann::json to_json(const TaskDef& task);
TaskDef task_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BiasConfig& bias);
BiasConfig bias_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Domain& domain);
Domain domain_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& model);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LrSchedule& lr);
LrSchedule lr_from_json(const nlohmann::json& j);
nlohmann::json to_json(const HyperParams& hyper);
HyperParams hyper_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StrategySpec& strategy);
StrategySpec strategy_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

/// Reads and validates a config file; ConfigError on any problem.
ExperimentConfig load_experiment(const std::string& path);

/// Hex SHA-256 of the canonical (sorted-key, compact) JSON dump.
std::string config_hash(const nlohmann::json& j);
std::string sha256_hex(const void* data, std::size_t size);

/// Dataset manifest: enough to regenerate every sample.
nlohmann::json dataset_manifest(const Dataset& data);
Dataset dataset_from_manifest(const nlohmann::json& j, int workers = 1);

/// Derived seeds of the per-seed datasets.
struct DatasetSeeds {
  std::uint64_t train, test, new_train, new_test;
};
DatasetSeeds dataset_seeds(std::uint64_t seed);

}  // namespace icod
