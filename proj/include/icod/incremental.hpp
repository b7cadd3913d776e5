#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "icod/datagen.hpp"
#include "icod/model.hpp"
#include "icod/rng.hpp"
#include "icod/trainer.hpp"

namespace icod {

/// Which parameters the EWC penalty anchors.
enum class EwcScope { BackboneDecomposer, All };

std::string to_string(EwcScope scope);
EwcScope ewc_scope_from_string(const std::string& name);

struct EWCState {
  ParamSet theta_star;
  ParamSet fisher;  // same layout as theta_star, element-wise >= 0
  double lambda = 0.0;
  EwcScope scope = EwcScope::BackboneDecomposer;

  /// Throws ArgumentError on layout mismatch, negative or non-finite entries.
  void validate() const;
  bool penalizes(const Param& p) const;
};

/// Per-example gradient of the loss whose Fisher diagonal is wanted.
using SampleGradFn = std::function<ParamSet(std::size_t index)>;

/// Empirical Fisher diagonal: mean over n_samples draws of the squared
/// per-example gradient. Draws walk seeded permutations of the examples, so
/// n_samples == n_data visits each example once.
ParamSet compute_fisher(const SampleGradFn& grad, std::size_t n_data, int n_samples, Rng& rng);

/// Fisher of L_d(F, Y) for `model` over `data`.
ParamSet compute_fisher(const Model& model, const Dataset& data, int n_samples, Rng& rng);

/// (lambda / 2) * sum_i fisher_i (theta_i - theta*_i)^2 over penalized params.
double ewc_penalty(const ParamSet& theta, const EWCState& state);

/// Adds the gradient of ewc_penalty to `grads`.
void add_ewc_gradient(const ParamSet& theta, const EWCState& state, ParamSet& grads);

/// Small-init std of new class rows.
inline constexpr double kNewRowStd = 0.01;

/// Inserts n_new class rows in front of the background row. Existing class
/// rows, the background row and the box rows keep their values.
Model extend_head(const Model& model, int n_new, Rng& rng);

/// Same row insertion on a parameter-shaped array set; new entries are `fill`.
ParamSet extend_head_params(const ParamSet& params, const Model& layout, int n_new, double fill);

struct StrategySpec {
  enum class Kind { Finetune, FreezeBackbone, Ewc };
  Kind kind = Kind::Finetune;
  double lambda = 0.0;
  EwcScope scope = EwcScope::BackboneDecomposer;
  int fisher_samples = 200;
  int epochs = 12;
  int batch_size = 16;
  LrSchedule lr{1e-3, 8, 0.1};
  std::vector<int> new_classes;  // empty for domain shift
  std::uint64_t seed = 0;

  void validate() const;
};

std::string to_string(StrategySpec::Kind kind);
StrategySpec::Kind strategy_kind_from_string(const std::string& name);

struct IncrementalOptions {
  StrategySpec strategy;
  const EWCState* ewc = nullptr;  // required when kind is Ewc
  std::function<void(const StepLog&)> on_step;
  std::function<void(int epoch, const Model&)> on_epoch;
};

/// Seed of the new-row initialisation used by incremental_train.
std::uint64_t extension_seed(std::uint64_t seed);

/// Trains `old_model` on new-task data with L_d(F, Y), after extending the
/// head by strategy.new_classes.size() rows. freeze_backbone leaves the
/// backbone and decomposer bit-identical; ewc adds the penalty.
Model incremental_train(const Model& old_model, const Dataset& new_data, const IncrementalOptions& options);

/// Builds the EWC state for `old_model` from its own training data.
EWCState make_ewc_state(const Model& old_model, const Dataset& old_data, const StrategySpec& strategy);

}  // namespace icod
