#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "icod/datagen.hpp"
#include "icod/decomposer.hpp"
#include "icod/model.hpp"

namespace icod {

struct LrSchedule {
  double initial = 1e-3;
  int drop_epoch = 8;  // 0-based epoch from which the dropped rate applies
  double drop_factor = 0.1;

  double at(int epoch) const { return epoch >= drop_epoch ? initial * drop_factor : initial; }
};

struct HyperParams {
  double alpha = 0.1;   // L1 weight on w
  double beta = 10.0;   // squared-L2 weight on b
  double gamma = 0.5;   // weight of the maximised bias-feature detection loss
  LrSchedule lr{3e-3, 8, 0.1};
  int epochs = 12;
  int batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossBreakdown {
  double l_f = 0.0;   // L_d(F, Y)
  double l_fc = 0.0;  // L_d(F_c, Y)
  double l_c = 0.0;   // l_f + l_fc
  double l_b = 0.0;   // L_d(F_b, Y), the term maximised by the decomposer
  double l_wb = 0.0;  // sparsity/scale regulariser on w and b
  double total = 0.0; // l_c + gamma * l_b + l_wb
};

struct ObjectiveResult {
  LossBreakdown loss;
  ParamSet grads;  // descent direction for every parameter
};

using Batch = std::span<const Sample* const>;

/// The adversarial objective over one batch.
///
/// Gradient routing:
///  - backbone and head descend on L_d(F) + L_d(F_c); F_b is held constant
///    inside F_c = F - r * F_b, so no decomposer gradient comes from it;
///  - the decomposer descends on L_wb and ascends on gamma * L_d(F_b);
///  - the F_b pass reaches neither the head parameters nor the backbone.
/// Throws NumericError naming the offending term on non-finite losses.
ObjectiveResult icod_objective(Batch batch, const Model& model, const HyperParams& hyper, Rng& rng,
                               RandomWeightMode mode = RandomWeightMode::Random);

/// Plain detection loss on F; decomposer gradients are zero.
ObjectiveResult baseline_objective(Batch batch, const Model& model);

class Adam {
 public:
  explicit Adam(const ParamSet& like, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Updates params[i] for every i with trainable[i]; other entries are not
  /// touched at all.
  void step(ParamSet& params, const ParamSet& grads, double lr, const std::vector<bool>& trainable);

 private:
  ParamSet m_, v_;
  std::int64_t t_ = 0;
  double beta1_, beta2_, eps_;
};

struct StepLog {
  int epoch = 0;
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

using ObjectiveFn = std::function<ObjectiveResult(Batch, const Model&, Rng&)>;

struct FitOptions {
  int epochs = 12;
  int batch_size = 16;
  LrSchedule lr{3e-3, 8, 0.1};
  std::uint64_t seed = 0;
  std::vector<bool> trainable;  // empty means everything
  std::function<void(const StepLog&)> on_step;
  std::function<void(int epoch, const Model&)> on_epoch;
};

/// Raised when the objective turns non-finite; carries the last model whose
/// parameters were all finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, Model last_finite, int step)
      : std::runtime_error(what), last_finite(std::move(last_finite)), step(step) {}
  Model last_finite;
  int step;
};

/// Seeded mini-batch loop shared by every training mode.
Model fit(Model model, const Dataset& data, const ObjectiveFn& objective, const FitOptions& options);

enum class TrainMode { Icod, Baseline };

struct TrainOptions {
  ModelConfig model;
  HyperParams hyper;
  TrainMode mode = TrainMode::Icod;
  std::function<void(const StepLog&)> on_step;
  std::function<void(int epoch, const Model&)> on_epoch;
};

/// Model::create(config, init_seed(seed)) is the shared starting point of
/// both trainers.
std::uint64_t init_seed(std::uint64_t seed);

Model train(const Dataset& data, const TrainOptions& options);
Model baseline_train(const Dataset& data, TrainOptions options);

/// Mean losses of the three feature passes over a dataset, r drawn from a
/// generator seeded with `seed`.
LossBreakdown evaluate_losses(const Model& model, const Dataset& data, const HyperParams& hyper,
                              std::uint64_t seed, RandomWeightMode mode = RandomWeightMode::Random);

}  // namespace icod
