#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "icod/decomposer.hpp"
#include "icod/detector.hpp"
#include "icod/errors.hpp"
#include "icod/eval.hpp"
#include "icod/trainer.hpp"
#include "oracles.hpp"
#include "testing.hpp"

namespace icod {
namespace {

using testing::random_decomposer_model;
using testing::is_decomposer;
using testing::RefAdam;
using testing::detector_pass;
using testing::decomposer_pass;

using testing::micro_task;
using testing::small_config;

Dataset micro_data(int n, std::uint64_t seed, double rho = 0.9) {
  return build_dataset(micro_task(3), BiasConfig::make(rho, {0, 1, 2}), n, seed);
}

std::vector<const Sample*> batch_of(const Dataset& ds) {
  std::vector<const Sample*> b;
  for (const auto& s : ds.samples) b.push_back(&s);
  return b;
}

TEST(IcodObjective, NoDecomposerTermsGiveZeroDecomposerGradient) {
  const Model m = random_decomposer_model(1);
  const Dataset ds = micro_data(3, 1);
  HyperParams h;
  h.alpha = h.beta = h.gamma = 0.0;
  Rng rng(1);
  const auto res = icod_objective(batch_of(ds), m, h, rng);
  for (const auto& g : res.grads)
    if (is_decomposer(g)) {
      for (double v : g.value.values()) EXPECT_EQ(v, 0.0) << g.name;
    }
}

TEST(IcodObjective, DetectorGradientIgnoresBiasBranchWeights) {
  const Model m = random_decomposer_model(2);
  const Dataset ds = micro_data(3, 2);
  HyperParams a, b;
  a.alpha = 0.0, a.beta = 0.0, a.gamma = 0.0;
  b.alpha = 3.0, b.beta = 7.0, b.gamma = 5.0;
  Rng ra(5), rb(5);
  const auto ga = icod_objective(batch_of(ds), m, a, ra).grads;
  const auto gb = icod_objective(batch_of(ds), m, b, rb).grads;
  for (std::size_t p = 0; p < ga.size(); ++p)
    if (!is_decomposer(ga[p])) {
      EXPECT_EQ(ga[p].value, gb[p].value) << ga[p].name;
    }
}

TEST(IcodObjective, DecomposerGradientIgnoresCausalPass) {
  const Model m = random_decomposer_model(3);
  const Dataset ds = micro_data(3, 3);
  const HyperParams h;
  Rng r1(1), r2(2), r3(3);
  const auto g_one = icod_objective(batch_of(ds), m, h, r1, RandomWeightMode::One).grads;
  const auto g_zero = icod_objective(batch_of(ds), m, h, r2, RandomWeightMode::Zero).grads;
  const auto g_rand = icod_objective(batch_of(ds), m, h, r3).grads;
  for (std::size_t p = 0; p < g_one.size(); ++p)
    if (is_decomposer(g_one[p])) {
      EXPECT_EQ(g_one[p].value, g_zero[p].value) << g_one[p].name;
      EXPECT_EQ(g_one[p].value, g_rand[p].value) << g_one[p].name;
    }
}

TEST(IcodObjective, TotalIsConsistentWithComponents) {
  const Model m = random_decomposer_model(4);
  const Dataset ds = micro_data(4, 4);
  HyperParams h;
  h.gamma = 0.7;
  Rng rng(4);
  const LossBreakdown l = icod_objective(batch_of(ds), m, h, rng).loss;
  EXPECT_NEAR(l.l_c, l.l_f + l.l_fc, 1e-12);
  EXPECT_NEAR(l.total, l.l_c + h.gamma * l.l_b + l.l_wb, 1e-6);
  EXPECT_GE(l.l_c, 0.0);
  EXPECT_GE(l.l_b, 0.0);
  EXPECT_GE(l.l_wb, 0.0);

  // Recompute every term from one forward pass with r = 1.
  double lf = 0, lfc = 0, lb = 0, lwb = 0;
  for (const auto& s : ds.samples) {
    const FeatureMap f = backbone_forward(s.image, m);
    const TargetMap t = assign_targets(s.annotations, f.data.dim(1), f.data.dim(2), f.stride, 3);
    const Tensor w = channel_weight(f.data, m), b = channel_bias(f.data, m);
    const Tensor fb = bias_feature(f.data, w, b);
    const Tensor fc = causal_feature(f.data, fb, std::vector<double>(static_cast<std::size_t>(f.data.dim(0)), 1.0));
    lf += detection_loss(head_forward(f.data, m), t).total() / 4;
    lfc += detection_loss(head_forward(fc, m), t).total() / 4;
    lb += detection_loss(head_forward(fb, m), t).total() / 4;
    lwb += reg_loss(w, b, h.alpha, h.beta).value / 4;
  }
  Rng r1(0);
  const LossBreakdown one = icod_objective(batch_of(ds), m, h, r1, RandomWeightMode::One).loss;
  EXPECT_NEAR(one.l_f, lf, 1e-9);
  EXPECT_NEAR(one.l_fc, lfc, 1e-9);
  EXPECT_NEAR(one.l_b, lb, 1e-9);
  EXPECT_NEAR(one.l_wb, lwb, 1e-9);
}

TEST(IcodObjective, NonFiniteLossNamesTerm) {
  Model m = random_decomposer_model(5);
  m.params[m.decomposer_bias(1, 1)].value.fill(std::numeric_limits<double>::infinity());
  const Dataset ds = micro_data(1, 5);
  Rng rng(1);
  try {
    icod_objective(batch_of(ds), m, HyperParams{}, rng);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("L_d(F_"), std::string::npos) << e.what();
  }
}

TEST(IcodObjective, MatchesTwoOptimizerReference) {
  const Dataset ds = micro_data(4, 6);
  HyperParams h;
  h.alpha = 0.2;
  h.beta = 0.5;
  h.gamma = 0.8;
  Model combined = random_decomposer_model(6);
  Model reference = combined;
  Adam adam(combined.params);
  RefAdam opt_m, opt_c;
  const auto batch = batch_of(ds);
  for (int step = 0; step < 5; ++step) {
    Rng rng(100 + step), rref(100 + step);
    const auto res = icod_objective(batch, combined, h, rng);
    adam.step(combined.params, res.grads, 1e-2, {});
    const auto gm = detector_pass(reference, ds, rref);
    const auto gc = decomposer_pass(reference, ds, h);
    opt_m.step(reference.params, gm, 1e-2);
    opt_c.step(reference.params, gc, 1e-2);
  }
  for (std::size_t p = 0; p < combined.params.size(); ++p)
    for (std::size_t i = 0; i < combined.params[p].value.size(); ++i)
      ASSERT_NEAR(combined.params[p].value[i], reference.params[p].value[i], 1e-6) << combined.params[p].name;
}

TEST(LrSchedule, DropsExactly) {
  const LrSchedule s{1e-3, 8, 0.1};
  EXPECT_EQ(s.at(0), 1e-3);
  EXPECT_EQ(s.at(7), 1e-3);
  EXPECT_EQ(s.at(8), 1e-3 * 0.1);
  EXPECT_EQ(s.at(11), 1e-3 * 0.1);
}

TEST(Fit, LoggedLearningRateFollowsSchedule) {
  const Dataset ds = micro_data(4, 7);
  TrainOptions opts;
  opts.model = small_config(3);
  opts.hyper.epochs = 3;
  opts.hyper.batch_size = 2;
  opts.hyper.lr = {2e-3, 2, 0.5};
  std::vector<StepLog> logs;
  opts.on_step = [&](const StepLog& s) { logs.push_back(s); };
  train(ds, opts);
  ASSERT_EQ(logs.size(), 6u);
  for (const auto& s : logs) EXPECT_EQ(s.lr, s.epoch >= 2 ? 2e-3 * 0.5 : 2e-3);
}

TEST(HyperParams, Validation) {
  HyperParams h;
  h.gamma = -1;
  EXPECT_THROW(h.validate(), ConfigError);
  h = {};
  h.lr.drop_epoch = h.epochs + 1;
  EXPECT_THROW(h.validate(), ConfigError);
  h = {};
  h.batch_size = 0;
  EXPECT_THROW(h.validate(), ConfigError);
}

TrainOptions micro_options(TrainMode mode, std::uint64_t seed) {
  TrainOptions opts;
  opts.model = small_config(3);
  opts.mode = mode;
  opts.hyper.epochs = 2;
  opts.hyper.batch_size = 4;
  opts.hyper.lr = {3e-3, 1, 0.1};
  opts.hyper.seed = seed;
  return opts;
}

TEST(Train, BitwiseDeterministic) {
  const Dataset ds = micro_data(12, 8);
  const Model a = train(ds, micro_options(TrainMode::Icod, 3));
  const Model b = train(ds, micro_options(TrainMode::Icod, 3));
  EXPECT_EQ(a.params, b.params);
  const Model c = train(ds, micro_options(TrainMode::Icod, 4));
  EXPECT_FALSE(a.params == c.params);
}

TEST(BaselineTrain, DecomposerUntouched) {
  const Dataset ds = micro_data(12, 9);
  auto opts = micro_options(TrainMode::Baseline, 5);
  opts.hyper.gamma = 9;
  opts.hyper.alpha = 9;
  const Model trained = baseline_train(ds, opts);
  const Model init = Model::create(opts.model, init_seed(5));
  for (std::size_t p = 0; p < init.params.size(); ++p) {
    if (is_decomposer(init.params[p]))
      EXPECT_EQ(trained.params[p].value, init.params[p].value);
    else
      EXPECT_NE(trained.params[p].value, init.params[p].value);
  }
}

TEST(BaselineTrain, SharesFirstBatchDetectionLossWithIcod) {
  const Dataset ds = micro_data(12, 10);
  double icod_first = -1, base_first = -1;
  auto io = micro_options(TrainMode::Icod, 6);
  io.on_step = [&](const StepLog& s) {
    if (s.step == 0) icod_first = s.loss.l_f;
  };
  auto bo = micro_options(TrainMode::Baseline, 6);
  bo.on_step = [&](const StepLog& s) {
    if (s.step == 0) base_first = s.loss.l_f;
  };
  train(ds, io);
  train(ds, bo);
  EXPECT_GT(icod_first, 0.0);
  EXPECT_EQ(icod_first, base_first);
}

TEST(Fit, DivergenceKeepsLastFiniteModel) {
  const Dataset ds = micro_data(8, 11);
  const Model start = Model::create(small_config(3), 1);
  int calls = 0;
  ObjectiveFn objective = [&](Batch b, const Model& m, Rng&) {
    if (++calls == 3) throw NumericError("non-finite L_d(F, Y)");
    return baseline_objective(b, m);
  };
  FitOptions fo;
  fo.epochs = 2;
  fo.batch_size = 2;
  try {
    fit(start, ds, objective, fo);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step, 2);
    EXPECT_TRUE(e.last_finite.params.all_finite());
    EXPECT_FALSE(e.last_finite.params == start.params);
    EXPECT_NE(std::string(e.what()).find("L_d(F, Y)"), std::string::npos);
  }
}

TEST(Fit, NonFiniteGradientIsDivergence) {
  const Dataset ds = micro_data(4, 12);
  ObjectiveFn objective = [](Batch b, const Model& m, Rng&) {
    auto res = baseline_objective(b, m);
    res.grads[0].value[0] = std::nan("");
    return res;
  };
  FitOptions fo;
  fo.epochs = 1;
  fo.batch_size = 2;
  EXPECT_THROW(fit(Model::create(small_config(3), 1), ds, objective, fo), TrainingDiverged);
}

// Micro bias task runs shared by the statistical properties below.
struct MicroRun {
  Model model;
  std::vector<double> epoch_lc;  // mean L_c per epoch
};

constexpr int kMicroEpochs = 20;

const MicroRun& micro_run(std::uint64_t seed) {
  static std::map<std::uint64_t, MicroRun> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  const Dataset ds = micro_data(160, stable_hash(seed, 11));
  TrainOptions opts;
  opts.model = small_config(3);
  opts.model.channels = {3, 8, 16};
  opts.hyper.epochs = kMicroEpochs;
  opts.hyper.batch_size = 8;
  opts.hyper.lr = {3e-3, kMicroEpochs * 2 / 3, 0.1};
  opts.hyper.seed = seed;
  MicroRun run;
  std::vector<double> sum(kMicroEpochs, 0.0);
  std::vector<int> count(kMicroEpochs, 0);
  opts.on_step = [&](const StepLog& s) {
    sum[static_cast<std::size_t>(s.epoch)] += s.loss.l_c;
    ++count[static_cast<std::size_t>(s.epoch)];
  };
  run.model = train(ds, opts);
  for (std::size_t e = 0; e < sum.size(); ++e) run.epoch_lc.push_back(sum[e] / count[e]);
  return cache.emplace(seed, std::move(run)).first->second;
}

TEST(MicroTask, CausalLossDropsByHalf) {
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto& lc = micro_run(seed).epoch_lc;
    EXPECT_LE(lc.back(), 0.5 * lc.front()) << "seed " << seed << ": " << lc.front() << " -> " << lc.back();
  }
}

TEST(MicroTask, BiasFeatureIsUselessForDetection) {
  const double floor = std::log(3.0 + 1.0) - 0.2;
  for (std::uint64_t seed : {0, 1, 2}) {
    const Dataset held_out = micro_data(40, stable_hash(seed, 12));
    const LossBreakdown l = evaluate_losses(micro_run(seed).model, held_out, HyperParams{}, 1);
    EXPECT_GT(l.l_b, l.l_fc) << "seed " << seed;
    EXPECT_GE(l.l_b, floor) << "seed " << seed;
  }
}

TEST(MicroTask, BaselineOnFullyBiasedDataReliesOnBias) {
  int wins = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const Dataset train_set = micro_data(160, stable_hash(seed, 11), 1.0);
    const Dataset test_set = micro_data(60, stable_hash(seed, 12), 1.0);
    TrainOptions opts = micro_options(TrainMode::Baseline, seed);
    opts.model.channels = {3, 8, 16};
    opts.hyper.epochs = kMicroEpochs;
    opts.hyper.batch_size = 8;
    opts.hyper.lr = {3e-3, kMicroEpochs * 2 / 3, 0.1};
    const BiasReliance br = bias_reliance(train(train_set, opts), test_set);
    wins += br.map_flipped < br.map_original;
  }
  EXPECT_GE(wins, 2);
}

}  // namespace
}  // namespace icod
