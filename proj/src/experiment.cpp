#include "icod/experiment.hpp"

#include <algorithm>

#include "icod/errors.hpp"

namespace icod {

namespace {

void strip_classes(Dataset& data, const std::vector<int>& keep) {
  for (auto& s : data.samples) {
    std::erase_if(s.annotations, [&](const Annotation& a) {
      return std::find(keep.begin(), keep.end(), a.class_id) == keep.end();
    });
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

SeedData make_seed_data(const ExperimentConfig& config, std::uint64_t seed) {
  const DatasetSeeds seeds = dataset_seeds(seed);
  const BiasConfig bias = config.bias();
  const TaskDef old_task = config.old_task();
  const int workers = config.data.workers;
  SeedData d;
  d.train = build_dataset(old_task, bias, config.data.train, seeds.train, Domain::clear(), workers);
  d.test = build_dataset(old_task, bias, config.data.test, seeds.test, Domain::clear(), workers);
  if (config.scenario.kind == Scenario::Kind::DomainShift) {
    const Domain fog = Domain::fog(config.scenario.fog_intensity);
    d.new_train = build_dataset(old_task, bias, config.data.new_train, seeds.new_train, fog, workers);
    d.new_test = build_dataset(old_task, bias, config.data.new_test, seeds.new_test, fog, workers);
  } else {
    const TaskDef new_task = config.new_task();
    d.new_train = build_dataset(new_task, bias, config.data.new_train, seeds.new_train, Domain::clear(), workers);
    d.new_test = build_dataset(new_task, bias, config.data.new_test, seeds.new_test, Domain::clear(), workers);
    strip_classes(d.new_train, config.scenario.new_classes);
    strip_classes(d.new_test, config.scenario.new_classes);
  }
  return d;
}

Model train_old_model(const ExperimentConfig& config, const Dataset& train, TrainMode mode, std::uint64_t seed,
                      const TrainHooks& hooks) {
  TrainOptions opts;
  opts.model = config.old_model();
  opts.hyper = config.hyper;
  opts.hyper.seed = seed;
  opts.mode = mode;
  opts.on_step = hooks.on_step;
  opts.on_epoch = hooks.on_epoch;
  return icod::train(train, opts);
}

std::uint64_t incremental_seed(std::uint64_t seed) { return stable_hash(seed, 21); }

IncrementalOutcome run_incremental(const ExperimentConfig& config, const Model& old_model, const SeedData& data,
                                   StrategySpec strategy, const EWCState* ewc, const TrainHooks& hooks) {
  const auto& old_classes = config.scenario.old_classes;
  const bool shift = config.scenario.kind == Scenario::Kind::DomainShift;
  const auto& new_classes = shift ? old_classes : config.scenario.new_classes;
  strategy.new_classes = config.scenario.new_classes;

  IncrementalOutcome out;
  out.before = evaluate(model_detector(old_model, config.eval.detect), data.test, old_classes, config.eval.iou, "old");
  IncrementalOptions io{strategy, ewc, hooks.on_step, hooks.on_epoch};
  out.model = incremental_train(old_model, data.new_train, io);
  const DetectFn det = model_detector(out.model, config.eval.detect);
  out.after_old = evaluate(det, data.test, old_classes, config.eval.iou, "old");
  out.after_new = evaluate(det, data.new_test, new_classes, config.eval.iou, "new");

  EvalReport merged = out.after_old;
  if (!shift)
    for (int c : new_classes) merged.per_class_ap[c] = out.after_new.per_class_ap.at(c);
  out.report = forgetting_report(out.before, merged, old_classes, shift ? std::vector<int>{} : new_classes);
  if (shift) {
    out.report.new_map = out.after_new.map_score;
    out.report.all_map = 0.5 * (out.report.old_map_after + out.report.new_map);
  }
  return out;
}

std::vector<EwcSweepRow> ewc_sweep(const ExperimentConfig& config, const Model& old_model, const SeedData& data,
                                   const std::vector<double>& weights, std::uint64_t seed) {
  if (weights.empty()) throw ArgumentError("ewc_sweep: no weights");
  StrategySpec strategy = config.strategy;
  strategy.kind = StrategySpec::Kind::Ewc;
  strategy.seed = seed;
  strategy.new_classes = config.scenario.new_classes;
  const EWCState state = make_ewc_state(old_model, data.train, strategy);
  std::vector<EwcSweepRow> rows;
  for (double w : weights) {
    strategy.lambda = w;
    const auto out = run_incremental(config, old_model, data, strategy, &state);
    rows.push_back({w, out.report.old_map_before, out.report.old_map_after, out.report.retention, out.report.new_map});
  }
  return rows;
}

nlohmann::json to_json(const std::vector<EwcSweepRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"weight", r.weight},
                   {"old_map_before", r.old_map_before},
                   {"old_map_after", r.old_map_after},
                   {"retention", r.retention},
                   {"new_map", r.new_map}});
  return {{"rows", arr}};
}

std::string to_csv(const std::vector<EwcSweepRow>& rows) {
  std::string out = "weight,old_map_before,old_map_after,retention,new_map\n";
  for (const auto& r : rows)
    out += num(r.weight) + "," + num(r.old_map_before) + "," + num(r.old_map_after) + "," + num(r.retention) + "," +
           num(r.new_map) + "\n";
  return out;
}

}  // namespace icod
