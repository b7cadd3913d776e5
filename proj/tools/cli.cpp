#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "icod/checkpoint.hpp"
#include "icod/config.hpp"
#include "icod/errors.hpp"
#include "icod/eval.hpp"
#include "icod/experiment.hpp"
#include "icod/plots.hpp"

namespace icod::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;        // train/sweep-ewc override
  std::string checkpoint;  // incremental/eval/sweep-ewc input
  std::string strategy;    // incremental override
  std::vector<std::string> reports;
  std::vector<std::string> features;
  std::vector<std::string> inputs;
  bool quiet = false;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Output {
 public:
  explicit Output(fs::path root) : root_(std::move(root)) {}

  fs::path dir(const std::string& sub = {}) const {
    const fs::path p = sub.empty() ? root_ : root_ / sub;
    fs::create_directories(p);
    return p;
  }
  void text(const fs::path& path, const std::string& body) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
    f << body;
  }
  void json_file(const fs::path& path, const json& j) const { text(path, j.dump(2) + "\n"); }

 private:
  fs::path root_;
};

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

json step_json(const StepLog& s) {
  return {{"epoch", s.epoch}, {"step", s.step},         {"lr", s.lr},         {"l_f", s.loss.l_f},
          {"l_fc", s.loss.l_fc}, {"l_c", s.loss.l_c}, {"l_b", s.loss.l_b}, {"l_wb", s.loss.l_wb},
          {"total", s.loss.total}};
}

std::string mode_name(TrainMode m) { return m == TrainMode::Icod ? "icod" : "baseline"; }

TrainMode resolve_mode(const Common& c, const ExperimentConfig& cfg) {
  if (c.mode.empty()) return cfg.mode;
  if (c.mode == "icod") return TrainMode::Icod;
  if (c.mode == "baseline") return TrainMode::Baseline;
  throw UsageError("--mode must be icod or baseline");
}

/// Config for one seed; its hash is what checkpoints record.
json seed_config(const ExperimentConfig& cfg, std::uint64_t seed, TrainMode mode) {
  ExperimentConfig one = cfg;
  one.seeds = {seed};
  one.mode = mode;
  one.output_dir.clear();
  return to_json(one);
}

struct Context {
  Common args;
  ExperimentConfig config;
  std::vector<std::uint64_t> seeds;
  Output out{"."};
  std::ostream* log = nullptr;

  void say(const std::string& msg) const {
    if (!args.quiet) *log << msg << "\n";
  }
};

/// Trains one old-task model with per-step JSON-lines log and per-epoch checkpoints.
Model train_logged(const Context& ctx, const SeedData& data, TrainMode mode, std::uint64_t seed, const fs::path& dir) {
  const std::string hash = config_hash(seed_config(ctx.config, seed, mode));
  std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
  std::int64_t steps = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) {
    log << step_json(s).dump() << "\n";
    steps = s.step + 1;
  };
  hooks.on_epoch = [&](int epoch, const Model& m) {
    std::ostringstream name;
    name << "checkpoint_epoch_" << std::setw(2) << std::setfill('0') << epoch + 1 << ".json";
    save_checkpoint(m, {steps, epoch, hash, mode_name(mode)}, (dir / name.str()).string());
    ctx.say("  epoch " + std::to_string(epoch + 1) + "/" + std::to_string(ctx.config.hyper.epochs));
  };
  try {
    Model model = train_old_model(ctx.config, data.train, mode, seed, hooks);
    save_checkpoint(model, {steps, -1, hash, mode_name(mode)}, (dir / "model.json").string());
    return model;
  } catch (const TrainingDiverged& e) {
    save_checkpoint(e.last_finite, {e.step, -1, hash, mode_name(mode)}, (dir / "last_finite.json").string());
    throw;
  }
}

void write_eval(const Context& ctx, const Model& model, const SeedData& data, std::uint64_t seed,
                const fs::path& dir) {
  const auto& cfg = ctx.config;
  const DetectFn det = model_detector(model, cfg.eval.detect);
  const EvalReport report = evaluate(det, data.test, cfg.scenario.old_classes, cfg.eval.iou, "old");
  ctx.out.json_file(dir / "eval.json", to_json(report));
  ctx.out.text(dir / "eval.csv", to_csv(report));
  if (data.test.task.class_ids.size() >= 2) {
    const BiasReliance br = bias_reliance(det, data.test);
    ctx.out.json_file(dir / "bias_reliance.json",
                      {{"map_original", br.map_original}, {"map_flipped", br.map_flipped}, {"delta", br.delta}});
    ctx.say("  mAP " + std::to_string(br.map_original) + "  flipped " + std::to_string(br.map_flipped));
  }
  const FeatureTable table = export_instance_features(model, data.test, cfg.eval.features_per_class,
                                                      {FeatureKind::F, FeatureKind::Fc, FeatureKind::Fb},
                                                      stable_hash(seed, 31));
  ctx.out.text(dir / "features.csv", to_csv(table));
  json sil = json::object();
  for (auto kind : {FeatureKind::F, FeatureKind::Fc, FeatureKind::Fb}) sil[to_string(kind)] = silhouette(table, kind);
  ctx.out.json_file(dir / "silhouette.json", sil);
}

Checkpoint require_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(c.checkpoint)) throw std::runtime_error("checkpoint '" + c.checkpoint + "' does not exist");
  return load_checkpoint(c.checkpoint);
}

std::uint64_t single_seed(const Context& ctx) { return ctx.seeds.front(); }

int cmd_gen_data(const Context& ctx) {
  for (auto seed : ctx.seeds) {
    const auto dir = ctx.out.dir(seed_dir(seed));
    const SeedData d = make_seed_data(ctx.config, seed);
    ctx.out.json_file(dir / "train.dataset.json", dataset_manifest(d.train));
    ctx.out.json_file(dir / "test.dataset.json", dataset_manifest(d.test));
    ctx.out.json_file(dir / "new_train.dataset.json", dataset_manifest(d.new_train));
    ctx.out.json_file(dir / "new_test.dataset.json", dataset_manifest(d.new_test));
    ctx.say("seed " + std::to_string(seed) + ": bias match rate " + std::to_string(bias_match_rate(d.train)));
  }
  return kExitOk;
}

int cmd_train(const Context& ctx) {
  const TrainMode mode = resolve_mode(ctx.args, ctx.config);
  for (auto seed : ctx.seeds) {
    ctx.say("train " + mode_name(mode) + " seed " + std::to_string(seed));
    const auto dir = ctx.out.dir(seed_dir(seed));
    const SeedData data = make_seed_data(ctx.config, seed);
    const Model model = train_logged(ctx, data, mode, seed, dir);
    write_eval(ctx, model, data, seed, dir);
  }
  return kExitOk;
}

int cmd_incremental(const Context& ctx) {
  const Checkpoint old = require_checkpoint(ctx.args);
  const std::uint64_t seed = single_seed(ctx);
  const SeedData data = make_seed_data(ctx.config, seed);
  StrategySpec strategy = ctx.config.strategy;
  if (!ctx.args.strategy.empty()) strategy.kind = strategy_kind_from_string(ctx.args.strategy);
  strategy.seed = incremental_seed(seed);

  const auto dir = ctx.out.dir();
  std::optional<EWCState> ewc;
  if (strategy.kind == StrategySpec::Kind::Ewc) {
    ewc = make_ewc_state(old.model, data.train, strategy);
    save_ewc_state(*ewc, (dir / "ewc_state.json").string());
  }
  std::ofstream log(dir / "incremental_log.jsonl", std::ios::trunc);
  std::int64_t steps = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) {
    log << step_json(s).dump() << "\n";
    steps = s.step + 1;
  };
  const auto out = run_incremental(ctx.config, old.model, data, strategy, ewc ? &*ewc : nullptr, hooks);
  json cfg = seed_config(ctx.config, seed, ctx.config.mode);
  save_checkpoint(out.model, {steps, -1, config_hash(cfg), to_string(strategy.kind)}, (dir / "model.json").string());
  ctx.out.json_file(dir / "forgetting.json", to_json(out.report));
  ctx.out.text(dir / "forgetting.csv", to_csv(out.report));
  ctx.say("old mAP " + std::to_string(out.report.old_map_before) + " -> " + std::to_string(out.report.old_map_after) +
          ", new mAP " + std::to_string(out.report.new_map));
  return kExitOk;
}

int cmd_eval(const Context& ctx) {
  const Checkpoint ck = require_checkpoint(ctx.args);
  const std::uint64_t seed = single_seed(ctx);
  const SeedData data = make_seed_data(ctx.config, seed);
  const auto dir = ctx.out.dir();
  if (ck.model.config.n_classes == static_cast<int>(ctx.config.scenario.old_classes.size())) {
    write_eval(ctx, ck.model, data, seed, dir);
    return kExitOk;
  }
  // Extended model: score old and new tasks separately.
  const DetectFn det = model_detector(ck.model, ctx.config.eval.detect);
  const auto old_report = evaluate(det, data.test, ctx.config.scenario.old_classes, ctx.config.eval.iou, "old");
  const auto new_report = evaluate(det, data.new_test, ctx.config.scenario.new_classes, ctx.config.eval.iou, "new");
  ctx.out.json_file(dir / "eval_old.json", to_json(old_report));
  ctx.out.text(dir / "eval_old.csv", to_csv(old_report));
  ctx.out.json_file(dir / "eval_new.json", to_json(new_report));
  ctx.out.text(dir / "eval_new.csv", to_csv(new_report));
  return kExitOk;
}

int cmd_report(const Context& ctx) {
  if (ctx.args.inputs.empty()) throw UsageError("report needs at least one --input report");
  json rows = json::array();
  std::string csv = "name,kind,old_map_before,old_map_after,retention,new_map,map\n";
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (const auto& path : ctx.args.inputs) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report '" + path + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError("'" + path + "' is not valid JSON: " + e.what());
    }
    const fs::path parent = fs::path(path).parent_path();
    std::string name = parent.filename().string() + "/" + fs::path(path).stem().string();
    if (parent.has_parent_path() && !parent.parent_path().filename().empty())
      name = parent.parent_path().filename().string() + "/" + name;
    if (j.contains("retention")) {
      const auto r = forgetting_report_from_json(j);
      rows.push_back({{"name", name}, {"kind", "forgetting"}, {"old_map_before", r.old_map_before},
                      {"old_map_after", r.old_map_after}, {"retention", r.retention}, {"new_map", r.new_map}});
      csv += name + ",forgetting," + num(r.old_map_before) + "," + num(r.old_map_after) + "," + num(r.retention) +
             "," + num(r.new_map) + ",\n";
    } else {
      const auto r = eval_report_from_json(j);
      rows.push_back({{"name", name}, {"kind", "eval"}, {"map", r.map_score}});
      csv += name + ",eval,,,,," + num(r.map_score) + "\n";
    }
  }
  const auto dir = ctx.out.dir();
  ctx.out.json_file(dir / "summary.json", {{"rows", rows}});
  ctx.out.text(dir / "summary.csv", csv);
  return kExitOk;
}

int cmd_sweep_ewc(const Context& ctx) {
  std::optional<Checkpoint> given;
  if (!ctx.args.checkpoint.empty()) given = require_checkpoint(ctx.args);
  const TrainMode mode = resolve_mode(ctx.args, ctx.config);
  for (auto seed : ctx.seeds) {
    const auto dir = ctx.out.dir(seed_dir(seed));
    const SeedData data = make_seed_data(ctx.config, seed);
    Model old = given ? given->model : train_logged(ctx, data, mode, seed, dir);
    const auto rows = ewc_sweep(ctx.config, old, data, ctx.config.ewc_weights, incremental_seed(seed));
    ctx.out.json_file(dir / "ewc_sweep.json", to_json(rows));
    ctx.out.text(dir / "ewc_sweep.csv", to_csv(rows));
    for (const auto& r : rows)
      ctx.say("seed " + std::to_string(seed) + " weight " + std::to_string(r.weight) + ": retention " +
              std::to_string(r.retention) + ", new mAP " + std::to_string(r.new_map));
  }
  return kExitOk;
}

int cmd_plot(const Context& ctx) {
  PlotInputs in{ctx.args.reports, ctx.args.features};
  if (in.forgetting_reports.empty() && in.feature_tables.empty())
    throw UsageError("plot needs --report and/or --features inputs");
  const auto files = emit_plots(in, ctx.out.dir().string(), [&](const std::string& m) { *ctx.log << m << "\n"; });
  for (const auto& f : files) ctx.say(f);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Incremental causal object detection on synthetic biased scenes", "icod"};
  app.require_subcommand(1);
  Common c;

  struct Spec {
    const char* name;
    const char* help;
    int (*fn)(const Context&);
  };
  const Spec specs[] = {
      {"gen-data", "Write dataset manifests for every seed", cmd_gen_data},
      {"train", "Train the old-task model (ICOD or baseline) and evaluate it", cmd_train},
      {"incremental", "Run the configured incremental strategy from a checkpoint", cmd_incremental},
      {"eval", "Evaluate a checkpoint: mAP, bias reliance, feature export", cmd_eval},
      {"report", "Summarise eval/forgetting reports into one table", cmd_report},
      {"sweep-ewc", "Run EWC once per configured weight", cmd_sweep_ewc},
      {"plot", "Render SVG scatter plots and per-class AP bar charts", cmd_plot},
  };
  std::map<CLI::App*, int (*)(const Context&)> handlers;
  for (const auto& s : specs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", c.config_path, "Experiment config (JSON)")->required();
    sub->add_option("--seed", c.seed, "Run only this seed instead of the config's seed list");
    sub->add_option("--out", c.out, "Output directory (default: $ICOD_OUT_DIR)");
    sub->add_flag("--quiet", c.quiet, "Suppress progress messages");
    const std::string name = s.name;
    if (name == "train" || name == "sweep-ewc") sub->add_option("--mode", c.mode, "Override the config mode (icod|baseline)");
    if (name == "incremental" || name == "eval" || name == "sweep-ewc")
      sub->add_option("--checkpoint", c.checkpoint, "Model checkpoint manifest");
    if (name == "incremental")
      sub->add_option("--strategy", c.strategy, "Override the config strategy (finetune|freeze_backbone|ewc)");
    if (name == "report") sub->add_option("--input", c.inputs, "Report JSON file (repeatable)");
    if (name == "plot") {
      sub->add_option("--report", c.reports, "Forgetting report JSON (repeatable)");
      sub->add_option("--features", c.features, "Feature table CSV (repeatable)");
    }
    handlers[sub] = s.fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  CLI::App* chosen = app.get_subcommands().front();
  Context ctx;
  ctx.args = c;
  ctx.log = &err;
  try {
    ctx.config = load_experiment(c.config_path);
    std::string root = c.out;
    if (root.empty())
      if (const char* env = std::getenv("ICOD_OUT_DIR")) root = env;
    if (root.empty()) root = ctx.config.output_dir;
    if (root.empty()) throw UsageError("no output directory: pass --out or set ICOD_OUT_DIR");
    ctx.out = Output(root);
    ctx.seeds = c.seed ? std::vector<std::uint64_t>{*c.seed} : ctx.config.seeds;
    if (c.mode.size()) resolve_mode(c, ctx.config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << chosen->help();
    return kExitConfig;
  }

  try {
    return handlers.at(chosen)(ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << chosen->help();
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace icod::cli
