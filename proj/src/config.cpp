#include "icod/config.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "icod/errors.hpp"
#include "icod/rng.hpp"

namespace icod {

using nlohmann::json;

namespace {

// Reads j[key] into a T when present; keeps `fallback` otherwise.
template <typename T>
T opt(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename T>
T req(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing key '") + key + "'");
  return opt<T>(j, key, T{});
}

void require_object(const json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
}

// Rejects keys outside `allowed` so that typos do not silently fall back.
void known_keys(const json& j, const char* what, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; }))
      throw ConfigError(std::string("unknown key '") + key + "' in " + what);
  }
}

}  // namespace

Scenario Scenario::split(int n_old, int n_new) {
  Scenario s;
  s.old_classes.resize(static_cast<std::size_t>(n_old));
  s.new_classes.resize(static_cast<std::size_t>(n_new));
  std::iota(s.old_classes.begin(), s.old_classes.end(), 0);
  std::iota(s.new_classes.begin(), s.new_classes.end(), n_old);
  return s;
}

Scenario Scenario::domain_shift(int n_classes, double fog_intensity) {
  Scenario s;
  s.kind = Kind::DomainShift;
  s.old_classes.resize(static_cast<std::size_t>(n_classes));
  std::iota(s.old_classes.begin(), s.old_classes.end(), 0);
  s.fog_intensity = fog_intensity;
  return s;
}

std::vector<int> Scenario::all_classes() const {
  auto all = old_classes;
  all.insert(all.end(), new_classes.begin(), new_classes.end());
  return all;
}

void Scenario::validate() const {
  if (old_classes.empty()) throw ConfigError("scenario needs at least one old class");
  // Class ids double as head rows, so old and new classes must tile 0..n-1.
  const auto all = all_classes();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i] != static_cast<int>(i)) {
      const std::set<int> old(old_classes.begin(), old_classes.end());
      for (int c : new_classes)
        if (old.contains(c)) throw ConfigError("class " + std::to_string(c) + " is both old and new");
      throw ConfigError("old classes followed by new classes must be 0..n-1 in order");
    }
  }
  if (kind == Kind::CategoryIncremental && new_classes.empty())
    throw ConfigError("category_incremental scenario needs new classes");
  if (kind == Kind::DomainShift) {
    if (!new_classes.empty()) throw ConfigError("domain_shift scenario takes no new classes");
    if (!(fog_intensity > 0.0 && fog_intensity <= 1.0)) throw ConfigError("fog_intensity must lie in (0, 1]");
  }
}

std::string to_string(Scenario::Kind kind) {
  return kind == Scenario::Kind::DomainShift ? "domain_shift" : "category_incremental";
}

void ExperimentConfig::validate() const {
  scenario.validate();
  old_task().validate();
  if (!scenario.new_classes.empty()) new_task().validate();
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (data.train < 1 || data.test < 1 || data.new_train < 1 || data.new_test < 1)
    throw ConfigError("dataset sizes must be >= 1");
  if (data.workers < 1) throw ConfigError("workers must be >= 1");
  old_model().validate();
  hyper.validate();
  strategy.validate();
  for (double w : ewc_weights)
    if (!(w >= 0)) throw ConfigError("ewc weights must be >= 0");
  if (!(eval.iou > 0 && eval.iou <= 1)) throw ConfigError("eval iou must lie in (0, 1]");
  if (eval.features_per_class < 1) throw ConfigError("features_per_class must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (model.channels.empty() || model.channels.front() != 3) throw ConfigError("model channels must start at 3");
}

TaskDef ExperimentConfig::old_task() const {
  TaskDef t = TaskDef::make(task.task_id.empty() ? "old" : task.task_id, scenario.old_classes);
  t.image_size = task.image_size;
  t.min_objects = task.min_objects;
  t.max_objects = task.max_objects;
  t.min_scale = task.min_scale;
  t.max_scale = task.max_scale;
  for (const auto& [c, shape] : task.shapes) t.shapes[c] = shape;
  return t;
}

TaskDef ExperimentConfig::new_task() const {
  TaskDef t = old_task();
  t.task_id = (task.task_id.empty() ? "task" : task.task_id) + "-new";
  if (scenario.kind == Scenario::Kind::DomainShift) return t;
  t.class_ids = new_images_contain_old ? scenario.all_classes() : scenario.new_classes;
  for (int c : t.class_ids)
    if (!t.shapes.contains(c)) t.shapes[c] = TaskDef::make("", {c}).shapes.at(c);
  return t;
}

BiasConfig ExperimentConfig::bias() const { return BiasConfig::make(rho, scenario.all_classes(), bias_kind); }

ModelConfig ExperimentConfig::old_model() const {
  ModelConfig m = model;
  m.n_classes = static_cast<int>(scenario.old_classes.size());
  return m;
}

json to_json(const TaskDef& task) {
  json shapes = json::object();
  for (const auto& [c, s] : task.shapes) shapes[std::to_string(c)] = to_string(s);
  return {{"task_id", task.task_id},       {"class_ids", task.class_ids}, {"image_size", task.image_size},
          {"min_objects", task.min_objects}, {"max_objects", task.max_objects}, {"min_scale", task.min_scale},
          {"max_scale", task.max_scale},   {"shapes", shapes}};
}

TaskDef task_from_json(const json& j) {
  require_object(j, "task");
  known_keys(j, "task",
             {"task_id", "class_ids", "image_size", "min_objects", "max_objects", "min_scale", "max_scale", "shapes"});
  TaskDef t = TaskDef::make(opt<std::string>(j, "task_id", ""), opt<std::vector<int>>(j, "class_ids", {}));
  t.image_size = opt(j, "image_size", t.image_size);
  t.min_objects = opt(j, "min_objects", t.min_objects);
  t.max_objects = opt(j, "max_objects", t.max_objects);
  t.min_scale = opt(j, "min_scale", t.min_scale);
  t.max_scale = opt(j, "max_scale", t.max_scale);
  if (j.contains("shapes")) {
    require_object(j["shapes"], "task.shapes");
    for (const auto& [key, value] : j["shapes"].items()) {
      try {
        t.shapes[std::stoi(key)] = shape_from_string(value.get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError("bad shape entry '" + key + "': " + e.what());
      }
    }
  }
  return t;
}

json to_json(const BiasConfig& bias) {
  json sig = json::object();
  for (const auto& [c, color] : bias.signatures) sig[std::to_string(c)] = color;
  return {{"rho", bias.rho}, {"kind", to_string(bias.kind)}, {"signatures", sig}};
}

BiasConfig bias_from_json(const json& j) {
  require_object(j, "bias");
  known_keys(j, "bias", {"rho", "kind", "signatures"});
  BiasConfig b;
  b.rho = req<double>(j, "rho");
  try {
    b.kind = bias_kind_from_string(opt<std::string>(j, "kind", "background_color"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bias.kind: ") + e.what());
  }
  const json sig = opt<json>(j, "signatures", json::object());
  require_object(sig, "bias.signatures");
  for (const auto& [key, value] : sig.items()) {
    try {
      b.signatures[std::stoi(key)] = value.get<Color>();
    } catch (const std::exception& e) {
      throw ConfigError("bad bias signature '" + key + "': " + e.what());
    }
  }
  return b;
}

json to_json(const Domain& domain) {
  return {{"kind", domain.kind == Domain::Kind::Fog ? "fog" : "clear"}, {"intensity", domain.intensity}};
}

Domain domain_from_json(const json& j) {
  require_object(j, "domain");
  const auto kind = req<std::string>(j, "kind");
  if (kind == "clear") return Domain::clear();
  if (kind == "fog") return Domain::fog(req<double>(j, "intensity"));
  throw ConfigError("unknown domain kind '" + kind + "'");
}

json to_json(const ModelConfig& model) {
  return {{"n_classes", model.n_classes}, {"channels", model.channels}, {"kernel", model.kernel}};
}

ModelConfig model_config_from_json(const json& j) {
  require_object(j, "model");
  known_keys(j, "model", {"n_classes", "channels", "kernel"});
  ModelConfig m;
  m.n_classes = opt(j, "n_classes", m.n_classes);
  m.channels = opt(j, "channels", m.channels);
  m.kernel = opt(j, "kernel", m.kernel);
  return m;
}

json to_json(const LrSchedule& lr) {
  return {{"initial", lr.initial}, {"drop_epoch", lr.drop_epoch}, {"drop_factor", lr.drop_factor}};
}

LrSchedule lr_from_json(const json& j) {
  require_object(j, "lr");
  known_keys(j, "lr", {"initial", "drop_epoch", "drop_factor"});
  LrSchedule lr;
  lr.initial = opt(j, "initial", lr.initial);
  lr.drop_epoch = opt(j, "drop_epoch", lr.drop_epoch);
  lr.drop_factor = opt(j, "drop_factor", lr.drop_factor);
  return lr;
}

json to_json(const HyperParams& h) {
  return {{"alpha", h.alpha},   {"beta", h.beta},     {"gamma", h.gamma},
          {"lr", to_json(h.lr)}, {"epochs", h.epochs}, {"batch_size", h.batch_size}};
}

HyperParams hyper_from_json(const json& j) {
  require_object(j, "hyper");
  known_keys(j, "hyper", {"alpha", "beta", "gamma", "lr", "epochs", "batch_size"});
  HyperParams h;
  h.alpha = opt(j, "alpha", h.alpha);
  h.beta = opt(j, "beta", h.beta);
  h.gamma = opt(j, "gamma", h.gamma);
  if (j.contains("lr")) h.lr = lr_from_json(j["lr"]);
  h.epochs = opt(j, "epochs", h.epochs);
  h.batch_size = opt(j, "batch_size", h.batch_size);
  return h;
}

json to_json(const StrategySpec& s) {
  return {{"kind", to_string(s.kind)},
          {"lambda", s.lambda},
          {"scope", to_string(s.scope)},
          {"fisher_samples", s.fisher_samples},
          {"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"lr", to_json(s.lr)}};
}

StrategySpec strategy_from_json(const json& j) {
  require_object(j, "strategy");
  known_keys(j, "strategy", {"kind", "lambda", "scope", "fisher_samples", "epochs", "batch_size", "lr"});
  StrategySpec s;
  s.kind = strategy_kind_from_string(opt<std::string>(j, "kind", "finetune"));
  s.lambda = opt(j, "lambda", s.lambda);
  s.scope = ewc_scope_from_string(opt<std::string>(j, "scope", to_string(s.scope)));
  s.fisher_samples = opt(j, "fisher_samples", s.fisher_samples);
  s.epochs = opt(j, "epochs", s.epochs);
  s.batch_size = opt(j, "batch_size", s.batch_size);
  if (j.contains("lr")) s.lr = lr_from_json(j["lr"]);
  return s;
}

json to_json(const ExperimentConfig& c) {
  json scenario = {{"kind", to_string(c.scenario.kind)}, {"old_classes", c.scenario.old_classes}};
  if (c.scenario.kind == Scenario::Kind::DomainShift)
    scenario["fog_intensity"] = c.scenario.fog_intensity;
  else
    scenario["new_classes"] = c.scenario.new_classes;
  json task = to_json(c.task);
  task.erase("class_ids");
  return {{"format_version", kConfigFormatVersion},
          {"scenario", scenario},
          {"task", task},
          {"bias", {{"rho", c.rho}, {"kind", to_string(c.bias_kind)}}},
          {"new_images_contain_old", c.new_images_contain_old},
          {"data",
           {{"train", c.data.train},
            {"test", c.data.test},
            {"new_train", c.data.new_train},
            {"new_test", c.data.new_test},
            {"workers", c.data.workers}}},
          {"model", {{"channels", c.model.channels}, {"kernel", c.model.kernel}}},
          {"hyper", to_json(c.hyper)},
          {"mode", c.mode == TrainMode::Icod ? "icod" : "baseline"},
          {"strategy", to_json(c.strategy)},
          {"ewc_weights", c.ewc_weights},
          {"eval",
           {{"iou", c.eval.iou},
            {"score_thresh", c.eval.detect.score_thresh},
            {"nms_iou", c.eval.detect.nms_iou},
            {"features_per_class", c.eval.features_per_class}}},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const json& j) {
  require_object(j, "config");
  known_keys(j, "config",
             {"format_version", "scenario", "task", "bias", "new_images_contain_old", "data", "model", "hyper", "mode",
              "strategy", "ewc_weights", "eval", "seeds", "output_dir"});
  const int version = opt(j, "format_version", kConfigFormatVersion);
  if (version != kConfigFormatVersion)
    throw ConfigError("config format_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kConfigFormatVersion) + ")");
  ExperimentConfig c;

  const json sc = req<json>(j, "scenario");
  require_object(sc, "scenario");
  known_keys(sc, "scenario", {"kind", "old_classes", "new_classes", "fog_intensity"});
  const auto kind = req<std::string>(sc, "kind");
  if (kind == "category_incremental")
    c.scenario.kind = Scenario::Kind::CategoryIncremental;
  else if (kind == "domain_shift")
    c.scenario.kind = Scenario::Kind::DomainShift;
  else
    throw ConfigError("unknown scenario kind '" + kind + "'");
  c.scenario.old_classes = req<std::vector<int>>(sc, "old_classes");
  c.scenario.new_classes = opt<std::vector<int>>(sc, "new_classes", {});
  c.scenario.fog_intensity = opt(sc, "fog_intensity", c.scenario.fog_intensity);

  if (j.contains("task")) {
    json task = j["task"];
    require_object(task, "task");
    if (task.contains("class_ids")) throw ConfigError("task.class_ids is set by the scenario");
    c.task = task_from_json(task);
    c.task.shapes.clear();
    if (task.contains("shapes")) c.task.shapes = task_from_json(task).shapes;
  } else {
    c.task.task_id = "synthetic";
  }
  if (j.contains("bias")) {
    const json& b = j["bias"];
    require_object(b, "bias");
    known_keys(b, "bias", {"rho", "kind"});
    c.rho = opt(b, "rho", c.rho);
    try {
      c.bias_kind = bias_kind_from_string(opt<std::string>(b, "kind", to_string(c.bias_kind)));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("bias.kind: ") + e.what());
    }
  }
  c.new_images_contain_old = opt(j, "new_images_contain_old", c.new_images_contain_old);
  if (j.contains("data")) {
    const json& d = j["data"];
    require_object(d, "data");
    known_keys(d, "data", {"train", "test", "new_train", "new_test", "workers"});
    c.data.train = opt(d, "train", c.data.train);
    c.data.test = opt(d, "test", c.data.test);
    c.data.new_train = opt(d, "new_train", c.data.new_train);
    c.data.new_test = opt(d, "new_test", c.data.new_test);
    c.data.workers = opt(d, "workers", c.data.workers);
  }
  if (j.contains("model")) {
    if (j["model"].contains("n_classes")) throw ConfigError("model.n_classes is set by the scenario");
    c.model = model_config_from_json(j["model"]);
  }
  c.model.n_classes = static_cast<int>(c.scenario.all_classes().size());
  if (j.contains("hyper")) c.hyper = hyper_from_json(j["hyper"]);
  const auto mode = opt<std::string>(j, "mode", "icod");
  if (mode == "icod")
    c.mode = TrainMode::Icod;
  else if (mode == "baseline")
    c.mode = TrainMode::Baseline;
  else
    throw ConfigError("unknown mode '" + mode + "' (expected icod or baseline)");
  if (j.contains("strategy")) c.strategy = strategy_from_json(j["strategy"]);
  c.strategy.new_classes = c.scenario.new_classes;
  c.ewc_weights = opt(j, "ewc_weights", c.ewc_weights);
  if (j.contains("eval")) {
    const json& e = j["eval"];
    require_object(e, "eval");
    known_keys(e, "eval", {"iou", "score_thresh", "nms_iou", "features_per_class"});
    c.eval.iou = opt(e, "iou", c.eval.iou);
    c.eval.detect.score_thresh = opt(e, "score_thresh", c.eval.detect.score_thresh);
    c.eval.detect.nms_iou = opt(e, "nms_iou", c.eval.detect.nms_iou);
    c.eval.features_per_class = opt(e, "features_per_class", c.eval.features_per_class);
  }
  c.seeds = opt(j, "seeds", c.seeds);
  c.output_dir = opt<std::string>(j, "output_dir", "");
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    return experiment_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string sha256_hex(const void* data, std::size_t size) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string config_hash(const json& j) {
  const std::string canonical = j.dump();
  return sha256_hex(canonical.data(), canonical.size());
}

json dataset_manifest(const Dataset& data) {
  return {{"format_version", kDatasetFormatVersion},
          {"task", to_json(data.task)},
          {"bias", to_json(data.bias)},
          {"domain", to_json(data.domain)},
          {"n", data.size()},
          {"base_seed", data.base_seed}};
}

Dataset dataset_from_manifest(const json& j, int workers) {
  require_object(j, "dataset manifest");
  const int version = req<int>(j, "format_version");
  if (version != kDatasetFormatVersion)
    throw VersionError("dataset manifest format_version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kDatasetFormatVersion));
  const TaskDef task = task_from_json(req<json>(j, "task"));
  const BiasConfig bias = bias_from_json(req<json>(j, "bias"));
  const Domain domain = domain_from_json(req<json>(j, "domain"));
  const int n = req<int>(j, "n");
  if (n < 0) throw ConfigError("dataset manifest n must be >= 0");
  task.validate();
  bias.validate_for(task);
  return build_dataset(task, bias, n, req<std::uint64_t>(j, "base_seed"), domain, workers);
}

DatasetSeeds dataset_seeds(std::uint64_t seed) {
  return {stable_hash(seed, 11), stable_hash(seed, 12), stable_hash(seed, 13), stable_hash(seed, 14)};
}

}  // namespace icod
