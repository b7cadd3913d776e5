#include "icod/model.hpp"

#include <cmath>

#include "icod/errors.hpp"
#include "icod/rng.hpp"

namespace icod {

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Head: return "head";
    case ParamGroup::Decomposer: return "decomposer";
  }
  return "?";
}

void ParamSet::add(std::string name, ParamGroup group, Tensor value) {
  entries_.push_back({std::move(name), group, std::move(value)});
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  throw ArgumentError("no parameter named '" + name + "'");
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& p : entries_) out.add(p.name, p.group, Tensor::zeros_like(p.value));
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name ||
        !entries_[i].value.same_shape(other.entries_[i].value))
      return false;
  }
  return true;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : entries_) n += p.value.size();
  return n;
}

void ParamSet::set_zero() {
  for (auto& p : entries_) p.value.fill(0.0);
}

ParamSet& ParamSet::operator+=(const ParamSet& other) {
  if (!same_layout(other)) throw ArgumentError("parameter set layout mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value += other.entries_[i].value;
  return *this;
}

ParamSet& ParamSet::operator*=(double s) {
  for (auto& p : entries_) p.value *= s;
  return *this;
}

bool ParamSet::all_finite() const {
  for (const auto& p : entries_)
    if (!p.value.all_finite()) return false;
  return true;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
      return false;
  }
  return true;
}

void ModelConfig::validate() const {
  if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
  if (channels.size() < 2) throw ConfigError("backbone needs at least one block");
  for (int c : channels)
    if (c < 1) throw ConfigError("channel counts must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel size must be odd and >= 1");
}

namespace {

Tensor gaussian(std::vector<int> shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = std * rng.normal();
  return t;
}

}  // namespace

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model{config, {}};
  Rng rng(seed);
  const int k = config.kernel;
  for (int i = 0; i < config.blocks(); ++i) {
    const int cin = config.channels[static_cast<std::size_t>(i)];
    const int cout = config.channels[static_cast<std::size_t>(i) + 1];
    const double std = std::sqrt(1.0 / (cin * k * k));
    const std::string prefix = "backbone." + std::to_string(i);
    model.params.add(prefix + ".weight", ParamGroup::Backbone, gaussian({cout, cin, k, k}, std, rng));
    model.params.add(prefix + ".bias", ParamGroup::Backbone, Tensor({cout}));
  }
  const int c = config.feature_channels();
  model.params.add("head.weight", ParamGroup::Head,
                   gaussian({config.head_outputs(), c, 1, 1}, std::sqrt(1.0 / c), rng));
  // Most cells are background; starting the background logit near that
  // prior avoids a long plateau at the start of training.
  Tensor head_bias({config.head_outputs()});
  head_bias[static_cast<std::size_t>(config.n_classes)] = kBackgroundPriorLogit;
  model.params.add("head.bias", ParamGroup::Head, std::move(head_bias));
  for (const char* net : {"nf", "nb"}) {
    for (int layer = 0; layer < 2; ++layer) {
      const std::string prefix = std::string("decomposer.") + net + "." + std::to_string(layer);
      model.params.add(prefix + ".weight", ParamGroup::Decomposer,
                       gaussian({c, c, 1, 1}, std::sqrt(1.0 / c), rng));
      model.params.add(prefix + ".bias", ParamGroup::Decomposer, Tensor({c}));
    }
  }
  return model;
}

void Model::check_layout() const {
  config.validate();
  const std::size_t expected = static_cast<std::size_t>(2 * config.blocks() + 2 + 8);
  if (params.size() != expected)
    throw ArgumentError("model has " + std::to_string(params.size()) + " parameter arrays, expected " +
                        std::to_string(expected));
  const int c = config.feature_channels();
  const auto& hw = params[head_weight()].value;
  if (hw.shape() != std::vector<int>{config.head_outputs(), c, 1, 1})
    throw ArgumentError("head.weight has shape " + shape_string(hw.shape()) + ", expected " +
                        std::to_string(config.head_outputs()) + " outputs over " + std::to_string(c) +
                        " channels");
}

}  // namespace icod
