#include "icod/incremental.hpp"

#include <cmath>
#include <numeric>

#include "icod/errors.hpp"

namespace icod {

std::string to_string(EwcScope scope) {
  return scope == EwcScope::All ? "all" : "backbone_decomposer";
}

EwcScope ewc_scope_from_string(const std::string& name) {
  if (name == "all") return EwcScope::All;
  if (name == "backbone_decomposer") return EwcScope::BackboneDecomposer;
  throw ConfigError("unknown EWC scope '" + name + "' (expected backbone_decomposer or all)");
}

void EWCState::validate() const {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ArgumentError("EWC lambda must be finite and >= 0");
  if (!theta_star.same_layout(fisher)) throw ArgumentError("EWC fisher does not match theta_star");
  for (const auto& p : fisher)
    for (double v : p.value.values())
      if (!(v >= 0) || !std::isfinite(v)) throw ArgumentError("EWC fisher entry of " + p.name + " is not >= 0");
}

bool EWCState::penalizes(const Param& p) const {
  return scope == EwcScope::All || p.group != ParamGroup::Head;
}

ParamSet compute_fisher(const SampleGradFn& grad, std::size_t n_data, int n_samples, Rng& rng) {
  if (n_data == 0) throw ArgumentError("compute_fisher: empty dataset");
  if (n_samples < 1) throw ArgumentError("compute_fisher: n_samples must be >= 1");
  // Seeded passes without replacement: draw k takes position k % n_data of
  // a permutation grown one Fisher-Yates step at a time, so a longer run
  // shares its prefix with a shorter one.
  std::vector<std::size_t> order(n_data);
  std::iota(order.begin(), order.end(), std::size_t{0});
  ParamSet fisher;
  for (int k = 0; k < n_samples; ++k) {
    const std::size_t j = static_cast<std::size_t>(k) % n_data;
    std::swap(order[j], order[j + static_cast<std::size_t>(rng.below(n_data - j))]);
    const ParamSet g = grad(order[j]);
    if (k == 0) fisher = g.zeros_like();
    if (!fisher.same_layout(g)) throw ArgumentError("compute_fisher: gradient layout changed between samples");
    for (std::size_t p = 0; p < g.size(); ++p) {
      auto& f = fisher[p].value;
      const auto& gv = g[p].value;
      for (std::size_t i = 0; i < f.size(); ++i) f[i] += gv[i] * gv[i];
    }
  }
  fisher *= 1.0 / static_cast<double>(n_samples);
  return fisher;
}

ParamSet compute_fisher(const Model& model, const Dataset& data, int n_samples, Rng& rng) {
  return compute_fisher(
      [&](std::size_t i) {
        const Sample* one[] = {&data.samples[i]};
        return baseline_objective(one, model).grads;
      },
      data.size(), n_samples, rng);
}

namespace {

void check_shapes(const ParamSet& theta, const EWCState& state) {
  if (!theta.same_layout(state.theta_star))
    throw ArgumentError("ewc_penalty: parameters do not match the anchored layout");
}

}  // namespace

double ewc_penalty(const ParamSet& theta, const EWCState& state) {
  check_shapes(theta, state);
  double sum = 0.0;
  for (std::size_t p = 0; p < theta.size(); ++p) {
    if (!state.penalizes(theta[p])) continue;
    const auto& x = theta[p].value;
    const auto& x0 = state.theta_star[p].value;
    const auto& f = state.fisher[p].value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - x0[i];
      sum += f[i] * d * d;
    }
  }
  return 0.5 * state.lambda * sum;
}

void add_ewc_gradient(const ParamSet& theta, const EWCState& state, ParamSet& grads) {
  check_shapes(theta, state);
  if (!grads.same_layout(theta)) throw ArgumentError("add_ewc_gradient: gradient layout mismatch");
  for (std::size_t p = 0; p < theta.size(); ++p) {
    if (!state.penalizes(theta[p])) continue;
    const auto& x = theta[p].value;
    const auto& x0 = state.theta_star[p].value;
    const auto& f = state.fisher[p].value;
    auto& g = grads[p].value;
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += state.lambda * f[i] * (x[i] - x0[i]);
  }
}

namespace {

/// Row-insertion core; `draw` supplies each new weight entry in row-major order.
template <typename Draw>
ParamSet insert_rows(const ParamSet& params, const Model& layout, int n_new, Draw&& draw, double bias_fill) {
  if (n_new < 1) throw ArgumentError("extend_head: n_new must be >= 1, got " + std::to_string(n_new));
  const int n = layout.config.n_classes;
  const int outputs = layout.config.head_outputs();
  ParamSet out = params;
  const Tensor& w = params[layout.head_weight()].value;
  const Tensor& b = params[layout.head_bias()].value;
  if (w.rank() != 4 || w.dim(0) != outputs || b.dim(0) != outputs)
    throw ArgumentError("extend_head: head shape does not match " + std::to_string(n) + " classes");
  const int c = w.dim(1);
  const std::size_t row = static_cast<std::size_t>(c);

  Tensor nw({outputs + n_new, c, 1, 1});
  Tensor nb({outputs + n_new});
  for (int r = 0; r < outputs + n_new; ++r) {
    double* dst = nw.data() + static_cast<std::size_t>(r) * row;
    if (r >= n && r < n + n_new) {
      for (std::size_t k = 0; k < row; ++k) dst[k] = draw();
      nb[static_cast<std::size_t>(r)] = bias_fill;
      continue;
    }
    const int src = r < n ? r : r - n_new;
    std::copy_n(w.data() + static_cast<std::size_t>(src) * row, row, dst);
    nb[static_cast<std::size_t>(r)] = b[static_cast<std::size_t>(src)];
  }
  out[layout.head_weight()].value = std::move(nw);
  out[layout.head_bias()].value = std::move(nb);
  return out;
}

}  // namespace

Model extend_head(const Model& model, int n_new, Rng& rng) {
  model.check_layout();
  Model out = model;
  out.params = insert_rows(model.params, model, n_new, [&] { return kNewRowStd * rng.normal(); }, 0.0);
  out.config.n_classes += n_new;
  out.check_layout();
  return out;
}

ParamSet extend_head_params(const ParamSet& params, const Model& layout, int n_new, double fill) {
  return insert_rows(params, layout, n_new, [fill] { return fill; }, fill);
}

void StrategySpec::validate() const {
  if (kind == Kind::Ewc && (!(lambda >= 0) || !std::isfinite(lambda)))
    throw ConfigError("ewc lambda must be finite and >= 0");
  if (epochs < 1) throw ConfigError("strategy epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("strategy batch_size must be >= 1");
  if (fisher_samples < 1) throw ConfigError("fisher_samples must be >= 1");
  if (lr.initial <= 0 || lr.drop_factor <= 0) throw ConfigError("learning rates must be > 0");
  if (lr.drop_epoch < 0 || lr.drop_epoch > epochs) throw ConfigError("lr drop epoch must lie in [0, epochs]");
}

std::string to_string(StrategySpec::Kind kind) {
  switch (kind) {
    case StrategySpec::Kind::Finetune: return "finetune";
    case StrategySpec::Kind::FreezeBackbone: return "freeze_backbone";
    case StrategySpec::Kind::Ewc: return "ewc";
  }
  return "?";
}

StrategySpec::Kind strategy_kind_from_string(const std::string& name) {
  if (name == "finetune") return StrategySpec::Kind::Finetune;
  if (name == "freeze_backbone") return StrategySpec::Kind::FreezeBackbone;
  if (name == "ewc") return StrategySpec::Kind::Ewc;
  throw ConfigError("unknown strategy '" + name + "' (expected finetune, freeze_backbone or ewc)");
}

std::uint64_t extension_seed(std::uint64_t seed) { return stable_hash(seed, 4); }

Model incremental_train(const Model& old_model, const Dataset& new_data, const IncrementalOptions& options) {
  const StrategySpec& s = options.strategy;
  s.validate();
  old_model.check_layout();
  const int n_new = static_cast<int>(s.new_classes.size());

  Model start = old_model;
  if (n_new > 0) {
    Rng rng(extension_seed(s.seed));
    start = extend_head(old_model, n_new, rng);
  }
  for (const auto& sample : new_data.samples)
    for (const auto& a : sample.annotations)
      if (a.class_id < 0 || a.class_id >= start.config.n_classes)
        throw ArgumentError("incremental_train: annotation class " + std::to_string(a.class_id) +
                            " outside the extended head");

  std::vector<bool> trainable;
  if (s.kind == StrategySpec::Kind::FreezeBackbone)
    for (const auto& p : start.params) trainable.push_back(p.group == ParamGroup::Head);

  FitOptions fo{s.epochs, s.batch_size, s.lr, s.seed, trainable, options.on_step, options.on_epoch};

  if (s.kind != StrategySpec::Kind::Ewc || s.lambda == 0.0)
    return fit(std::move(start), new_data, [](Batch b, const Model& m, Rng&) { return baseline_objective(b, m); },
               fo);

  if (!options.ewc) throw ArgumentError("incremental_train: ewc strategy needs an EWC state");
  EWCState state = *options.ewc;
  state.lambda = s.lambda;
  state.scope = s.scope;
  state.validate();
  if (n_new > 0) {
    state.theta_star = extend_head_params(state.theta_star, old_model, n_new, 0.0);
    state.fisher = extend_head_params(state.fisher, old_model, n_new, 0.0);
  }
  return fit(std::move(start), new_data,
             [state](Batch b, const Model& m, Rng&) {
               ObjectiveResult res = baseline_objective(b, m);
               add_ewc_gradient(m.params, state, res.grads);
               res.loss.total += ewc_penalty(m.params, state);
               return res;
             },
             fo);
}

EWCState make_ewc_state(const Model& old_model, const Dataset& old_data, const StrategySpec& strategy) {
  Rng rng(stable_hash(strategy.seed, 5));
  EWCState state;
  state.theta_star = old_model.params;
  state.fisher = compute_fisher(old_model, old_data, strategy.fisher_samples, rng);
  state.lambda = strategy.lambda;
  state.scope = strategy.scope;
  return state;
}

}  // namespace icod
