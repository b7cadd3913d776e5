#include "icod/trainer.hpp"

#include <cmath>
#include <numeric>

#include "icod/detector.hpp"
#include "icod/errors.hpp"

namespace icod {
namespace {

void require_finite(double value, const char* term) {
  if (!std::isfinite(value)) throw NumericError(std::string("non-finite ") + term);
}

TargetMap targets_for(const Sample& s, const FeatureMap& f, int n_classes) {
  return assign_targets(s.annotations, f.data.dim(1), f.data.dim(2), f.stride, n_classes);
}

}  // namespace

void HyperParams::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("alpha, beta and gamma must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr.initial <= 0 || lr.drop_factor <= 0) throw ConfigError("learning rates must be > 0");
  if (lr.drop_epoch < 0 || lr.drop_epoch > epochs) throw ConfigError("lr drop epoch must lie in [0, epochs]");
}

ObjectiveResult icod_objective(Batch batch, const Model& model, const HyperParams& hyper, Rng& rng,
                               RandomWeightMode mode) {
  if (batch.empty()) throw ArgumentError("icod_objective: empty batch");
  ObjectiveResult res{{}, model.params.zeros_like()};
  ParamSet& grads = res.grads;
  const double inv = 1.0 / static_cast<double>(batch.size());
  const int n = model.config.n_classes;
  const Tensor& head_w = model.params[model.head_weight()].value;

  for (const Sample* s : batch) {
    BackboneCache bc;
    const FeatureMap f = backbone_forward(s->image, model, &bc);
    const TargetMap targets = targets_for(*s, f, n);

    SubnetCache wc, bcache;
    const Tensor w = channel_weight(f.data, model, &wc);
    const Tensor b = channel_bias(f.data, model, &bcache);
    const Tensor fb = bias_feature(f.data, w, b);
    const Tensor fc = causal_feature(f.data, fb, sample_r(rng, f.data.dim(0), mode));

    RawPrediction g_f, g_c, g_b;
    DetectionLoss l_f, l_c, l_b;
    try {
      l_f = detection_loss(head_forward(f.data, model), targets, &g_f, inv);
    } catch (const NumericError&) {
      throw NumericError("non-finite L_d(F, Y)");
    }
    try {
      l_c = detection_loss(head_forward(fc, model), targets, &g_c, inv);
    } catch (const NumericError&) {
      throw NumericError("non-finite L_d(F_c, Y)");
    }
    try {
      // Ascent: the decomposer climbs this term, so its descent gradient is negated.
      l_b = detection_loss(head_forward(fb, model), targets, &g_b, -hyper.gamma * inv);
    } catch (const NumericError&) {
      throw NumericError("non-finite L_d(F_b, Y)");
    }
    const RegLoss reg = reg_loss(w, b, hyper.alpha, hyper.beta);

    res.loss.l_f += l_f.total() * inv;
    res.loss.l_fc += l_c.total() * inv;
    res.loss.l_b += l_b.total() * inv;
    res.loss.l_wb += reg.value * inv;

    // theta_m: F and F_c passes. F_b is a constant inside F_c, so dF_c/dF = I.
    Tensor df = head_backward(f.data, head_w, g_f, &grads[model.head_weight()].value,
                              &grads[model.head_bias()].value);
    df += head_backward(fc, head_w, g_c, &grads[model.head_weight()].value, &grads[model.head_bias()].value);
    backbone_backward(model, bc, df, grads);

    // theta_c: F_b pass (head parameters blocked) plus the regulariser.
    const Tensor dfb = head_backward(fb, head_w, g_b, nullptr, nullptr);
    Tensor dw(w.shape()), db(b.shape());
    for (std::size_t i = 0; i < dw.size(); ++i) {
      dw[i] = dfb[i] * f.data[i] + reg.dw[i] * inv;
      db[i] = dfb[i] + reg.db[i] * inv;
    }
    subnet_backward(model, 0, f.data, wc, dw, grads);
    subnet_backward(model, 1, f.data, bcache, db, grads);
  }

  auto& L = res.loss;
  L.l_c = L.l_f + L.l_fc;
  L.total = L.l_c + hyper.gamma * L.l_b + L.l_wb;
  require_finite(L.l_wb, "L_wb");
  require_finite(L.total, "L_ICOD total");
  return res;
}

ObjectiveResult baseline_objective(Batch batch, const Model& model) {
  if (batch.empty()) throw ArgumentError("baseline_objective: empty batch");
  ObjectiveResult res{{}, model.params.zeros_like()};
  const double inv = 1.0 / static_cast<double>(batch.size());
  const Tensor& head_w = model.params[model.head_weight()].value;
  for (const Sample* s : batch) {
    BackboneCache bc;
    const FeatureMap f = backbone_forward(s->image, model, &bc);
    RawPrediction g;
    DetectionLoss l;
    try {
      l = detection_loss(head_forward(f.data, model), targets_for(*s, f, model.config.n_classes), &g, inv);
    } catch (const NumericError&) {
      throw NumericError("non-finite L_d(F, Y)");
    }
    res.loss.l_f += l.total() * inv;
    const Tensor df = head_backward(f.data, head_w, g, &res.grads[model.head_weight()].value,
                                    &res.grads[model.head_bias()].value);
    backbone_backward(model, bc, df, res.grads);
  }
  res.loss.l_c = res.loss.l_f;
  res.loss.total = res.loss.l_f;
  require_finite(res.loss.total, "L_d(F, Y)");
  return res;
}

Adam::Adam(const ParamSet& like, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamSet& params, const ParamSet& grads, double lr, const std::vector<bool>& trainable) {
  if (!params.same_layout(grads) || !params.same_layout(m_))
    throw ArgumentError("Adam: parameter layout mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!trainable.empty() && !trainable[p]) continue;
    auto& x = params[p].value;
    auto& m = m_[p].value;
    auto& v = v_[p].value;
    const auto& g = grads[p].value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

Model fit(Model model, const Dataset& data, const ObjectiveFn& objective, const FitOptions& options) {
  if (data.samples.empty()) throw ArgumentError("fit: empty dataset");
  if (options.batch_size < 1 || options.epochs < 0) throw ArgumentError("fit: bad epochs/batch size");
  if (!options.trainable.empty() && options.trainable.size() != model.params.size())
    throw ArgumentError("fit: trainable mask does not match the parameter layout");

  Rng shuffle_rng(stable_hash(options.seed, 2));
  Rng objective_rng(stable_hash(options.seed, 3));
  Adam adam(model.params);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Sample*> batch;
  int step = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const double lr = options.lr.at(epoch);
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.below(i + 1)]);

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      batch.clear();
      for (std::size_t k = start; k < stop; ++k) batch.push_back(&data.samples[order[k]]);

      ObjectiveResult res;
      try {
        res = objective(batch, model, objective_rng);
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(step), model, step);
      }
      if (!res.grads.all_finite())
        throw TrainingDiverged("non-finite gradient at step " + std::to_string(step), model, step);

      ParamSet before = model.params;
      adam.step(model.params, res.grads, lr, options.trainable);
      if (!model.params.all_finite()) {
        model.params = std::move(before);
        throw TrainingDiverged("parameters diverged at step " + std::to_string(step), model, step);
      }
      if (options.on_step) options.on_step({epoch, step, lr, res.loss});
      ++step;
    }
    if (options.on_epoch) options.on_epoch(epoch, model);
  }
  return model;
}

std::uint64_t init_seed(std::uint64_t seed) { return stable_hash(seed, 1); }

Model train(const Dataset& data, const TrainOptions& options) {
  options.hyper.validate();
  if (options.mode == TrainMode::Baseline) return baseline_train(data, options);
  const HyperParams hyper = options.hyper;
  FitOptions fo{hyper.epochs, hyper.batch_size, hyper.lr, hyper.seed, {}, options.on_step, options.on_epoch};
  return fit(Model::create(options.model, init_seed(hyper.seed)), data,
             [hyper](Batch b, const Model& m, Rng& rng) { return icod_objective(b, m, hyper, rng); }, fo);
}

Model baseline_train(const Dataset& data, TrainOptions options) {
  options.hyper.validate();
  const HyperParams& hyper = options.hyper;
  Model init = Model::create(options.model, init_seed(hyper.seed));
  std::vector<bool> trainable;
  for (const auto& p : init.params) trainable.push_back(p.group != ParamGroup::Decomposer);
  FitOptions fo{hyper.epochs, hyper.batch_size, hyper.lr, hyper.seed, trainable, options.on_step,
                options.on_epoch};
  return fit(std::move(init), data, [](Batch b, const Model& m, Rng&) { return baseline_objective(b, m); }, fo);
}

LossBreakdown evaluate_losses(const Model& model, const Dataset& data, const HyperParams& hyper,
                              std::uint64_t seed, RandomWeightMode mode) {
  Rng rng(seed);
  LossBreakdown sum;
  std::vector<const Sample*> one(1);
  for (const auto& s : data.samples) {
    one[0] = &s;
    const auto res = icod_objective(one, model, hyper, rng, mode);
    sum.l_f += res.loss.l_f;
    sum.l_fc += res.loss.l_fc;
    sum.l_b += res.loss.l_b;
    sum.l_wb += res.loss.l_wb;
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  sum.l_f *= inv;
  sum.l_fc *= inv;
  sum.l_b *= inv;
  sum.l_wb *= inv;
  sum.l_c = sum.l_f + sum.l_fc;
  sum.total = sum.l_c + hyper.gamma * sum.l_b + sum.l_wb;
  return sum;
}

}  // namespace icod
