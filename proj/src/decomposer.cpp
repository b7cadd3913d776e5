#include "icod/decomposer.hpp"

#include <cmath>

#include "icod/errors.hpp"
#include "icod/layers.hpp"

namespace icod {
namespace {

void check_channels(const Tensor& feature, const Model& model) {
  const int c = model.config.feature_channels();
  if (feature.rank() != 3 || feature.dim(0) != c)
    throw ArgumentError("decomposer expects " + std::to_string(c) + " channels, got " +
                        shape_string(feature.shape()));
}

Tensor subnet_forward(const Tensor& feature, const Model& model, int net, bool gate, SubnetCache* cache) {
  check_channels(feature, model);
  Tensor hidden = layers::tanh(layers::conv2d(feature, model.params[model.decomposer_weight(net, 0)].value,
                                              model.params[model.decomposer_bias(net, 0)].value));
  Tensor out = layers::conv2d(hidden, model.params[model.decomposer_weight(net, 1)].value,
                              model.params[model.decomposer_bias(net, 1)].value);
  if (gate) out = layers::sigmoid(out);
  if (cache) {
    cache->hidden = std::move(hidden);
    cache->output = out;
  }
  return out;
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ArgumentError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
}

}  // namespace

Tensor channel_weight(const Tensor& feature, const Model& model, SubnetCache* cache) {
  return subnet_forward(feature, model, 0, true, cache);
}

Tensor channel_bias(const Tensor& feature, const Model& model, SubnetCache* cache) {
  return subnet_forward(feature, model, 1, false, cache);
}

void subnet_backward(const Model& model, int net, const Tensor& feature, const SubnetCache& cache,
                     const Tensor& doutput, ParamSet& grads) {
  const Tensor dpre = net == 0 ? layers::sigmoid_backward(cache.output, doutput) : doutput;
  Tensor dhidden;
  layers::conv2d_backward(cache.hidden, model.params[model.decomposer_weight(net, 1)].value, dpre, &dhidden,
                          grads[model.decomposer_weight(net, 1)].value,
                          grads[model.decomposer_bias(net, 1)].value);
  const Tensor dact = layers::tanh_backward(cache.hidden, dhidden);
  layers::conv2d_backward(feature, model.params[model.decomposer_weight(net, 0)].value, dact, nullptr,
                          grads[model.decomposer_weight(net, 0)].value,
                          grads[model.decomposer_bias(net, 0)].value);
}

Tensor bias_feature(const Tensor& feature, const Tensor& w, const Tensor& b) {
  check_same(feature, w, "bias_feature(w)");
  check_same(feature, b, "bias_feature(b)");
  Tensor out(feature.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] * feature[i] + b[i];
  return out;
}

std::vector<double> sample_r(Rng& rng, int channels, RandomWeightMode mode) {
  if (channels < 1) throw ArgumentError("sample_r needs at least one channel");
  switch (mode) {
    case RandomWeightMode::One: return std::vector<double>(static_cast<std::size_t>(channels), 1.0);
    case RandomWeightMode::Zero: return std::vector<double>(static_cast<std::size_t>(channels), 0.0);
    case RandomWeightMode::Random: break;
  }
  std::vector<double> r(static_cast<std::size_t>(channels));
  for (double& v : r) v = rng.uniform();
  return r;
}

Tensor causal_feature(const Tensor& feature, const Tensor& bias_feat, const std::vector<double>& r) {
  check_same(feature, bias_feat, "causal_feature");
  if (feature.rank() != 3 || r.size() != static_cast<std::size_t>(feature.dim(0)))
    throw ArgumentError("causal_feature: r has " + std::to_string(r.size()) + " entries for " +
                        shape_string(feature.shape()));
  Tensor out(feature.shape());
  const std::size_t plane = static_cast<std::size_t>(feature.dim(1)) * feature.dim(2);
  for (std::size_t c = 0; c < r.size(); ++c)
    for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) out[k] = feature[k] - r[c] * bias_feat[k];
  return out;
}

RegLoss reg_loss(const Tensor& w, const Tensor& b, double alpha, double beta, bool normalize) {
  if (alpha < 0.0 || beta < 0.0) throw ArgumentError("reg_loss: alpha and beta must be >= 0");
  const double nw = normalize && w.size() ? static_cast<double>(w.size()) : 1.0;
  const double nb = normalize && b.size() ? static_cast<double>(b.size()) : 1.0;
  RegLoss out{0.0, Tensor(w.shape()), Tensor(b.shape())};
  double l1 = 0.0, l2 = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    l1 += std::abs(w[i]);
    out.dw[i] = alpha * (w[i] > 0 ? 1.0 : (w[i] < 0 ? -1.0 : 0.0)) / nw;
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    l2 += b[i] * b[i];
    out.db[i] = 2.0 * beta * b[i] / nb;
  }
  out.value = alpha * l1 / nw + beta * l2 / nb;
  return out;
}

}  // namespace icod
