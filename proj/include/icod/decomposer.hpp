#pragma once

// Feature decomposer: splits a feature map F into a data-bias part
// F_b = w * F + b and a causal part F_c = F - r * F_b.
//
// w = N_f(F) (1x1 conv, tanh, 1x1 conv, sigmoid) and b = N_b(F) (1x1 conv,
// tanh, 1x1 conv) are both C x H x W; r holds one draw per channel and is
// broadcast over space.

#include <vector>

#include "icod/model.hpp"
#include "icod/rng.hpp"
#include "icod/tensor.hpp"

namespace icod {

/// Two-layer 1x1 conv network, with activations kept for backward.
struct SubnetCache {
  Tensor hidden;  // tanh output of the first layer
  Tensor output;  // final output (after sigmoid for N_f)
};

/// w = N_f(F), every element in (0, 1).
Tensor channel_weight(const Tensor& feature, const Model& model, SubnetCache* cache = nullptr);
/// b = N_b(F), unbounded.
Tensor channel_bias(const Tensor& feature, const Model& model, SubnetCache* cache = nullptr);

/// Backprop through N_f (net 0) or N_b (net 1). Parameter gradients are
/// accumulated into grads; the input gradient is not propagated.
void subnet_backward(const Model& model, int net, const Tensor& feature, const SubnetCache& cache,
                     const Tensor& doutput, ParamSet& grads);

/// F_b = w * F + b, element-wise.
Tensor bias_feature(const Tensor& feature, const Tensor& w, const Tensor& b);

enum class RandomWeightMode { Random, One, Zero };

/// C uniform draws in [0, 1), or constant ones/zeros in the analysis modes.
/// The constant modes do not consume the generator.
std::vector<double> sample_r(Rng& rng, int channels, RandomWeightMode mode = RandomWeightMode::Random);

/// F_c = F - r * F_b with r broadcast over each channel's spatial extent.
Tensor causal_feature(const Tensor& feature, const Tensor& bias_feat, const std::vector<double>& r);

struct RegLoss {
  double value = 0.0;
  Tensor dw;  // d(value)/dw
  Tensor db;  // d(value)/db
};

/// alpha * |w|_1 + beta * |b|_2^2, each norm divided by its element count
/// when `normalize` is set.
RegLoss reg_loss(const Tensor& w, const Tensor& b, double alpha, double beta, bool normalize = true);

}  // namespace icod
