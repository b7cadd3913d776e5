#pragma once

// Forward/backward kernels shared by the detector and the decomposer.
// Activations are C x H x W; conv weights are Cout x Cin x K x K with
// "same" zero padding and unit stride.

#include "icod/tensor.hpp"

namespace icod::layers {

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Accumulates into dweight/dbias; writes the input gradient to dx if given.
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx,
                     Tensor& dweight, Tensor& dbias);

Tensor tanh(const Tensor& x);
/// dx = dy * (1 - y^2), y being the tanh output.
Tensor tanh_backward(const Tensor& y, const Tensor& dy);

Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& dy);

/// 2x2 average pooling; H and W must be even.
Tensor avg_pool2(const Tensor& x);
Tensor avg_pool2_backward(const Tensor& dy);

}  // namespace icod::layers
