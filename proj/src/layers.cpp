#include "icod/layers.hpp"

#include <cmath>

#include <Eigen/Core>

#include "icod/errors.hpp"

namespace icod::layers {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

void check_conv(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3 || weight.rank() != 4 || bias.rank() != 1)
    throw ArgumentError("conv2d expects CxHxW input, 4-d weight and 1-d bias");
  if (weight.dim(1) != x.dim(0))
    throw ArgumentError("conv2d: input has " + std::to_string(x.dim(0)) + " channels, weight expects " +
                        std::to_string(weight.dim(1)));
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0)
    throw ArgumentError("conv2d: kernel must be square with odd size");
  if (bias.dim(0) != weight.dim(0)) throw ArgumentError("conv2d: bias length mismatch");
}

// Unfolds x into (Cin*K*K) x (H*W) patches with zero padding.
RowMatrix im2col(const Tensor& x, int k) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2), pad = k / 2;
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(cin) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, pad - kx);
          const int x1 = std::min(w, w + pad - kx);
          const double* src = x.data() + (static_cast<std::size_t>(c) * h + sy) * w;
          for (int xx = x0; xx < x1; ++xx) row[y * w + xx] = src[xx + kx - pad];
        }
      }
    }
  }
  return cols;
}

void col2im(const RowMatrix& cols, int k, Tensor& dx) {
  const int cin = dx.dim(0), h = dx.dim(1), w = dx.dim(2), pad = k / 2;
  dx.fill(0.0);
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, pad - kx);
          const int x1 = std::min(w, w + pad - kx);
          double* dst = dx.data() + (static_cast<std::size_t>(c) * h + sy) * w;
          for (int xx = x0; xx < x1; ++xx) dst[xx + kx - pad] += row[y * w + xx];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_conv(x, weight, bias);
  const int cout = weight.dim(0), k = weight.dim(2), h = x.dim(1), w = x.dim(2);
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index fan = static_cast<Eigen::Index>(x.dim(0)) * k * k;
  Tensor y({cout, h, w});
  MatrixMap out(y.data(), cout, hw);
  ConstMatrixMap wmat(weight.data(), cout, fan);
  if (k == 1) {
    out.noalias() = wmat * ConstMatrixMap(x.data(), fan, hw);
  } else {
    out.noalias() = wmat * im2col(x, k);
  }
  out.colwise() += ConstVectorMap(bias.data(), cout);
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx,
                     Tensor& dweight, Tensor& dbias) {
  const int cout = weight.dim(0), k = weight.dim(2);
  const Eigen::Index hw = static_cast<Eigen::Index>(x.dim(1)) * x.dim(2);
  const Eigen::Index fan = static_cast<Eigen::Index>(x.dim(0)) * k * k;
  ConstMatrixMap g(dy.data(), cout, hw);
  ConstMatrixMap wmat(weight.data(), cout, fan);
  MatrixMap dw(dweight.data(), cout, fan);
  Eigen::Map<Eigen::VectorXd>(dbias.data(), cout) += g.rowwise().sum();
  if (k == 1) {
    ConstMatrixMap cols(x.data(), fan, hw);
    dw.noalias() += g * cols.transpose();
    if (dx) {
      *dx = Tensor(x.shape());
      MatrixMap(dx->data(), fan, hw).noalias() = wmat.transpose() * g;
    }
    return;
  }
  const RowMatrix cols = im2col(x, k);
  dw.noalias() += g * cols.transpose();
  if (dx) {
    const RowMatrix dcols = wmat.transpose() * g;
    *dx = Tensor(x.shape());
    col2im(dcols, k, *dx);
  }
}

Tensor tanh(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

Tensor tanh_backward(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * (1.0 - y[i] * y[i]);
  return dx;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    // Split by sign so exp never overflows.
    if (v >= 0) {
      y[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y[i] = e / (1.0 + e);
    }
  }
  return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
  return dx;
}

Tensor avg_pool2(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw ArgumentError("avg_pool2 needs even spatial dims, got " + shape_string(x.shape()));
  Tensor y({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h / 2; ++i)
      for (int j = 0; j < w / 2; ++j)
        y.at(ch, i, j) = 0.25 * (x.at(ch, 2 * i, 2 * j) + x.at(ch, 2 * i, 2 * j + 1) +
                                 x.at(ch, 2 * i + 1, 2 * j) + x.at(ch, 2 * i + 1, 2 * j + 1));
  return y;
}

Tensor avg_pool2_backward(const Tensor& dy) {
  const int c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
  Tensor dx({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) dx.at(ch, i, j) = 0.25 * dy.at(ch, i / 2, j / 2);
  return dx;
}

}  // namespace icod::layers
