#pragma once

// Single-stage anchor-free detector: a conv backbone producing the feature
// map F and a 1x1 conv head emitting per-cell class logits and box deltas.

#include <array>
#include <vector>

#include "icod/box.hpp"
#include "icod/datagen.hpp"
#include "icod/model.hpp"
#include "icod/tensor.hpp"

namespace icod {

struct FeatureMap {
  Tensor data;  // C x H' x W'
  int stride = 1;
};

/// Intermediate activations kept for the backward pass.
struct BackboneCache {
  std::vector<Tensor> inputs;  // input to each block's conv
  std::vector<Tensor> acts;    // tanh output of each block (pre-pool)
};

FeatureMap backbone_forward(const Tensor& image, const Model& model, BackboneCache* cache = nullptr);

/// Accumulates d(loss)/d(backbone params) into grads.
void backbone_backward(const Model& model, const BackboneCache& cache, const Tensor& dfeature,
                       ParamSet& grads);

/// Per-cell head output: rows [0, n_classes) are class logits, row n_classes
/// is background, the last four rows are box deltas (dx, dy, log w, log h).
struct RawPrediction {
  Tensor out;  // (n_classes + 5) x H' x W'
  int n_classes = 0;

  int grid_h() const { return out.dim(1); }
  int grid_w() const { return out.dim(2); }
  int background() const { return n_classes; }
  double logit(int k, int i, int j) const { return out.at(k, i, j); }
  double delta(int d, int i, int j) const { return out.at(n_classes + 1 + d, i, j); }
};

RawPrediction head_forward(const Tensor& feature, const Tensor& weight, const Tensor& bias);
RawPrediction head_forward(const Tensor& feature, const Model& model);

/// Accumulates head parameter gradients (when dweight/dbias are given) and
/// returns d(loss)/d(feature).
Tensor head_backward(const Tensor& feature, const Tensor& weight, const RawPrediction& dout,
                     Tensor* dweight, Tensor* dbias);

struct TargetMap {
  int n_classes = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> cls;                        // class or n_classes (background)
  std::vector<std::array<double, 4>> deltas;   // meaningful where positive
  std::vector<unsigned char> positive;
  // Area of the box that claimed each cell; resolves centre collisions.
  std::vector<double> claim_area;

  int n_positive() const;
  std::size_t cell(int i, int j) const { return static_cast<std::size_t>(i) * grid_w + j; }
};

std::array<double, 4> encode_box(const Box& box, int i, int j, int stride);
Box decode_box(const std::array<double, 4>& delta, int i, int j, int stride);

TargetMap assign_targets(const std::vector<Annotation>& annotations, int grid_h, int grid_w, int stride,
                         int n_classes);

double smooth_l1(double x);
double smooth_l1_grad(double x);

struct DetectionLoss {
  double cls = 0.0;
  double reg = 0.0;
  double total() const { return cls + reg; }
};

/// L_cls is mean cross-entropy over all cells; L_reg is the mean over
/// positive cells of the summed SmoothL1 over the four deltas. When `grad`
/// is given it receives d(L_cls + L_reg)/d(raw.out), scaled by `grad_scale`.
DetectionLoss detection_loss(const RawPrediction& raw, const TargetMap& targets,
                             RawPrediction* grad = nullptr, double grad_scale = 1.0);

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};
using Detections = std::vector<Detection>;

/// Greedy NMS: a box is dropped iff its IoU with an already kept box
/// exceeds iou_thresh. Ties in score keep the lower index first.
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_thresh);

Detections decode(const RawPrediction& raw, int stride, double score_thresh, double nms_iou);

struct DetectOptions {
  double score_thresh = 0.01;
  double nms_iou = 0.5;
};

/// Full inference path on the original feature F.
Detections detect(const Model& model, const Tensor& image, const DetectOptions& options = {});

}  // namespace icod
