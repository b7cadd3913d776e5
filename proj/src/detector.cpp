#include "icod/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "icod/errors.hpp"
#include "icod/layers.hpp"

namespace icod {

FeatureMap backbone_forward(const Tensor& image, const Model& model, BackboneCache* cache) {
  const auto& cfg = model.config;
  if (image.rank() != 3 || image.dim(0) != cfg.channels.front())
    throw ArgumentError("backbone expects a " + std::to_string(cfg.channels.front()) +
                        "xHxW image, got " + shape_string(image.shape()));
  const int stride = cfg.stride();
  if (image.dim(1) % stride || image.dim(2) % stride)
    throw ArgumentError("image size " + shape_string(image.shape()) + " is not divisible by stride " +
                        std::to_string(stride));
  if (cache) {
    cache->inputs.clear();
    cache->acts.clear();
  }
  Tensor x = image;
  for (int b = 0; b < cfg.blocks(); ++b) {
    Tensor act = layers::tanh(layers::conv2d(x, model.params[model.backbone_weight(b)].value,
                                             model.params[model.backbone_bias(b)].value));
    Tensor pooled = layers::avg_pool2(act);
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->acts.push_back(std::move(act));
    }
    x = std::move(pooled);
  }
  return {std::move(x), stride};
}

void backbone_backward(const Model& model, const BackboneCache& cache, const Tensor& dfeature,
                       ParamSet& grads) {
  Tensor g = dfeature;
  for (int b = model.config.blocks() - 1; b >= 0; --b) {
    const auto bi = static_cast<std::size_t>(b);
    Tensor dact = layers::tanh_backward(cache.acts[bi], layers::avg_pool2_backward(g));
    Tensor dx;
    layers::conv2d_backward(cache.inputs[bi], model.params[model.backbone_weight(b)].value, dact,
                            b > 0 ? &dx : nullptr, grads[model.backbone_weight(b)].value,
                            grads[model.backbone_bias(b)].value);
    g = std::move(dx);
  }
}

RawPrediction head_forward(const Tensor& feature, const Tensor& weight, const Tensor& bias) {
  if (feature.rank() != 3 || weight.rank() != 4 || weight.dim(1) != feature.dim(0))
    throw ArgumentError("head expects " + std::to_string(weight.rank() == 4 ? weight.dim(1) : -1) +
                        " feature channels, got " + shape_string(feature.shape()));
  if (weight.dim(0) < 6) throw ArgumentError("head needs at least one class row");
  return {layers::conv2d(feature, weight, bias), weight.dim(0) - 5};
}

RawPrediction head_forward(const Tensor& feature, const Model& model) {
  return head_forward(feature, model.params[model.head_weight()].value,
                      model.params[model.head_bias()].value);
}

Tensor head_backward(const Tensor& feature, const Tensor& weight, const RawPrediction& dout,
                     Tensor* dweight, Tensor* dbias) {
  Tensor scratch_w, scratch_b;
  if (!dweight) {
    scratch_w = Tensor(weight.shape());
    dweight = &scratch_w;
  }
  if (!dbias) {
    scratch_b = Tensor({weight.dim(0)});
    dbias = &scratch_b;
  }
  Tensor dfeature;
  layers::conv2d_backward(feature, weight, dout.out, &dfeature, *dweight, *dbias);
  return dfeature;
}

int TargetMap::n_positive() const {
  return static_cast<int>(std::count(positive.begin(), positive.end(), 1));
}

std::array<double, 4> encode_box(const Box& box, int i, int j, int stride) {
  const double s = stride;
  return {box.cx() / s - j, box.cy() / s - i, std::log(box.width() / s), std::log(box.height() / s)};
}

Box decode_box(const std::array<double, 4>& d, int i, int j, int stride) {
  const double s = stride;
  const double cx = (j + d[0]) * s;
  const double cy = (i + d[1]) * s;
  const double w = s * std::exp(d[2]);
  const double h = s * std::exp(d[3]);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

TargetMap assign_targets(const std::vector<Annotation>& annotations, int grid_h, int grid_w, int stride,
                         int n_classes) {
  TargetMap t;
  t.n_classes = n_classes;
  t.grid_h = grid_h;
  t.grid_w = grid_w;
  const auto cells = static_cast<std::size_t>(grid_h) * grid_w;
  t.cls.assign(cells, n_classes);
  t.deltas.assign(cells, {0, 0, 0, 0});
  t.positive.assign(cells, 0);
  t.claim_area.assign(cells, 0.0);

  const double width = static_cast<double>(grid_w) * stride;
  const double height = static_cast<double>(grid_h) * stride;
  for (const auto& a : annotations) {
    if (a.class_id < 0 || a.class_id >= n_classes)
      throw ArgumentError("annotation class " + std::to_string(a.class_id) + " outside [0, " +
                          std::to_string(n_classes) + ")");
    const Box& b = a.box;
    if (!b.valid() || b.x1 < 0 || b.y1 < 0 || b.x2 > width || b.y2 > height)
      throw ArgumentError("annotation box outside the image");
    const int j = std::clamp(static_cast<int>(std::floor(b.cx() / stride)), 0, grid_w - 1);
    const int i = std::clamp(static_cast<int>(std::floor(b.cy() / stride)), 0, grid_h - 1);
    const std::size_t c = t.cell(i, j);
    if (t.positive[c] && b.area() <= t.claim_area[c]) continue;
    t.positive[c] = 1;
    t.cls[c] = a.class_id;
    t.deltas[c] = encode_box(b, i, j, stride);
    t.claim_area[c] = b.area();
  }
  return t;
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

DetectionLoss detection_loss(const RawPrediction& raw, const TargetMap& targets, RawPrediction* grad,
                             double grad_scale) {
  const int gh = raw.grid_h(), gw = raw.grid_w(), n = raw.n_classes;
  if (gh != targets.grid_h || gw != targets.grid_w || n != targets.n_classes)
    throw ArgumentError("prediction and target shapes disagree");
  if (!raw.out.all_finite()) throw NumericError("non-finite value in detector output");

  if (grad) *grad = RawPrediction{Tensor(raw.out.shape()), n};
  const double cells = static_cast<double>(gh) * gw;
  const int n_pos = targets.n_positive();

  DetectionLoss loss;
  std::vector<double> prob(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i < gh; ++i) {
    for (int j = 0; j < gw; ++j) {
      const std::size_t c = targets.cell(i, j);
      double mx = raw.logit(0, i, j);
      for (int k = 1; k <= n; ++k) mx = std::max(mx, raw.logit(k, i, j));
      double z = 0.0;
      for (int k = 0; k <= n; ++k) {
        prob[static_cast<std::size_t>(k)] = std::exp(raw.logit(k, i, j) - mx);
        z += prob[static_cast<std::size_t>(k)];
      }
      const int target = targets.cls[c];
      loss.cls += (std::log(z) + mx - raw.logit(target, i, j)) / cells;
      if (grad) {
        for (int k = 0; k <= n; ++k) {
          const double p = prob[static_cast<std::size_t>(k)] / z;
          grad->out.at(k, i, j) = grad_scale * (p - (k == target ? 1.0 : 0.0)) / cells;
        }
      }
      if (!targets.positive[c]) continue;
      for (int d = 0; d < 4; ++d) {
        const double diff = raw.delta(d, i, j) - targets.deltas[c][static_cast<std::size_t>(d)];
        loss.reg += smooth_l1(diff) / n_pos;
        if (grad) grad->out.at(n + 1 + d, i, j) = grad_scale * smooth_l1_grad(diff) / n_pos;
      }
    }
  }
  return loss;
}

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_thresh) {
  if (boxes.size() != scores.size()) throw ArgumentError("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(boxes[idx], boxes[k]) > iou_thresh;
    });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

Detections decode(const RawPrediction& raw, int stride, double score_thresh, double nms_iou) {
  const int n = raw.n_classes;
  std::map<int, Detections> by_class;
  for (int i = 0; i < raw.grid_h(); ++i) {
    for (int j = 0; j < raw.grid_w(); ++j) {
      // Softmax over all n + 1 rows; the candidate is the best object class.
      double mx = raw.logit(0, i, j);
      for (int k = 1; k <= n; ++k) mx = std::max(mx, raw.logit(k, i, j));
      double z = 0.0;
      int best = 0;
      for (int k = 0; k <= n; ++k) {
        z += std::exp(raw.logit(k, i, j) - mx);
        if (k < n && raw.logit(k, i, j) > raw.logit(best, i, j)) best = k;
      }
      const double score = std::exp(raw.logit(best, i, j) - mx) / z;
      if (score < score_thresh) continue;
      std::array<double, 4> d{};
      for (int q = 0; q < 4; ++q) d[static_cast<std::size_t>(q)] = raw.delta(q, i, j);
      by_class[best].push_back({decode_box(d, i, j, stride), best, score});
    }
  }

  Detections out;
  for (auto& [cls, dets] : by_class) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& d : dets) {
      boxes.push_back(d.box);
      scores.push_back(d.score);
    }
    for (std::size_t k : nms(boxes, scores, nms_iou)) out.push_back(dets[k]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

Detections detect(const Model& model, const Tensor& image, const DetectOptions& options) {
  const FeatureMap f = backbone_forward(image, model);
  return decode(head_forward(f.data, model), f.stride, options.score_thresh, options.nms_iou);
}

}  // namespace icod
