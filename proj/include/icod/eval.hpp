#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icod/box.hpp"
#include "icod/datagen.hpp"
#include "icod/decomposer.hpp"
#include "icod/detector.hpp"
#include "icod/model.hpp"

namespace icod {

/// VOC all-points average precision for one class.
///
/// Detections are ranked by descending score (ties: image order, then
/// detection order). A detection is a true positive when the ground truth
/// it overlaps most has IoU >= iou_thresh and is not yet matched. Returns 0
/// when the class has no ground truth.
double average_precision(const std::vector<Detections>& dets,
                         const std::vector<std::vector<Annotation>>& gts, int class_id,
                         double iou_thresh);

struct EvalReport {
  std::map<int, double> per_class_ap;
  double map_score = 0.0;
  int n_images = 0;
  double iou_thresh = 0.5;
  std::string split;
  /// Classes with neither ground truth nor detections; left out of the mean.
  std::vector<int> excluded;
};

EvalReport mean_ap(const std::vector<Detections>& dets, const std::vector<std::vector<Annotation>>& gts,
                   const std::vector<int>& class_ids, double iou_thresh = 0.5, std::string split = {});

using DetectFn = std::function<Detections(const Sample&)>;

DetectFn model_detector(const Model& model, DetectOptions options = {});

/// Runs `detector` over the dataset and scores every class in `class_ids`
/// (the dataset's task classes when empty).
EvalReport evaluate(const DetectFn& detector, const Dataset& data, std::vector<int> class_ids = {},
                    double iou_thresh = 0.5, std::string split = {});

struct BiasReliance {
  double map_original = 0.0;
  double map_flipped = 0.0;
  double delta = 0.0;  // map_original - map_flipped
};

/// mAP drop when every scene's bias attribute is cyclically reassigned.
BiasReliance bias_reliance(const DetectFn& detector, const Dataset& data);
BiasReliance bias_reliance(const Model& model, const Dataset& data);

struct ForgettingRow {
  int class_id = 0;
  std::string status;  // "old" or "new"
  std::optional<double> before;
  double after = 0.0;
  std::optional<double> delta;
};

struct ForgettingReport {
  std::vector<ForgettingRow> rows;
  double old_map_before = 0.0;
  double old_map_after = 0.0;
  double retention = 1.0;  // old_map_after / old_map_before
  double new_map = 0.0;
  double all_map = 0.0;
};

ForgettingReport forgetting_report(const EvalReport& before, const EvalReport& after,
                                   const std::vector<int>& old_classes, const std::vector<int>& new_classes);

enum class FeatureKind { F, Fc, Fb };
std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);

struct FeatureRow {
  int class_id = 0;
  FeatureKind kind = FeatureKind::F;
  int image = 0;
  int instance = 0;
  std::vector<double> values;
};

struct FeatureTable {
  int channels = 0;
  std::vector<FeatureRow> rows;
  std::map<int, int> shortfall;  // class -> missing instances
  std::uint64_t seed = 0;
  int k_per_class = 0;

  /// Rows of one kind, in table order.
  std::vector<const FeatureRow*> of_kind(FeatureKind kind) const;
};

/// Crops every sampled ground-truth box out of each requested feature map
/// (box projected by the stride), average-pools it to a C-vector. The causal
/// feature uses `r_mode` (r = 1 by default).
FeatureTable export_instance_features(const Model& model, const Dataset& data, int k_per_class,
                                      const std::vector<FeatureKind>& kinds, std::uint64_t seed,
                                      RandomWeightMode r_mode = RandomWeightMode::One);

/// Average of a C x H x W map over the cells covered by `box`.
std::vector<double> pool_box(const Tensor& feature, const Box& box, int stride);

struct Projected {
  int class_id = 0;
  double x = 0.0;
  double y = 0.0;
};

/// Projection on the two leading principal components of the centred rows.
/// Each component is signed so its largest-magnitude loading is positive.
std::vector<Projected> pca_2d(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels);
std::vector<Projected> pca_2d(const FeatureTable& table, FeatureKind kind);

/// Mean silhouette coefficient (Euclidean) of points grouped by label.
double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int>& labels);
double silhouette(const FeatureTable& table, FeatureKind kind);

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);
std::string to_csv(const EvalReport& report);

nlohmann::json to_json(const ForgettingReport& report);
ForgettingReport forgetting_report_from_json(const nlohmann::json& j);
std::string to_csv(const ForgettingReport& report);

std::string to_csv(const FeatureTable& table);
FeatureTable feature_table_from_csv(const std::string& text);

}  // namespace icod
