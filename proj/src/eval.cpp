#include "icod/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "icod/errors.hpp"
#include "icod/rng.hpp"

namespace icod {
namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Ranked {
  double score;
  int image;
  Box box;
};

}  // namespace

double average_precision(const std::vector<Detections>& dets, const std::vector<std::vector<Annotation>>& gts,
                         int class_id, double iou_thresh) {
  if (dets.size() != gts.size()) throw ArgumentError("average_precision: detections and ground truth differ in image count");
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.class_id == class_id) ranked.push_back({d.score, static_cast<int>(i), d.box});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<Box>> truth(gts.size());
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& a : gts[i])
      if (a.class_id == class_id) {
        truth[i].push_back(a.box);
        ++n_gt;
      }
  if (n_gt == 0) return 0.0;

  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(truth[i].size(), 0);

  std::vector<char> is_tp(ranked.size(), 0);
  std::vector<double> precision(ranked.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& cand = truth[static_cast<std::size_t>(r.image)];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      const double o = iou(r.box, cand[j]);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= iou_thresh && !used[static_cast<std::size_t>(r.image)][best_j]) {
      used[static_cast<std::size_t>(r.image)][best_j] = 1;
      is_tp[k] = 1;
      ++tp;
    }
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }

  // Area under the interpolated curve: each true positive adds 1/n_gt
  // recall at the best precision reachable from its rank onwards.
  for (std::size_t k = ranked.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  for (std::size_t k = 0; k < ranked.size(); ++k)
    if (is_tp[k]) ap += precision[k] / static_cast<double>(n_gt);
  return ap;
}

EvalReport mean_ap(const std::vector<Detections>& dets, const std::vector<std::vector<Annotation>>& gts,
                   const std::vector<int>& class_ids, double iou_thresh, std::string split) {
  if (class_ids.empty()) throw ArgumentError("mean_ap: no classes to evaluate");
  EvalReport report;
  report.n_images = static_cast<int>(gts.size());
  report.iou_thresh = iou_thresh;
  report.split = std::move(split);
  double sum = 0.0;
  for (int c : class_ids) {
    bool any_gt = false, any_det = false;
    for (const auto& img : gts) any_gt = any_gt || std::any_of(img.begin(), img.end(), [c](const Annotation& a) { return a.class_id == c; });
    for (const auto& img : dets) any_det = any_det || std::any_of(img.begin(), img.end(), [c](const Detection& d) { return d.class_id == c; });
    if (!any_gt && !any_det) {
      report.excluded.push_back(c);
      continue;
    }
    const double ap = average_precision(dets, gts, c, iou_thresh);
    report.per_class_ap[c] = ap;
    sum += ap;
  }
  report.map_score = report.per_class_ap.empty() ? 0.0 : sum / static_cast<double>(report.per_class_ap.size());
  return report;
}

DetectFn model_detector(const Model& model, DetectOptions options) {
  return [&model, options](const Sample& s) { return detect(model, s.image, options); };
}

EvalReport evaluate(const DetectFn& detector, const Dataset& data, std::vector<int> class_ids, double iou_thresh,
                    std::string split) {
  if (class_ids.empty()) class_ids = data.task.class_ids;
  std::vector<Detections> dets;
  std::vector<std::vector<Annotation>> gts;
  dets.reserve(data.size());
  gts.reserve(data.size());
  for (const auto& s : data.samples) {
    dets.push_back(detector(s));
    gts.push_back(s.annotations);
  }
  return mean_ap(dets, gts, class_ids, iou_thresh, std::move(split));
}

BiasReliance bias_reliance(const DetectFn& detector, const Dataset& data) {
  if (data.task.class_ids.size() < 2) throw ArgumentError("bias_reliance needs a task with at least two classes");
  BiasReliance out;
  out.map_original = evaluate(detector, data).map_score;
  out.map_flipped = evaluate(detector, flip_dataset(data)).map_score;
  out.delta = out.map_original - out.map_flipped;
  return out;
}

BiasReliance bias_reliance(const Model& model, const Dataset& data) {
  return bias_reliance(model_detector(model), data);
}

ForgettingReport forgetting_report(const EvalReport& before, const EvalReport& after,
                                   const std::vector<int>& old_classes, const std::vector<int>& new_classes) {
  ForgettingReport r;
  for (int c : new_classes)
    if (std::find(old_classes.begin(), old_classes.end(), c) != old_classes.end())
      throw ArgumentError("class " + std::to_string(c) + " listed as both old and new");
  double before_sum = 0, after_sum = 0;
  for (int c : old_classes) {
    if (!before.per_class_ap.contains(c) || !after.per_class_ap.contains(c))
      throw ArgumentError("old class " + std::to_string(c) + " missing from a report");
    const double b = before.per_class_ap.at(c), a = after.per_class_ap.at(c);
    r.rows.push_back({c, "old", b, a, a - b});
    before_sum += b;
    after_sum += a;
  }
  double new_sum = 0;
  for (int c : new_classes) {
    if (!after.per_class_ap.contains(c)) throw ArgumentError("new class " + std::to_string(c) + " missing from the after report");
    const double a = after.per_class_ap.at(c);
    r.rows.push_back({c, "new", std::nullopt, a, std::nullopt});
    new_sum += a;
  }
  if (!old_classes.empty()) {
    r.old_map_before = before_sum / static_cast<double>(old_classes.size());
    r.old_map_after = after_sum / static_cast<double>(old_classes.size());
    r.retention = r.old_map_before > 0 ? r.old_map_after / r.old_map_before : 0.0;
  }
  if (!new_classes.empty()) r.new_map = new_sum / static_cast<double>(new_classes.size());
  const auto total = old_classes.size() + new_classes.size();
  if (total) r.all_map = (after_sum + new_sum) / static_cast<double>(total);
  return r;
}

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::F: return "F";
    case FeatureKind::Fc: return "F_c";
    case FeatureKind::Fb: return "F_b";
  }
  return "?";
}

FeatureKind feature_kind_from_string(const std::string& name) {
  for (auto k : {FeatureKind::F, FeatureKind::Fc, FeatureKind::Fb})
    if (to_string(k) == name) return k;
  throw ParseError("unknown feature kind '" + name + "'");
}

std::vector<const FeatureRow*> FeatureTable::of_kind(FeatureKind kind) const {
  std::vector<const FeatureRow*> out;
  for (const auto& r : rows)
    if (r.kind == kind) out.push_back(&r);
  return out;
}

std::vector<double> pool_box(const Tensor& feature, const Box& box, int stride) {
  const int c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const int x0 = std::clamp(static_cast<int>(std::floor(box.x1 / stride)), 0, w - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(box.y1 / stride)), 0, h - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil(box.x2 / stride)), x0 + 1, w);
  const int y1 = std::clamp(static_cast<int>(std::ceil(box.y2 / stride)), y0 + 1, h);
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  const double cells = static_cast<double>((x1 - x0) * (y1 - y0));
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) s += feature.at(ch, y, x);
    out[static_cast<std::size_t>(ch)] = s / cells;
  }
  return out;
}

FeatureTable export_instance_features(const Model& model, const Dataset& data, int k_per_class,
                                      const std::vector<FeatureKind>& kinds, std::uint64_t seed,
                                      RandomWeightMode r_mode) {
  if (k_per_class < 1) throw ArgumentError("k_per_class must be >= 1");
  FeatureTable table;
  table.channels = model.config.feature_channels();
  table.seed = seed;
  table.k_per_class = k_per_class;

  // (image, annotation) pairs per class, in dataset order.
  std::map<int, std::vector<std::pair<int, int>>> instances;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ann = data.samples[i].annotations;
    for (std::size_t a = 0; a < ann.size(); ++a)
      instances[ann[a].class_id].emplace_back(static_cast<int>(i), static_cast<int>(a));
  }

  Rng rng(seed);
  std::vector<std::pair<int, int>> chosen;
  for (int c : data.task.class_ids) {
    auto pool = instances[c];
    if (static_cast<int>(pool.size()) < k_per_class) {
      table.shortfall[c] = k_per_class - static_cast<int>(pool.size());
    } else {
      // Partial Fisher-Yates, then restore dataset order.
      for (int k = 0; k < k_per_class; ++k) {
        const auto j = static_cast<std::size_t>(k) + rng.below(pool.size() - static_cast<std::size_t>(k));
        std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
      }
      pool.resize(static_cast<std::size_t>(k_per_class));
      std::sort(pool.begin(), pool.end());
    }
    chosen.insert(chosen.end(), pool.begin(), pool.end());
  }
  std::sort(chosen.begin(), chosen.end());

  Rng r_rng(stable_hash(seed, 7));
  int current = -1;
  FeatureMap f;
  Tensor fb, fc;
  for (const auto& [img, a] : chosen) {
    const Sample& s = data.samples[static_cast<std::size_t>(img)];
    if (img != current) {
      current = img;
      f = backbone_forward(s.image, model);
      fb = bias_feature(f.data, channel_weight(f.data, model), channel_bias(f.data, model));
      fc = causal_feature(f.data, fb, sample_r(r_rng, f.data.dim(0), r_mode));
    }
    const auto& ann = s.annotations[static_cast<std::size_t>(a)];
    for (FeatureKind kind : kinds) {
      const Tensor& src = kind == FeatureKind::F ? f.data : (kind == FeatureKind::Fc ? fc : fb);
      table.rows.push_back({ann.class_id, kind, img, a, pool_box(src, ann.box, f.stride)});
    }
  }
  return table;
}

std::vector<Projected> pca_2d(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels) {
  if (rows.size() < 2) throw ArgumentError("pca_2d needs at least two rows");
  if (labels.size() != rows.size()) throw ArgumentError("pca_2d: label count mismatch");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  if (d < 2) throw ArgumentError("pca_2d needs at least two dimensions");
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != d)
      throw ArgumentError("pca_2d: ragged rows");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);

  std::vector<Projected> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i].class_id = labels[i];
  if (cov.cwiseAbs().maxCoeff() == 0.0) return out;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  for (int comp = 0; comp < 2; ++comp) {
    const Eigen::Index col = d - 1 - comp;
    if (values(col) <= 0.0) continue;
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = x * v;
    for (Eigen::Index i = 0; i < n; ++i) (comp == 0 ? out[static_cast<std::size_t>(i)].x : out[static_cast<std::size_t>(i)].y) = proj(i);
  }
  return out;
}

std::vector<Projected> pca_2d(const FeatureTable& table, FeatureKind kind) {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (const auto* r : table.of_kind(kind)) {
    rows.push_back(r->values);
    labels.push_back(r->class_id);
  }
  return pca_2d(rows, labels);
}

double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int>& labels) {
  if (points.size() != labels.size()) throw ArgumentError("silhouette: label count mismatch");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  if (groups.size() < 2) return 0.0;

  auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t k = 0; k < points[a].size(); ++k) {
      const double d = points[a][k] - points[b][k];
      s += d * d;
    }
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& own = groups[labels[i]];
    if (own.size() < 2) continue;  // singleton clusters score 0
    double a = 0;
    for (std::size_t j : own)
      if (j != i) a += dist(i, j);
    a /= static_cast<double>(own.size() - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, members] : groups) {
      if (label == labels[i]) continue;
      double m = 0;
      for (std::size_t j : members) m += dist(i, j);
      b = std::min(b, m / static_cast<double>(members.size()));
    }
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(points.size());
}

double silhouette(const FeatureTable& table, FeatureKind kind) {
  std::vector<std::vector<double>> pts;
  std::vector<int> labels;
  for (const auto* r : table.of_kind(kind)) {
    pts.push_back(r->values);
    labels.push_back(r->class_id);
  }
  return silhouette(pts, labels);
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json j;
  j["split"] = report.split;
  j["n_images"] = report.n_images;
  j["iou_thresh"] = report.iou_thresh;
  j["mAP"] = report.map_score;
  auto& per = j["per_class_ap"] = nlohmann::json::object();
  for (const auto& [c, ap] : report.per_class_ap) per[std::to_string(c)] = ap;
  j["excluded"] = report.excluded;
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.split = j.value("split", "");
    r.n_images = j.at("n_images").get<int>();
    r.iou_thresh = j.at("iou_thresh").get<double>();
    r.map_score = j.at("mAP").get<double>();
    for (const auto& [k, v] : j.at("per_class_ap").items()) r.per_class_ap[std::stoi(k)] = v.get<double>();
    if (j.contains("excluded")) r.excluded = j.at("excluded").get<std::vector<int>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
}

std::string to_csv(const EvalReport& report) {
  std::string out = "class,AP\n";
  for (const auto& [c, ap] : report.per_class_ap) out += std::to_string(c) + "," + num(ap) + "\n";
  out += "mAP," + num(report.map_score) + "\n";
  return out;
}

nlohmann::json to_json(const ForgettingReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row{{"class", r.class_id}, {"status", r.status}, {"after", r.after}};
    row["before"] = r.before ? nlohmann::json(*r.before) : nlohmann::json(nullptr);
    row["delta"] = r.delta ? nlohmann::json(*r.delta) : nlohmann::json(nullptr);
    rows.push_back(row);
  }
  return {{"rows", rows},
          {"old_map_before", report.old_map_before},
          {"old_map_after", report.old_map_after},
          {"retention", report.retention},
          {"new_map", report.new_map},
          {"all_map", report.all_map}};
}

ForgettingReport forgetting_report_from_json(const nlohmann::json& j) {
  try {
    ForgettingReport r;
    for (const auto& row : j.at("rows")) {
      ForgettingRow fr;
      fr.class_id = row.at("class").get<int>();
      fr.status = row.at("status").get<std::string>();
      fr.after = row.at("after").get<double>();
      if (!row.at("before").is_null()) fr.before = row.at("before").get<double>();
      if (!row.at("delta").is_null()) fr.delta = row.at("delta").get<double>();
      r.rows.push_back(fr);
    }
    r.old_map_before = j.at("old_map_before").get<double>();
    r.old_map_after = j.at("old_map_after").get<double>();
    r.retention = j.at("retention").get<double>();
    r.new_map = j.at("new_map").get<double>();
    r.all_map = j.at("all_map").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("forgetting report: ") + e.what());
  }
}

std::string to_csv(const ForgettingReport& report) {
  std::string out = "class,status,before,after,delta\n";
  for (const auto& r : report.rows) {
    out += std::to_string(r.class_id) + "," + r.status + "," + (r.before ? num(*r.before) : "") + "," +
           num(r.after) + "," + (r.delta ? num(*r.delta) : "") + "\n";
  }
  return out;
}

std::string to_csv(const FeatureTable& table) {
  std::string out = "class_id,kind";
  for (int c = 0; c < table.channels; ++c) out += ",c" + std::to_string(c);
  out += "\n";
  for (const auto& r : table.rows) {
    out += std::to_string(r.class_id) + "," + to_string(r.kind);
    for (double v : r.values) out += "," + num(v);
    out += "\n";
  }
  return out;
}

FeatureTable feature_table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("class_id,kind", 0) != 0)
    throw ParseError("feature table: missing header");
  FeatureTable table;
  table.channels = static_cast<int>(std::count(line.begin(), line.end(), ',')) - 1;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    FeatureRow r;
    try {
      std::getline(row, cell, ',');
      r.class_id = std::stoi(cell);
      std::getline(row, cell, ',');
      r.kind = feature_kind_from_string(cell);
      while (std::getline(row, cell, ',')) r.values.push_back(std::stod(cell));
    } catch (const std::logic_error&) {
      throw ParseError("feature table line " + std::to_string(lineno) + ": bad value");
    }
    if (static_cast<int>(r.values.size()) != table.channels)
      throw ParseError("feature table line " + std::to_string(lineno) + ": wrong column count");
    table.rows.push_back(std::move(r));
  }
  return table;
}

}  // namespace icod
