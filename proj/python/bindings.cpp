#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cli.hpp"
#include "icod/checkpoint.hpp"
#include "icod/config.hpp"
#include "icod/decomposer.hpp"
#include "icod/detector.hpp"
#include "icod/errors.hpp"
#include "icod/eval.hpp"

namespace py = pybind11;
using namespace icod;

namespace {

using BoxTuple = std::tuple<double, double, double, double>;

Box to_box(const BoxTuple& t) { return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)}; }
BoxTuple from_box(const Box& b) { return {b.x1, b.y1, b.x2, b.y2}; }

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

Tensor from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::list annotations(const std::vector<Annotation>& anns) {
  py::list out;
  for (const auto& a : anns) out.append(py::make_tuple(a.class_id, from_box(a.box)));
  return out;
}

py::list detections(const Detections& dets) {
  py::list out;
  for (const auto& d : dets) out.append(py::make_tuple(from_box(d.box), d.class_id, d.score));
  return out;
}

std::vector<Detections> to_detections(const std::vector<std::vector<std::tuple<BoxTuple, int, double>>>& in) {
  std::vector<Detections> out;
  for (const auto& img : in) {
    Detections d;
    for (const auto& [b, c, s] : img) d.push_back({to_box(b), c, s});
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<std::vector<Annotation>> to_annotations(const std::vector<std::vector<std::tuple<int, BoxTuple>>>& in) {
  std::vector<std::vector<Annotation>> out;
  for (const auto& img : in) {
    std::vector<Annotation> a;
    for (const auto& [c, b] : img) a.push_back({c, to_box(b)});
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Incremental causal object detection on synthetic biased scenes";

  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_IOError);
  py::register_exception<VersionError>(m, "VersionError", PyExc_IOError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  m.def("iou", [](const BoxTuple& a, const BoxTuple& b) { return iou(to_box(a), to_box(b)); });
  m.def(
      "nms",
      [](const std::vector<BoxTuple>& boxes, const std::vector<double>& scores, double thresh) {
        std::vector<Box> bs;
        for (const auto& b : boxes) bs.push_back(to_box(b));
        return nms(bs, scores, thresh);
      },
      py::arg("boxes"), py::arg("scores"), py::arg("iou_thresh") = 0.5);
  m.def("smooth_l1", &smooth_l1);

  m.def(
      "mean_ap",
      [](const std::vector<std::vector<std::tuple<BoxTuple, int, double>>>& dets,
         const std::vector<std::vector<std::tuple<int, BoxTuple>>>& gts, const std::vector<int>& classes,
         double thresh) {
        const EvalReport r = mean_ap(to_detections(dets), to_annotations(gts), classes, thresh);
        return py::make_tuple(r.map_score, r.per_class_ap);
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("class_ids"), py::arg("iou_thresh") = 0.5,
      "Returns (mAP, {class: AP}). Detections are (box, class, score); ground truth is (class, box).");

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", [](const Dataset& d) { return d.samples.size(); })
      .def("image", [](const Dataset& d, std::size_t i) { return to_array(d.samples.at(i).image); })
      .def("annotations", [](const Dataset& d, std::size_t i) { return annotations(d.samples.at(i).annotations); })
      .def("bias_match_rate", [](const Dataset& d) { return bias_match_rate(d); })
      .def("flipped", [](const Dataset& d) { return flip_dataset(d); })
      .def("manifest", [](const Dataset& d) { return dataset_manifest(d).dump(); });

  m.def(
      "make_dataset",
      [](int n_classes, double rho, int n, std::uint64_t seed, int image_size) {
        std::vector<int> ids;
        for (int c = 0; c < n_classes; ++c) ids.push_back(c);
        TaskDef task = TaskDef::make("py", ids);
        task.image_size = image_size;
        return build_dataset(task, BiasConfig::make(rho, ids), n, seed);
      },
      py::arg("n_classes"), py::arg("rho"), py::arg("n"), py::arg("seed"), py::arg("image_size") = 64);

  py::class_<Model>(m, "Model")
      .def_static(
          "create",
          [](int n_classes, std::vector<int> channels, std::uint64_t seed) {
            ModelConfig c;
            c.n_classes = n_classes;
            c.channels = std::move(channels);
            return Model::create(c, seed);
          },
          py::arg("n_classes"), py::arg("channels") = std::vector<int>{3, 8, 16, 32}, py::arg("seed") = 0)
      .def_property_readonly("n_classes", [](const Model& m) { return m.config.n_classes; })
      .def_property_readonly("stride", [](const Model& m) { return m.config.stride(); })
      .def("param_names",
           [](const Model& m) {
             std::vector<std::string> names;
             for (const auto& p : m.params) names.push_back(p.name);
             return names;
           })
      .def("param", [](const Model& m, std::size_t i) {
             if (i >= m.params.size()) throw py::index_error("parameter index out of range");
             return to_array(m.params[i].value);
           })
      .def("features",
           [](const Model& m, const py::array_t<double>& image) {
             return to_array(backbone_forward(from_array(image), m).data);
           })
      .def(
          "decompose",
          [](const Model& m, const py::array_t<double>& feature) {
            const Tensor f = from_array(feature);
            const Tensor w = channel_weight(f, m), b = channel_bias(f, m);
            const Tensor fb = bias_feature(f, w, b);
            const Tensor fc = causal_feature(f, fb, std::vector<double>(static_cast<std::size_t>(f.dim(0)), 1.0));
            return py::make_tuple(to_array(w), to_array(b), to_array(fb), to_array(fc));
          },
          "Returns (w, b, F_b, F_c) with r = 1.")
      .def(
          "detect",
          [](const Model& m, const py::array_t<double>& image, double score_thresh, double nms_iou) {
            return detections(detect(m, from_array(image), {score_thresh, nms_iou}));
          },
          py::arg("image"), py::arg("score_thresh") = 0.01, py::arg("nms_iou") = 0.5)
      .def("bias_reliance",
           [](const Model& m, const Dataset& d) {
             const BiasReliance r = bias_reliance(m, d);
             return py::make_tuple(r.map_original, r.map_flipped, r.delta);
           })
      .def(
          "save",
          [](const Model& m, const std::string& path, std::int64_t step, const std::string& mode) {
            save_checkpoint(m, {step, -1, "", mode}, path);
          },
          py::arg("path"), py::arg("step") = 0, py::arg("mode") = "")
      .def_static("load", [](const std::string& path) { return load_checkpoint(path).model; });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"icod"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs the icod command line in-process; returns (exit code, stdout, stderr).");
}
