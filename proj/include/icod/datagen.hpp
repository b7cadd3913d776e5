#pragma once

// Synthetic detection scenes with a controllable spurious cue.
//
// Every object carries a bias attribute (a colour) drawn from a per-class
// signature table. With probability rho the attribute is the object's own
// class signature, otherwise another class's. The object's shape is the only
// cue that is always correct.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "icod/box.hpp"
#include "icod/tensor.hpp"

namespace icod {

enum class ShapeKind { Square, Disc, Triangle, Cross, Ring, Bar, Diamond, Frame };
enum class BiasKind { BackgroundColor, ObjectColor, CornerPatch };

using Color = std::array<double, 3>;

std::string to_string(ShapeKind kind);
std::string to_string(BiasKind kind);
ShapeKind shape_from_string(const std::string& name);
BiasKind bias_kind_from_string(const std::string& name);

struct TaskDef {
  std::string task_id;
  std::vector<int> class_ids;
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 3;
  int min_scale = 10;
  int max_scale = 16;
  std::map<int, ShapeKind> shapes;

  /// Task over `class_ids` with the default class -> shape vocabulary.
  static TaskDef make(std::string id, std::vector<int> class_ids);
  void validate() const;
};

struct BiasConfig {
  double rho = 0.95;
  BiasKind kind = BiasKind::BackgroundColor;
  std::map<int, Color> signatures;

  /// Signatures from the built-in palette, one per class id.
  static BiasConfig make(double rho, const std::vector<int>& class_ids,
                         BiasKind kind = BiasKind::BackgroundColor);
  void validate_for(const TaskDef& task) const;
};

struct Domain {
  enum class Kind { Clear, Fog };
  Kind kind = Kind::Clear;
  double intensity = 0.0;

  static Domain clear() { return {}; }
  static Domain fog(double intensity) { return {Kind::Fog, intensity}; }
  friend bool operator==(const Domain&, const Domain&) = default;
};

struct SceneObject {
  int class_id = 0;
  ShapeKind shape = ShapeKind::Square;
  int cx = 0;
  int cy = 0;
  int scale = 0;
  int orientation = 0;  // quarter turns
  int bias_slot = 0;    // index into SceneSpec::palette

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int image_size = 64;
  BiasKind bias_kind = BiasKind::BackgroundColor;
  // (class_id, signature) in task class order; flip_bias cycles through it.
  std::vector<std::pair<int, Color>> palette;
  std::vector<SceneObject> objects;
  Domain domain;
  double fog_noise = 0.05;

  int bias_class(const SceneObject& obj) const { return palette.at(obj.bias_slot).first; }
  const Color& bias_color(const SceneObject& obj) const { return palette.at(obj.bias_slot).second; }

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Annotation {
  int class_id = 0;
  Box box;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Sample {
  Tensor image;  // 3 x H x W in [0, 1]
  std::vector<Annotation> annotations;
  SceneSpec scene;
};

struct Dataset {
  TaskDef task;
  BiasConfig bias;
  Domain domain;
  std::uint64_t base_seed = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Pixels of padding between an object's scale square and its bias tile.
inline constexpr int kTileMargin = 4;
inline constexpr double kHazeLevel = 0.8;

SceneSpec make_scene(std::uint64_t seed, const TaskDef& task, const BiasConfig& bias);

Sample render(const SceneSpec& scene);

/// Shifts every object's bias attribute to the next class in the palette.
SceneSpec flip_bias(const SceneSpec& scene);

/// Haze blend plus seeded noise of std noise_scale * intensity, clipped.
Sample apply_fog(const Sample& sample, double intensity, double noise_scale = 0.05);

/// Sample i uses seed stable_hash(base_seed, i); `workers` only changes speed.
Dataset build_dataset(const TaskDef& task, const BiasConfig& bias, int n, std::uint64_t base_seed,
                      Domain domain = Domain::clear(), int workers = 1);

/// Re-renders every scene with flip_bias applied.
Dataset flip_dataset(const Dataset& dataset, int workers = 1);

/// Fraction of objects whose bias attribute is their own class signature.
double bias_match_rate(const Dataset& dataset);

struct VocObject {
  std::string name;
  Box box;
};

/// Reads object/name and object/bndbox from a VOC annotation file.
std::vector<VocObject> load_voc_xml(const std::string& path);

}  // namespace icod
