#include "icod/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "icod/errors.hpp"
#include "icod/rng.hpp"

namespace icod {
namespace {

constexpr Color kBackground = {0.35, 0.35, 0.35};
constexpr Color kInk = {0.95, 0.95, 0.95};
constexpr int kPatchSize = 4;

constexpr std::array<Color, 12> kPalette = {{
    {0.90, 0.10, 0.10},
    {0.10, 0.75, 0.15},
    {0.15, 0.25, 0.95},
    {0.95, 0.85, 0.10},
    {0.85, 0.15, 0.85},
    {0.10, 0.85, 0.85},
    {0.95, 0.50, 0.05},
    {0.50, 0.20, 0.70},
    {0.55, 0.35, 0.15},
    {0.60, 0.90, 0.40},
    {0.05, 0.40, 0.45},
    {0.95, 0.60, 0.70},
}};

// Whether the shape covers the point (dx, dy) relative to its centre.
bool covers(ShapeKind shape, int orientation, double s, double dx, double dy) {
  // Quarter-turn rotation of the sample point into the shape frame.
  for (int k = 0; k < (orientation & 3); ++k) {
    const double t = dx;
    dx = dy;
    dy = -t;
  }
  const double h = 0.5 * s;
  const double ax = std::abs(dx);
  const double ay = std::abs(dy);
  switch (shape) {
    case ShapeKind::Square:
      return ax < h && ay < h;
    case ShapeKind::Disc:
      return dx * dx + dy * dy < h * h;
    case ShapeKind::Triangle:
      // apex up, base down
      return dy > -h && dy < h && ax < 0.5 * (dy + h);
    case ShapeKind::Cross: {
      const double arm = s / 6.0;
      return (ax < arm && ay < h) || (ay < arm && ax < h);
    }
    case ShapeKind::Ring: {
      const double r2 = dx * dx + dy * dy;
      const double inner = h - std::max(2.0, s / 5.0);
      return r2 < h * h && r2 >= inner * inner;
    }
    case ShapeKind::Bar:
      return ax < h && ay < s / 5.0;
    case ShapeKind::Diamond:
      return ax + ay < h;
    case ShapeKind::Frame: {
      const double inner = h - 2.0;
      return ax < h && ay < h && !(ax < inner && ay < inner);
    }
  }
  return false;
}

void paint(Tensor& image, int x, int y, const Color& c) {
  for (int ch = 0; ch < 3; ++ch) image.at(ch, y, x) = c[ch];
}

void paint_rect(Tensor& image, int x1, int y1, int x2, int y2, const Color& c) {
  for (int y = y1; y < y2; ++y)
    for (int x = x1; x < x2; ++x) paint(image, x, y, c);
}

// Half-extent of the square an object reserves (scale square + tile margin
// + room for a corner patch).
int footprint(const SceneObject& o) { return (o.scale + 1) / 2 + kTileMargin + 2; }

}  // namespace

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Square: return "square";
    case ShapeKind::Disc: return "disc";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Cross: return "cross";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Bar: return "bar";
    case ShapeKind::Diamond: return "diamond";
    case ShapeKind::Frame: return "frame";
  }
  return "?";
}

std::string to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::BackgroundColor: return "background_color";
    case BiasKind::ObjectColor: return "object_color";
    case BiasKind::CornerPatch: return "corner_patch";
  }
  return "?";
}

ShapeKind shape_from_string(const std::string& name) {
  for (int k = 0; k < 8; ++k) {
    const auto kind = static_cast<ShapeKind>(k);
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown shape kind '" + name + "'");
}

BiasKind bias_kind_from_string(const std::string& name) {
  for (auto kind : {BiasKind::BackgroundColor, BiasKind::ObjectColor, BiasKind::CornerPatch}) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown bias kind '" + name + "'");
}

TaskDef TaskDef::make(std::string id, std::vector<int> class_ids) {
  TaskDef task;
  task.task_id = std::move(id);
  task.class_ids = std::move(class_ids);
  for (int c : task.class_ids) task.shapes[c] = static_cast<ShapeKind>(c % 8);
  return task;
}

void TaskDef::validate() const {
  if (class_ids.empty()) throw ConfigError("task '" + task_id + "' has no classes");
  if (image_size < 32) throw ConfigError("image_size must be >= 32");
  if (min_objects < 1 || max_objects < min_objects)
    throw ConfigError("objects_per_image range must satisfy 1 <= min <= max");
  if (min_scale < 4 || max_scale < min_scale)
    throw ConfigError("scale range must satisfy 4 <= min <= max");
  if (2 * ((max_scale + 1) / 2 + kTileMargin + 2) >= image_size)
    throw ConfigError("max_scale too large for image_size");
  for (int c : class_ids) {
    if (c < 0) throw ConfigError("class ids must be non-negative");
    if (!shapes.contains(c))
      throw ConfigError("class " + std::to_string(c) + " has no shape in the vocabulary");
  }
  auto sorted = class_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("duplicate class id in task '" + task_id + "'");
}

BiasConfig BiasConfig::make(double rho, const std::vector<int>& class_ids, BiasKind kind) {
  BiasConfig cfg;
  cfg.rho = rho;
  cfg.kind = kind;
  for (int c : class_ids) cfg.signatures[c] = kPalette[static_cast<std::size_t>(c) % kPalette.size()];
  return cfg;
}

void BiasConfig::validate_for(const TaskDef& task) const {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  for (int c : task.class_ids) {
    if (!signatures.contains(c))
      throw ConfigError("missing bias signature for class " + std::to_string(c));
  }
}

SceneSpec make_scene(std::uint64_t seed, const TaskDef& task, const BiasConfig& bias) {
  task.validate();
  bias.validate_for(task);

  SceneSpec scene;
  scene.seed = seed;
  scene.image_size = task.image_size;
  scene.bias_kind = bias.kind;
  for (int c : task.class_ids) scene.palette.emplace_back(c, bias.signatures.at(c));

  Rng rng(seed);
  const int k = static_cast<int>(task.class_ids.size());
  const int n_objects = rng.between(task.min_objects, task.max_objects);
  for (int i = 0; i < n_objects; ++i) {
    SceneObject obj;
    const int slot = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    obj.class_id = task.class_ids[static_cast<std::size_t>(slot)];
    obj.shape = task.shapes.at(obj.class_id);
    obj.scale = rng.between(task.min_scale, task.max_scale);
    obj.orientation = static_cast<int>(rng.below(4));
    if (k == 1 || rng.bernoulli(bias.rho)) {
      obj.bias_slot = slot;
    } else {
      const int other = static_cast<int>(rng.below(static_cast<std::uint64_t>(k - 1)));
      obj.bias_slot = other >= slot ? other + 1 : other;
    }

    const int m = footprint(obj);
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      obj.cx = rng.between(m, task.image_size - m);
      obj.cy = rng.between(m, task.image_size - m);
      placed = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
        const int gap = footprint(o) + m;
        return std::abs(o.cx - obj.cx) >= gap || std::abs(o.cy - obj.cy) >= gap;
      });
    }
    if (placed) scene.objects.push_back(obj);
  }
  return scene;
}

Sample render(const SceneSpec& scene) {
  const int size = scene.image_size;
  Sample sample;
  sample.scene = scene;
  sample.image = Tensor({3, size, size});
  for (int ch = 0; ch < 3; ++ch)
    std::fill_n(sample.image.data() + static_cast<std::size_t>(ch) * size * size,
                static_cast<std::size_t>(size) * size, kBackground[ch]);

  for (const auto& obj : scene.objects) {
    const int m = footprint(obj);
    if (obj.cx - m < 0 || obj.cy - m < 0 || obj.cx + m > size || obj.cy + m > size) {
      throw GenerationError("object of class " + std::to_string(obj.class_id) + " at (" +
                            std::to_string(obj.cx) + "," + std::to_string(obj.cy) +
                            ") does not fit in the image");
    }
    const Color& cue = scene.bias_color(obj);
    const int h = (obj.scale + 1) / 2;
    Color ink = kInk;
    switch (scene.bias_kind) {
      case BiasKind::BackgroundColor:
        paint_rect(sample.image, obj.cx - h - kTileMargin, obj.cy - h - kTileMargin,
                   obj.cx + h + kTileMargin, obj.cy + h + kTileMargin, cue);
        break;
      case BiasKind::ObjectColor:
        ink = cue;
        break;
      case BiasKind::CornerPatch:
        paint_rect(sample.image, obj.cx - h - kPatchSize - 1, obj.cy - h - kPatchSize - 1,
                   obj.cx - h - 1, obj.cy - h - 1, cue);
        break;
    }

    int x1 = size, y1 = size, x2 = -1, y2 = -1;
    for (int y = obj.cy - h - 1; y <= obj.cy + h; ++y) {
      for (int x = obj.cx - h - 1; x <= obj.cx + h; ++x) {
        const double dx = x + 0.5 - obj.cx;
        const double dy = y + 0.5 - obj.cy;
        if (!covers(obj.shape, obj.orientation, obj.scale, dx, dy)) continue;
        paint(sample.image, x, y, ink);
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
    }
    if (x2 < 0) throw GenerationError("shape rasterised to zero pixels");
    sample.annotations.push_back({obj.class_id, Box{double(x1), double(y1), double(x2 + 1), double(y2 + 1)}});
  }

  if (scene.domain.kind == Domain::Kind::Fog && scene.domain.intensity > 0.0) {
    sample = apply_fog(sample, scene.domain.intensity, scene.fog_noise);
  }
  return sample;
}

SceneSpec flip_bias(const SceneSpec& scene) {
  const int k = static_cast<int>(scene.palette.size());
  if (k < 2) throw ArgumentError("flip_bias needs at least two classes");
  SceneSpec flipped = scene;
  for (auto& obj : flipped.objects) obj.bias_slot = (obj.bias_slot + 1) % k;
  return flipped;
}

Sample apply_fog(const Sample& sample, double intensity, double noise_scale) {
  if (!(intensity >= 0.0 && intensity <= 1.0))
    throw ArgumentError("fog intensity must lie in [0, 1], got " + std::to_string(intensity));
  if (intensity == 0.0) return sample;
  Sample out = sample;
  const double sigma = noise_scale * intensity;
  Rng rng(stable_hash(sample.scene.seed, 0xf09f09ULL));
  for (double& v : out.image.values()) {
    double x = (1.0 - intensity) * v + intensity * kHazeLevel;
    if (sigma > 0.0) x += sigma * rng.normal();
    v = std::clamp(x, 0.0, 1.0);
  }
  return out;
}

namespace {

template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  workers = std::clamp(workers, 1, std::max(1, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
}

}  // namespace

Dataset build_dataset(const TaskDef& task, const BiasConfig& bias, int n, std::uint64_t base_seed,
                      Domain domain, int workers) {
  if (n <= 0) throw ArgumentError("dataset size must be >= 1, got " + std::to_string(n));
  if (!(domain.intensity >= 0.0 && domain.intensity <= 1.0))
    throw ArgumentError("fog intensity must lie in [0, 1]");
  task.validate();
  bias.validate_for(task);

  Dataset ds{task, bias, domain, base_seed, std::vector<Sample>(static_cast<std::size_t>(n))};
  parallel_for(n, workers, [&](int i) {
    SceneSpec scene = make_scene(stable_hash(base_seed, static_cast<std::uint64_t>(i)), task, bias);
    scene.domain = domain;
    ds.samples[static_cast<std::size_t>(i)] = render(scene);
  });
  return ds;
}

Dataset flip_dataset(const Dataset& dataset, int workers) {
  Dataset out = dataset;
  parallel_for(static_cast<int>(dataset.size()), workers, [&](int i) {
    out.samples[static_cast<std::size_t>(i)] = render(flip_bias(dataset.samples[static_cast<std::size_t>(i)].scene));
  });
  return out;
}

double bias_match_rate(const Dataset& dataset) {
  std::size_t total = 0, matched = 0;
  for (const auto& s : dataset.samples) {
    for (const auto& obj : s.scene.objects) {
      ++total;
      if (s.scene.bias_class(obj) == obj.class_id) ++matched;
    }
  }
  return total ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
}

}  // namespace icod
