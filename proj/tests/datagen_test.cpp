#include <cmath>
#include <string>

#include <gtest/gtest.h>

#include "icod/datagen.hpp"
#include "icod/errors.hpp"
#include "testing.hpp"

namespace icod {
namespace {

const std::string kFixtures = ICOD_FIXTURES;

TaskDef four_class_task() { return TaskDef::make("t", {0, 1, 2, 3}); }

// Objects whose bias attribute is their own class signature.
std::pair<int, int> count_matches(const SceneSpec& s) {
  int matched = 0;
  for (const auto& o : s.objects) matched += s.bias_class(o) == o.class_id;
  return {matched, static_cast<int>(s.objects.size())};
}

// 99% normal-approximation binomial interval half-width.
double ci99(double p, int n) { return 2.576 * std::sqrt(p * (1 - p) / n); }

TEST(MakeScene, RhoOneAlwaysMatches) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(1.0, task.class_ids);
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto [m, n] = count_matches(make_scene(seed, task, bias));
    EXPECT_EQ(m, n);
  }
}

TEST(MakeScene, RhoZeroNeverMatches) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.0, task.class_ids);
  for (std::uint64_t seed = 0; seed < 300; ++seed) EXPECT_EQ(count_matches(make_scene(seed, task, bias)).first, 0);
}

TEST(MakeScene, EmpiricalMatchRateNearRho) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.95, task.class_ids);
  int matched = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto [m, n] = count_matches(make_scene(stable_hash(99, seed), task, bias));
    matched += m;
    total += n;
  }
  const double rate = static_cast<double>(matched) / total;
  EXPECT_GE(rate, 0.94);
  EXPECT_LE(rate, 0.96);
  EXPECT_LE(std::abs(rate - 0.95), ci99(0.95, total));
}

TEST(MakeScene, MissingSignatureIsConfigError) {
  const auto task = four_class_task();
  auto bias = BiasConfig::make(0.9, {0, 1, 2});
  EXPECT_THROW(make_scene(1, task, bias), ConfigError);
}

TEST(MakeScene, BoxesInsideImage) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.9, task.class_ids);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Sample s = render(make_scene(seed, task, bias));
    ASSERT_EQ(s.annotations.size(), s.scene.objects.size());
    for (std::size_t k = 0; k < s.annotations.size(); ++k) {
      const auto& a = s.annotations[k];
      EXPECT_EQ(a.class_id, s.scene.objects[k].class_id);
      EXPECT_TRUE(a.box.valid());
      EXPECT_GE(a.box.x1, 0);
      EXPECT_GE(a.box.y1, 0);
      EXPECT_LE(a.box.x2, task.image_size);
      EXPECT_LE(a.box.y2, task.image_size);
    }
  }
}

TEST(Render, Deterministic) {
  const auto task = four_class_task();
  const auto scene = make_scene(17, task, BiasConfig::make(0.8, task.class_ids));
  EXPECT_EQ(render(scene).image, render(scene).image);
}

TEST(Render, CentredSquareHasTightBox) {
  for (int k : {6, 8, 10, 14}) {
    SceneSpec scene;
    scene.image_size = 64;
    scene.palette = {{0, {0.9, 0.1, 0.1}}, {1, {0.1, 0.9, 0.1}}};
    scene.objects.push_back({0, ShapeKind::Square, 32, 32, k, 0, 0});
    const Sample s = render(scene);
    ASSERT_EQ(s.annotations.size(), 1u);
    const Box& b = s.annotations[0].box;
    EXPECT_EQ(b.width(), k) << "scale " << k;
    EXPECT_EQ(b.height(), k);
    EXPECT_DOUBLE_EQ(b.cx(), 32.0);
    EXPECT_DOUBLE_EQ(b.cy(), 32.0);
  }
}

TEST(Render, OutOfBoundsObjectIsGenerationError) {
  SceneSpec scene;
  scene.image_size = 64;
  scene.palette = {{0, {0.9, 0.1, 0.1}}};
  scene.objects.push_back({0, ShapeKind::Disc, 2, 2, 12, 0, 0});
  EXPECT_THROW(render(scene), GenerationError);
}

TEST(Render, FogZeroEqualsClear) {
  const auto task = four_class_task();
  auto scene = make_scene(5, task, BiasConfig::make(0.9, task.class_ids));
  const Sample clear = render(scene);
  scene.domain = Domain::fog(0.0);
  EXPECT_EQ(render(scene).image, clear.image);
}

TEST(FlipBias, CycleReturnsOriginal) {
  const auto task = four_class_task();
  const auto scene = make_scene(8, task, BiasConfig::make(0.9, task.class_ids));
  SceneSpec s = scene;
  for (int i = 0; i < 4; ++i) {
    s = flip_bias(s);
    if (i < 3) {
      EXPECT_NE(s, scene);
    }
  }
  EXPECT_EQ(s, scene);
}

TEST(FlipBias, AnnotationsUnchanged) {
  const auto task = four_class_task();
  const auto scene = make_scene(21, task, BiasConfig::make(0.9, task.class_ids));
  EXPECT_EQ(render(flip_bias(scene)).annotations, render(scene).annotations);
}

TEST(FlipBias, RhoOneDatasetFlippedNeverMatches) {
  const auto task = four_class_task();
  const Dataset ds = build_dataset(task, BiasConfig::make(1.0, task.class_ids), 200, 3);
  EXPECT_EQ(bias_match_rate(ds), 1.0);
  EXPECT_EQ(bias_match_rate(flip_dataset(ds)), 0.0);
}

TEST(FlipBias, SingleClassIsError) {
  const auto task = TaskDef::make("one", {2});
  const auto scene = make_scene(1, task, BiasConfig::make(1.0, {2}));
  EXPECT_THROW(flip_bias(scene), ArgumentError);
}

TEST(FlipBias, OnlyBiasPixelsChange) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.9, task.class_ids);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto scene = make_scene(seed, task, bias);
    const Sample a = render(scene), b = render(flip_bias(scene));
    const int n = task.image_size;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        bool in_tile = false, on_shape = false;
        for (const auto& o : scene.objects) {
          const int h = (o.scale + 1) / 2 + kTileMargin;
          in_tile = in_tile || (x >= o.cx - h && x < o.cx + h && y >= o.cy - h && y < o.cy + h);
        }
        for (const auto& ann : a.annotations)
          on_shape = on_shape || (x >= ann.box.x1 && x < ann.box.x2 && y >= ann.box.y1 && y < ann.box.y2 &&
                                  a.image.at(0, y, x) == 0.95 && a.image.at(1, y, x) == 0.95);
        if (!in_tile || on_shape) {
          for (int c = 0; c < 3; ++c) ASSERT_EQ(a.image.at(c, y, x), b.image.at(c, y, x)) << seed << " " << x << "," << y;
        }
      }
  }
}

TEST(Fog, ZeroIntensityIsIdentity) {
  const auto task = four_class_task();
  const Sample s = render(make_scene(2, task, BiasConfig::make(0.9, task.class_ids)));
  EXPECT_EQ(apply_fog(s, 0.0).image, s.image);
}

TEST(Fog, FullIntensityWithoutNoiseIsConstantHaze) {
  const auto task = four_class_task();
  const Sample s = render(make_scene(2, task, BiasConfig::make(0.9, task.class_ids)));
  const Sample f = apply_fog(s, 1.0, 0.0);
  for (double v : f.image.values()) EXPECT_EQ(v, kHazeLevel);
  EXPECT_EQ(f.annotations, s.annotations);
}

TEST(Fog, OutOfRangeIntensityIsArgumentError) {
  const auto task = four_class_task();
  const Sample s = render(make_scene(2, task, BiasConfig::make(0.9, task.class_ids)));
  EXPECT_THROW(apply_fog(s, 1.5), ArgumentError);
  EXPECT_THROW(apply_fog(s, -0.1), ArgumentError);
}

TEST(Fog, MeanPixelMatchesConvexCombination) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.9, task.class_ids);
  const double i = 0.6;
  double clear_sum = 0, fog_sum = 0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Sample s = render(make_scene(seed, task, bias));
    const Sample f = apply_fog(s, i);
    for (std::size_t k = 0; k < s.image.size(); ++k) {
      clear_sum += s.image[k];
      fog_sum += f.image[k];
    }
    n += s.image.size();
  }
  const double expected = (1 - i) * clear_sum / n + i * kHazeLevel;
  const double sigma = 0.05 * i / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(fog_sum / n, expected, 3 * sigma);
}

TEST(BuildDataset, Deterministic) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.9, task.class_ids);
  const Dataset a = build_dataset(task, bias, 30, 77), b = build_dataset(task, bias, 30, 77);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].annotations, b.samples[i].annotations);
  }
}

TEST(BuildDataset, WorkerCountDoesNotMatter) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.9, task.class_ids);
  const Dataset a = build_dataset(task, bias, 40, 5, Domain::fog(0.4), 1);
  const Dataset b = build_dataset(task, bias, 40, 5, Domain::fog(0.4), 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].scene, b.samples[i].scene);
  }
}

TEST(BuildDataset, SampleSeedIsStableHash) {
  const auto task = four_class_task();
  const auto bias = BiasConfig::make(0.9, task.class_ids);
  const Dataset ds = build_dataset(task, bias, 5, 123);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.samples[i].scene, make_scene(stable_hash(123, i), task, bias));
}

TEST(BuildDataset, MatchRateWithinBinomialInterval) {
  const auto task = four_class_task();
  const Dataset ds = build_dataset(task, BiasConfig::make(0.9, task.class_ids), 1000, 8);
  int objects = 0;
  for (const auto& s : ds.samples) objects += static_cast<int>(s.scene.objects.size());
  EXPECT_LE(std::abs(bias_match_rate(ds) - 0.9), ci99(0.9, objects));
}

TEST(BuildDataset, NonPositiveSizeIsArgumentError) {
  const auto task = four_class_task();
  EXPECT_THROW(build_dataset(task, BiasConfig::make(0.9, task.class_ids), 0, 1), ArgumentError);
}

TEST(TaskDef, Validation) {
  auto t = four_class_task();
  t.image_size = 16;
  EXPECT_THROW(t.validate(), ConfigError);
  t = four_class_task();
  t.min_objects = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = four_class_task();
  t.class_ids = {0, 0};
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Voc, TwoObjects) {
  const auto objs = load_voc_xml(kFixtures + "/voc_two_objects.xml");
  ASSERT_EQ(objs.size(), 2u);
  EXPECT_EQ(objs[0].name, "chair");
  EXPECT_EQ(objs[0].box, (Box{263, 211, 324, 339}));
  EXPECT_EQ(objs[1].name, "dog");
  EXPECT_EQ(objs[1].box, (Box{5.5, 10, 120, 98.25}));
}

TEST(Voc, NoObjects) { EXPECT_TRUE(load_voc_xml(kFixtures + "/voc_empty.xml").empty()); }

TEST(Voc, TruncatedFileIsParseError) {
  EXPECT_THROW(load_voc_xml(kFixtures + "/voc_truncated.xml"), ParseError);
}

TEST(Voc, MissingFieldNamesElement) {
  try {
    load_voc_xml(kFixtures + "/voc_missing_field.xml");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("object[1]/bndbox/xmax"), std::string::npos) << e.what();
  }
}

TEST(Voc, MissingFileIsParseError) { EXPECT_THROW(load_voc_xml(kFixtures + "/nope.xml"), ParseError); }

}  // namespace
}  // namespace icod
