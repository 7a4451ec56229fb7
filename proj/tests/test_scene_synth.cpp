#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "synmesh/errors.hpp"
#include "synmesh/scene_synth.hpp"

using namespace synmesh;
using namespace synmesh::scene;

namespace {

const body::BodyTemplate& small_template() {
  static const auto tpl = body::make_toy_template(body::BodyDims{120, 24, 10, 10}, 7);
  return tpl;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void expect_same(const SceneSample& a, const SceneSample& b) {
  ASSERT_EQ(a.instances.size(), b.instances.size());
  EXPECT_TRUE(torch::equal(a.image, b.image));
  EXPECT_EQ(a.occlusion.kind, b.occlusion.kind);
  for (std::size_t k = 0; k < a.instances.size(); ++k) {
    const auto& x = a.instances[k];
    const auto& y = b.instances[k];
    EXPECT_TRUE(torch::equal(x.params.theta, y.params.theta));
    EXPECT_TRUE(torch::equal(x.params.root_translation, y.params.root_translation));
    EXPECT_TRUE(torch::equal(x.joints3d, y.joints3d));
    EXPECT_TRUE(torch::equal(x.joints2d, y.joints2d));
    EXPECT_TRUE(torch::equal(x.detected2d, y.detected2d));
    EXPECT_TRUE(torch::equal(x.joint_conf, y.joint_conf));
    EXPECT_TRUE(torch::equal(x.vertices, y.vertices));
    EXPECT_TRUE(torch::equal(x.visibility, y.visibility));
  }
}

}  // namespace

TEST(Camera, ProjectionMatchesPinhole) {
  const auto cam = CameraModel::for_image(64, 64);
  EXPECT_DOUBLE_EQ(cam.cx, 31.5);
  const auto pts = torch::tensor({{0.3, -0.2, 5.0}, {0.0, 0.0, 2.0}}, torch::kFloat64);
  const auto uv = cam.project(pts);
  EXPECT_NEAR(uv[0][0].item<double>(), cam.focal * 0.3 / 5.0 + 31.5, 1e-12);
  EXPECT_NEAR(uv[0][1].item<double>(), cam.focal * -0.2 / 5.0 + 31.5, 1e-12);
  EXPECT_NEAR(uv[1][0].item<double>(), 31.5, 1e-12);
}

TEST(Scene, CleanSceneIsFullyVisibleAndDrawn) {
  SceneConfig cfg;
  cfg.min_instances = cfg.max_instances = 1;
  const auto s = sample_scene(3, cfg, small_template());
  ASSERT_GE(s.instances.size(), 1u);
  EXPECT_EQ(s.occlusion.kind, OcclusionKind::None);
  EXPECT_EQ(s.image.sizes(), (torch::IntArrayRef{64, 64, 3}));
  EXPECT_GT(s.image.sum().item<double>(), 0.0);
  EXPECT_GE(s.image.min().item<double>(), 0.0);
  EXPECT_LE(s.image.max().item<double>(), 1.0);
  for (const auto& in : s.instances) {
    // A lone person is hidden only where it leaves the frame.
    for (std::int64_t j = 0; j < in.joints2d.size(0); ++j) {
      const double u = in.joints2d[j][0].item<double>(), v = in.joints2d[j][1].item<double>();
      const bool inside = u >= 0 && u <= 63 && v >= 0 && v <= 63;
      if (inside) EXPECT_TRUE(in.visibility[j].item<bool>());
    }
    // The image is lit at the pixel under each root joint.
    const auto x = static_cast<std::int64_t>(std::lround(in.joints2d[0][0].item<double>()));
    const auto y = static_cast<std::int64_t>(std::lround(in.joints2d[0][1].item<double>()));
    if (x >= 0 && x < 64 && y >= 0 && y < 64) EXPECT_GT(s.image[y][x].sum().item<double>(), 0.0);
  }
}

TEST(Scene, SameSeedIsIdentical) {
  SceneConfig cfg;
  cfg.occlusion_prob = 0.7;
  for (std::uint64_t seed : {0u, 5u, 9u}) expect_same(sample_scene(seed, cfg, small_template()),
                                                      sample_scene(seed, cfg, small_template()));
}

TEST(Scene, ProjectionConsistency) {
  SceneConfig cfg;
  cfg.occlusion_prob = 0.5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = sample_scene(seed, cfg, small_template());
    for (const auto& in : s.instances) {
      const auto re = s.camera.project(in.joints3d.to(torch::kFloat64));
      EXPECT_LT((re - in.joints2d.to(torch::kFloat64)).abs().max().item<double>(), 1e-4);
    }
  }
}

TEST(Scene, PosePriorIsCentered) {
  SceneConfig cfg;
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto s = sample_scene(sample_seed(77, seed), cfg, small_template());
    for (const auto& in : s.instances) {
      sum += in.params.theta.to(torch::kFloat64).sum().item<double>();
      n += in.params.theta.numel();
    }
  }
  const double mean = sum / double(n);
  EXPECT_LT(std::abs(mean), 3.0 * cfg.pose_scale / std::sqrt(double(n)));
}

TEST(Scene, OcclusionRateFollowsProbability) {
  SceneConfig cfg;
  cfg.occlusion_prob = 0.5;
  cfg.min_instances = 1;
  cfg.max_instances = 2;
  int occluded = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i)
    if (sample_scene(sample_seed(123, i), cfg, small_template()).occlusion.kind != OcclusionKind::None) ++occluded;
  const double rate = double(occluded) / n;
  EXPECT_GE(rate, 0.45);
  EXPECT_LE(rate, 0.55);
}

TEST(Occlusion, PatchOverJointHidesIt) {
  SceneConfig cfg;
  cfg.min_instances = cfg.max_instances = 1;
  const auto s0 = sample_scene(4, cfg, small_template());
  auto s = s0;
  s.image = s0.image.clone();
  s.instances[0].visibility = s0.instances[0].visibility.clone();
  s.instances[0].joint_conf = s0.instances[0].joint_conf.clone();
  const auto x = s.instances[0].joints2d[5][0].item<double>();
  const auto y = s.instances[0].joints2d[5][1].item<double>();
  const auto box = torch::tensor({{std::floor(x) - 1, std::floor(y) - 1, std::ceil(x) + 1, std::ceil(y) + 1}},
                                 torch::kFloat32);
  auto rng = make_stream(1, 0, 0);
  occlude_with_boxes(s, box, rng);
  EXPECT_FALSE(s.instances[0].visibility[5].item<bool>());
  EXPECT_LE(s.instances[0].joint_conf[5].item<double>(), 0.2);
  EXPECT_GE(s.instances[0].joint_conf[5].item<double>(), 0.0);
}

TEST(Occlusion, FullFramePatchHidesEverything) {
  SceneConfig cfg;
  auto s = sample_scene(2, cfg, small_template());
  auto rng = make_stream(1, 0, 0);
  occlude_with_boxes(s, torch::tensor({{-100.f, -100.f, 200.f, 200.f}}), rng);
  for (const auto& in : s.instances) {
    EXPECT_FALSE(in.visibility.any().item<bool>());
    EXPECT_LE(in.joint_conf.max().item<double>(), 0.2);
  }
}

TEST(Occlusion, LargerPatchNeverRevealsJoints) {
  SceneConfig cfg;
  cfg.min_instances = cfg.max_instances = 2;
  const auto base = sample_scene(8, cfg, small_template());
  std::int64_t prev = 1 << 30;
  for (double half = 0; half <= 30; half += 3) {
    auto s = base;
    for (auto& in : s.instances) {
      in.visibility = in.visibility.clone();
      in.joint_conf = in.joint_conf.clone();
    }
    s.image = base.image.clone();
    auto rng = make_stream(2, 0, 0);
    occlude_with_boxes(s, torch::tensor({{float(31.5 - half), float(31.5 - half), float(31.5 + half),
                                          float(31.5 + half)}}),
                       rng);
    std::int64_t visible = 0;
    for (const auto& in : s.instances) visible += in.visibility.sum().item<std::int64_t>();
    EXPECT_LE(visible, prev);
    prev = visible;
  }
}

TEST(Occlusion, EveryKindKeepsGroundTruthConsistent) {
  SceneConfig cfg;
  cfg.min_instances = 2;
  cfg.max_instances = 3;
  const auto base = sample_scene(21, cfg, small_template());
  for (auto kind : {OcclusionKind::ObjectPatch, OcclusionKind::PersonOverlap, OcclusionKind::Truncation}) {
    auto rng = make_stream(5, 0, 1);
    const auto s = apply_occlusion(base, kind, rng, cfg, small_template());
    EXPECT_EQ(s.occlusion.kind, kind);
    for (const auto& in : s.instances) {
      const auto re = s.camera.project(in.joints3d.to(torch::kFloat64));
      EXPECT_LT((re - in.joints2d.to(torch::kFloat64)).abs().max().item<double>(), 1e-4);
      EXPECT_LE(in.joint_conf.max().item<double>(), 1.0);
      EXPECT_GE(in.joint_conf.min().item<double>(), 0.0);
    }
  }
}

TEST(Scene, FlipTwiceIsIdentity) {
  SceneConfig cfg;
  const auto s = sample_scene(13, cfg, small_template());
  const auto ff = flip_horizontal(flip_horizontal(s, small_template()), small_template());
  EXPECT_TRUE(torch::equal(ff.image, s.image));
  for (std::size_t k = 0; k < s.instances.size(); ++k) {
    EXPECT_LT((ff.instances[k].joints2d - s.instances[k].joints2d).abs().max().item<double>(), 1e-4);
    EXPECT_LT((ff.instances[k].vertices - s.instances[k].vertices).abs().max().item<double>(), 1e-4);
  }
}

TEST(Scene, BoxIou) {
  const auto a = torch::tensor({0.0, 0.0, 10.0, 10.0});
  const auto b = torch::tensor({5.0, 0.0, 15.0, 10.0});
  EXPECT_NEAR(box_iou(a, b), 50.0 / 150.0, 1e-9);
  EXPECT_NEAR(box_iou(a, a), 1.0, 1e-12);
  EXPECT_NEAR(box_iou(a, torch::tensor({20.0, 20.0, 30.0, 30.0})), 0.0, 1e-12);
}

TEST(Scene, ConfigValidation) {
  SceneConfig cfg;
  cfg.occlusion_prob = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.min_instances = 4;
  cfg.max_instances = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.max_instances = 9;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Dataset, RoundTrip) {
  SceneConfig cfg;
  cfg.occlusion_prob = 0.5;
  const auto data = generate_dataset(4, 8, cfg, small_template());
  const auto path = temp_path("synmesh_ds_roundtrip.smd");
  write_dataset(data, path, R"({"note":"x"})");
  std::string meta;
  const auto back = read_dataset(path, &meta);
  ASSERT_EQ(back.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) expect_same(data[i], back[i]);
  EXPECT_NE(meta.find("note"), std::string::npos);
  std::filesystem::remove(path);
}

TEST(Dataset, EmptyAndCorrupt) {
  const auto path = temp_path("synmesh_ds_empty.smd");
  write_dataset({}, path);
  EXPECT_TRUE(read_dataset(path).empty());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(read_dataset(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_dataset(path), MissingInputError);
}

TEST(Dataset, SerialGenerationMatchesPerSampleSeeds) {
  SceneConfig cfg;
  const auto data = generate_dataset(9, 3, cfg, small_template());
  for (std::int64_t i = 0; i < 3; ++i) expect_same(data[i], sample_scene(sample_seed(9, i), cfg, small_template()));
}
