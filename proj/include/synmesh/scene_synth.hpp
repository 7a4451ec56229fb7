#pragma once

// Synthetic multi-person scenes: pseudo-images (joint-coloured Gaussian
// splats over vertex silhouettes, depth ordered) with full ground truth and
// controlled occlusion.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "synmesh/body_model.hpp"

namespace synmesh::scene {

struct CameraModel {
  double focal = 115.2;
  double cx = 31.5;
  double cy = 31.5;
  torch::Tensor rotation = torch::eye(3, torch::kFloat64);        // world -> camera
  torch::Tensor translation = torch::zeros({3}, torch::kFloat64);  // world -> camera

  // Pinhole camera for an H x W image with pixel centers at integer
  // coordinates.
  static CameraModel for_image(std::int64_t height, std::int64_t width);

  void validate() const;
  // points [...,3] world -> [...,2] pixels. Differentiable.
  torch::Tensor project(const torch::Tensor& points) const;
  // Depth along the optical axis.
  torch::Tensor depth(const torch::Tensor& points) const;
};

enum class OcclusionKind { None, ObjectPatch, PersonOverlap, Truncation };

std::string to_string(OcclusionKind kind);
OcclusionKind occlusion_kind_from_string(const std::string& name);

struct OcclusionMeta {
  OcclusionKind kind = OcclusionKind::None;
  torch::Tensor boxes = torch::zeros({0, 4}, torch::kFloat32);  // x0,y0,x1,y1 pixels, inclusive
  bool impossible = false;  // the kind could not be realised for this scene
};

struct InstanceGT {
  body::BodyParams params;  // batch of one, float32
  torch::Tensor joints3d;   // [J,3]
  torch::Tensor joints2d;   // [J,2] exact projection of joints3d
  torch::Tensor detected2d; // [J,2] simulated 2D detector output
  torch::Tensor joint_conf; // [J]
  torch::Tensor vertices;   // [V,3]
  torch::Tensor visibility; // [J] bool
};

struct SceneSample {
  torch::Tensor image;  // [H,W,C] float32 in [0,1]
  std::vector<InstanceGT> instances;
  OcclusionMeta occlusion;
  CameraModel camera;
  std::uint64_t seed = 0;

  std::int64_t height() const { return image.size(0); }
  std::int64_t width() const { return image.size(1); }
};

struct SceneConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t channels = 3;
  std::int64_t min_instances = 1;
  std::int64_t max_instances = 3;
  std::int64_t instance_limit = 8;  // K_max
  double occlusion_prob = 0.0;
  std::vector<OcclusionKind> occlusion_kinds{OcclusionKind::ObjectPatch, OcclusionKind::PersonOverlap,
                                             OcclusionKind::Truncation};
  double pose_scale = 0.25;     // std of theta entries, radians
  double yaw_scale = 0.6;       // std of root yaw
  double detection_noise_px = 1.0;
  double splat_sigma_px = 1.2;
  double overlap_iou = 0.25;
  double depth_min = 4.5;
  double depth_max = 6.0;
  double focal_scale = 1.8;     // focal = focal_scale * width
  bool custom_camera = false;   // when false the camera follows the image size
  CameraModel camera;

  void validate() const;
  CameraModel effective_camera() const;
};

// Independent stream for (seed, sample_index, stream). Serial and parallel
// generation draw identical numbers.
std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t index, std::uint64_t stream);

// Derive a per-sample seed; sample i of a dataset uses sample_seed(seed, i).
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index);

SceneSample sample_scene(std::uint64_t seed, const SceneConfig& config, const body::BodyTemplate& tpl);

// Rebuild joints, vertices and projections of an instance from its params.
InstanceGT make_instance(const body::BodyParams& params, const CameraModel& camera,
                         const body::BodyTemplate& tpl);

// Render the clean pseudo-image and set visibility/confidence/detections.
void render(SceneSample& sample, const SceneConfig& config, std::mt19937_64& noise_rng);

SceneSample apply_occlusion(const SceneSample& sample, OcclusionKind kind, std::mt19937_64& rng,
                            const SceneConfig& config, const body::BodyTemplate& tpl);

// Paint opaque boxes and mark covered joints occluded (conf in [0, 0.2]).
void occlude_with_boxes(SceneSample& sample, const torch::Tensor& boxes, std::mt19937_64& rng);

// Mirror image and ground truth left/right. Requires a camera symmetric about
// the vertical image axis.
SceneSample flip_horizontal(const SceneSample& sample, const body::BodyTemplate& tpl);

std::vector<SceneSample> generate_dataset(std::uint64_t seed, std::int64_t count, const SceneConfig& config,
                                          const body::BodyTemplate& tpl);

// Bounding box (x0,y0,x1,y1) of points [N,2].
torch::Tensor bounding_box(const torch::Tensor& points2d);
double box_iou(const torch::Tensor& a, const torch::Tensor& b);

void write_dataset(const std::vector<SceneSample>& samples, const std::string& path,
                   const std::string& meta_json = "{}");
std::vector<SceneSample> read_dataset(const std::string& path, std::string* meta_json = nullptr);

}  // namespace synmesh::scene
