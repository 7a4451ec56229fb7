#pragma once

// Procedural stand-in for an expressive parametric body: pose, shape and
// expression coefficients drive a fixed-topology point mesh through linear
// blend skinning over a humanoid kinematic tree.
//
// Coordinates are meters in a y-down frame (head toward -y), so the default
// camera looks down +z with image rows growing with y.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace synmesh::body {

struct BodyDims {
  std::int64_t vertices = 602;
  std::int64_t joints = 24;
  std::int64_t shape = 10;
  std::int64_t expression = 10;

  void validate() const;
  bool operator==(const BodyDims&) const = default;
};

// Preset A: 24-joint toy body.
BodyDims toy_dims();
// Preset B: 53 joints, 10 shape and 10 expression coefficients.
BodyDims expressive_dims(std::int64_t vertices = 1000);

inline constexpr std::int64_t kNoParent = -1;

struct BodyTemplate {
  torch::Tensor template_vertices;  // [V,3] f64
  torch::Tensor shape_basis;        // [V,3,S]
  torch::Tensor expression_basis;   // [V,3,E]
  torch::Tensor skin_weights;       // [V,J], rows sum to 1
  torch::Tensor joint_regressor;    // [J,V], rows sum to 1
  std::vector<std::int64_t> parents;  // parents[0] == kNoParent, parents[j] < j

  // Left/right symmetry of the procedural body; used by flip augmentation.
  std::vector<std::int64_t> joint_mirror;
  std::vector<std::int64_t> vertex_mirror;

  // Vertex subsets for region errors, chosen by dominant skinning joint.
  std::vector<std::int64_t> hand_vertices;
  std::vector<std::int64_t> face_vertices;

  BodyDims dims() const;

  // Throws ConfigError naming the first violated invariant.
  void validate() const;

  void save(const std::string& path) const;
  static BodyTemplate load(const std::string& path);
};

// Batched parameters; leading dimension B.
struct BodyParams {
  torch::Tensor theta;             // [B,J,3] axis-angle, radians
  torch::Tensor beta;              // [B,S]
  torch::Tensor alpha;             // [B,E]
  torch::Tensor root_rotation;     // [B,3] axis-angle
  torch::Tensor root_translation;  // [B,3] meters

  static BodyParams zeros(std::int64_t batch, const BodyDims& dims,
                          torch::TensorOptions opts = torch::kFloat64);

  std::int64_t batch() const { return theta.size(0); }
  BodyParams index(const torch::Tensor& rows) const;
  BodyParams to(torch::ScalarType dtype) const;
  static BodyParams cat(const std::vector<BodyParams>& parts);
};

struct MeshResult {
  torch::Tensor vertices;  // [B,V,3]
  torch::Tensor joints3d;  // [B,J,3]
};

BodyTemplate make_toy_template(const BodyDims& dims, std::uint64_t seed);

// Rodrigues map [...,3] -> [...,3,3] with a series branch for |w| < 1e-8.
torch::Tensor axis_angle_to_matrix(const torch::Tensor& axis_angle);
// Inverse map for rotations away from angle pi.
torch::Tensor matrix_to_axis_angle(const torch::Tensor& rotation);

// Differentiable w.r.t. every field of params (autograd).
MeshResult forward(const BodyParams& params, const BodyTemplate& tpl);

// vertices [V,3] or [B,V,3].
torch::Tensor regress_joints(const torch::Tensor& vertices, const BodyTemplate& tpl);

// Left/right mirror of parameters across the x = 0 plane.
BodyParams mirror_params(const BodyParams& params, const BodyTemplate& tpl);

}  // namespace synmesh::body
