#pragma once

// Pose and mesh error metrics, Procrustes alignment, detection F1 and the
// evaluation report. Lengths are meters internally; reports use
// millimeters (x1000).

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "synmesh/body_model.hpp"
#include "synmesh/scene_synth.hpp"

namespace synmesh::metrics {

inline constexpr double kMillimeters = 1000.0;

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

Points to_points(const torch::Tensor& t);  // [N,3] any dtype

// Translate so that row `root` sits at the origin.
Points root_align(const Points& p, Eigen::Index root = 0);

// Mean Euclidean distance between corresponding rows.
double mpjpe(const Points& pred, const Points& gt);

struct Similarity {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  double scale = 1.0;
  Eigen::RowVector3d translation = Eigen::RowVector3d::Zero();
  Points apply(const Points& p) const;
};

// Least-squares similarity mapping pred onto gt, reflections excluded.
// Throws DegeneracyError when gt is (nearly) collinear.
Similarity procrustes(const Points& pred, const Points& gt);
double pa_mpjpe(const Points& pred, const Points& gt);

// Vertex error; the region form restricts to a vertex subset.
double mpve(const Points& pred, const Points& gt);
double region_pve(const Points& pred, const Points& gt, const std::vector<std::int64_t>& vertices);
inline double pve(const Points& pred, const Points& gt) { return mpve(pred, gt); }

struct F1Score {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::int64_t true_positives = 0;
};

// Greedy one-to-one matching by 2D root distance below threshold, among
// predictions with presence > 0.5. pred_roots [K,2], gt_roots [G,2].
F1Score f1_match(const torch::Tensor& pred_roots, const torch::Tensor& presence, const torch::Tensor& gt_roots,
                 double threshold_px);

// Per-scene predictions: every query of the head.
struct ScenePrediction {
  torch::Tensor joints3d;  // [K,J,3]
  torch::Tensor vertices;  // [K,V,3]
  torch::Tensor joints2d;  // [K,J,2]
  torch::Tensor presence;  // [K]
};

void write_predictions(const std::vector<ScenePrediction>& preds, const std::string& path,
                       const std::string& meta_json = "{}");
std::vector<ScenePrediction> read_predictions(const std::string& path);

struct SceneRow {
  std::int64_t scene = 0;
  std::int64_t instances = 0;
  double mpjpe = 0.0;  // mm, root-aligned, mean over instances
  double pa_mpjpe = 0.0;
  double mpve = 0.0;
  double hand_pve = 0.0;
  double face_pve = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct EvalReport {
  std::vector<SceneRow> rows;
  double threshold_px = 0.0;
  // Instance-weighted means over scenes.
  double mpjpe = 0.0, pa_mpjpe = 0.0, mpve = 0.0, hand_pve = 0.0, face_pve = 0.0;
  // Detection counts pooled over scenes.
  double f1 = 0.0, precision = 0.0, recall = 0.0;

  std::string to_json(const std::string& config_json = "{}") const;
  std::string to_csv() const;
  void write(const std::string& json_path, const std::string& csv_path, const std::string& config_json = "{}") const;
};

// Every ground-truth instance is paired with a prediction by minimum 2D
// joint distance plus (1 - presence); pose errors are root-aligned.
EvalReport evaluate(const std::vector<ScenePrediction>& preds, const std::vector<scene::SceneSample>& scenes,
                    const body::BodyTemplate& tpl, double threshold_px);

}  // namespace synmesh::metrics
