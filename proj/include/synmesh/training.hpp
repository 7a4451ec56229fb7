#pragma once

// Full model assembly, the composite objective, and the training loop with
// checkpointing and ablation sweeps.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "synmesh/body_model.hpp"
#include "synmesh/camf.hpp"
#include "synmesh/conditioning.hpp"
#include "synmesh/dcfl.hpp"
#include "synmesh/disc_pathway.hpp"
#include "synmesh/gen_pathway.hpp"
#include "synmesh/metrics.hpp"
#include "synmesh/perception_head.hpp"
#include "synmesh/scene_synth.hpp"

namespace synmesh::train {

struct LossWeights {
  double theta = 1.0;
  double beta = 0.1;
  double alpha = 0.1;
  double joints3d = 5.0;
  double vertices = 1.0;
  double joints2d = 1.0;
  double presence = 0.5;
};

struct Ablation {
  bool use_explicit_maps = true;  // M_e
  bool use_implicit_maps = true;  // M_i
  camf::FusionMode fusion = camf::FusionMode::Cmf;
  bool use_gen_pathway = true;
};

struct ModelConfig {
  std::int64_t image_size = 64;
  std::int64_t channels = 3;
  body::BodyDims body;
  std::uint64_t template_seed = 7;
  std::int64_t patch = 8;
  std::int64_t vit_dim = 96;
  std::int64_t vit_heads = 4;
  std::int64_t vit_blocks = 4;
  std::int64_t latent_channels = 4;
  std::int64_t ae_hidden = 32;
  std::int64_t unet_base = 32;
  std::int64_t unet_mid = 64;
  std::int64_t d_prompt = 64;
  std::int64_t diffusion_steps = 100;
  std::int64_t t_star = 0;  // 0: diffusion_steps / 5
  std::int64_t dim = 96;    // shared width of DCFL, CAMF and the head
  std::int64_t dictionary_entries = 32;
  std::int64_t guidance_tokens = 4;
  std::int64_t fuse_levels = 2;
  std::int64_t cau_blocks = 3;
  std::int64_t head_blocks = 4;
  std::int64_t max_instances = 8;  // K_max
  double heatmap_sigma = 1.5;      // pixels
  std::int64_t mask_margin = 4;    // pixels around visible joints

  void validate() const;
  gen::GenerativeOptions generative() const;
};

struct TrainConfig {
  double lambda_align = 0.1;
  double lr = 1e-4;
  double lr_final = 1e-5;
  double decay_fraction = 0.05;  // final lr for this trailing share of steps
  double weight_decay = 1e-6;
  std::int64_t batch_size = 8;
  std::int64_t steps = 5000;
  std::uint64_t seed = 0;
  std::int64_t log_every = 10;
  std::int64_t eval_every = 0;        // 0: no validation during training
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  Ablation ablation;
  LossWeights weights;
  ModelConfig model;

  void validate() const;
  double lr_at(std::int64_t step) const;
};

// Losses ----------------------------------------------------------------

// lambda * align + (1 - lambda) * reg. ConfigError when lambda is outside [0,1].
torch::Tensor total_loss(const torch::Tensor& align, const torch::Tensor& reg, double lambda);

// Predicted quantities for every query, flattened to rows b*K + k.
struct BodyPrediction {
  body::BodyParams params;   // with root translation
  torch::Tensor joints3d;    // [B*K,J,3]
  torch::Tensor vertices;    // [B*K,V,3]
  torch::Tensor joints2d;    // [B*K,J,2]
  torch::Tensor presence_logit;  // [B,K]
};

// Ground truth gathered for matched pairs, in the order of `rows`.
struct MatchedTargets {
  std::vector<std::int64_t> rows;  // prediction rows b*K + k
  body::BodyParams params;
  torch::Tensor joints3d;  // [M,J,3]
  torch::Tensor vertices;  // [M,V,3]
  torch::Tensor joints2d;  // [M,J,2]
  torch::Tensor presence_target;  // [B,K], 1 on matched queries
};

struct LossBreakdown {
  torch::Tensor total, align, reg;
  torch::Tensor theta, beta, alpha, joints3d, vertices, joints2d, presence;
};

// Weighted L1 family plus presence BCE. Joints and vertices are compared
// after moving the root joint to the origin; 2D error is in half-image units.
LossBreakdown reg_loss(const BodyPrediction& pred, const MatchedTargets& targets, const LossWeights& w,
                       double half_width);

// Data ------------------------------------------------------------------

// Network inputs and targets precomputed for a list of scenes.
struct PreparedData {
  const std::vector<scene::SceneSample>* scenes = nullptr;
  torch::Tensor images;     // [N,C,H,W]
  torch::Tensor heatmaps;   // [N,J,h_l,w_l], area-downsampled to the latent grid
  torch::Tensor prompt_joints, prompt_conf, prompt_present, prompt_mask;  // [N,K*J(,2)]
  torch::Tensor token_mask;  // [N,T] union of instance regions on the encoder grid
  scene::CameraModel camera;
  std::int64_t size() const { return images.size(0); }
};

PreparedData prepare(const std::vector<scene::SceneSample>& scenes, const ModelConfig& cfg);

// Model -----------------------------------------------------------------

struct ModelOutput {
  BodyPrediction body;
  head::InstancePrediction head;
  dcfl::DcflOutput dcfl;
  camf::CamfOutput camf;
  head::DecodeOutput decode;
  std::vector<nn::AttentionMap> explicit_maps;  // M_e
  std::vector<nn::AttentionMap> implicit_maps;  // M_i
};

struct Frame {
  scene::CameraModel camera;
  std::int64_t height = 64;
  std::int64_t width = 64;
};

class SynergyModelImpl : public torch::nn::Module {
public:
  SynergyModelImpl(const ModelConfig& cfg, const Ablation& ablation, const body::BodyTemplate& tpl);

  // Everything after the two encoders: DCFL, CAMF, head, body model and
  // projection. gen.tokens may be undefined when the pathway is disabled.
  ModelOutput forward_features(const nn::FeatureMap& vit, const std::vector<nn::AttentionMap>& vit_maps,
                               const nn::FeatureMap& gen, const std::vector<nn::AttentionMap>& gen_maps,
                               const torch::Tensor& token_mask, const Frame& frame);

  // Full forward on rows of prepared data; noise [B,c_l,h_l,w_l].
  ModelOutput forward(const PreparedData& data, const torch::Tensor& rows, const torch::Tensor& noise);

  std::vector<torch::Tensor> trainable_parameters();
  const ModelConfig& config() const { return cfg_; }
  const Ablation& ablation() const { return ablation_; }
  const body::BodyTemplate& body_template() const { return tpl_; }

  disc::ViTEncoder vit{nullptr};
  gen::GenerativePathway gen{nullptr};
  dcfl::Dcfl dcfl{nullptr};
  camf::Camf camf{nullptr};
  head::PerceptionHead head{nullptr};

private:
  ModelConfig cfg_;
  Ablation ablation_;
  body::BodyTemplate tpl_;
};
TORCH_MODULE(SynergyModel);

// Matches every scene's instances to queries and gathers targets.
MatchedTargets match_batch(const BodyPrediction& pred, const std::vector<const scene::SceneSample*>& scenes,
                           std::int64_t queries, double half_width);

// Training --------------------------------------------------------------

struct LogRecord {
  std::int64_t step = 0;
  double total = 0.0, align = 0.0, reg = 0.0;
  std::optional<double> mpjpe_val;
  std::string to_json() const;
};

class Trainer {
public:
  Trainer(const TrainConfig& cfg, const body::BodyTemplate& tpl);

  // Copy a pretrained generative pathway (autoencoder, U-Net, prompt lifter)
  // from a pretrain checkpoint; resets the adapter onto the loaded encoder.
  void load_denoiser(const std::string& path);
  void set_denoiser(gen::GenerativePathway& pretrained);

  // Runs until `cfg.steps`; each logged record is also written to `log`.
  std::vector<LogRecord> train(const PreparedData& data, const PreparedData* val = nullptr, std::ostream* log = nullptr,
                               const std::string& checkpoint_path = "");
  // One optimisation step on explicit rows; returns the loss breakdown.
  LossBreakdown step_once(const PreparedData& data, const torch::Tensor& rows);

  // Forward pass on scenes [begin, end) with per-scene deterministic noise;
  // the caller picks train/eval mode and grad mode.
  ModelOutput infer(const PreparedData& data, std::int64_t begin, std::int64_t end);
  std::vector<metrics::ScenePrediction> predict(const PreparedData& data);
  metrics::EvalReport evaluate(const PreparedData& data, double threshold_px = 8.0);

  void save(const std::string& path) const;
  // Restores weights, optimizer state, step and RNG state.
  void resume(const std::string& path);

  SynergyModel& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  torch::Tensor batch_rows(std::int64_t step, std::int64_t n) const;

private:
  TrainConfig cfg_;
  body::BodyTemplate tpl_;
  SynergyModel model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::int64_t step_ = 0;
};

// Training configuration (and step) stored in a checkpoint.
TrainConfig checkpoint_config(const std::string& path, std::int64_t* step = nullptr);

// Checkpoint of the pretrained generative pathway alone.
void save_pathway(gen::GenerativePathway& pathway, const ModelConfig& cfg, const std::string& path,
                  const std::string& config_json = "{}");
gen::GenerativePathway load_pathway(const std::string& path, ModelConfig* cfg_out = nullptr);

// Pretrains autoencoder and denoiser on scenes (ground-truth joint prompts).
gen::GenerativePathway pretrain_pathway(const std::vector<scene::SceneSample>& scenes, const ModelConfig& cfg,
                                        const gen::PretrainOptions& opts,
                                        const std::function<void(std::int64_t, double)>& on_step = {});

// Ablation --------------------------------------------------------------

struct AblationCell {
  bool use_explicit_maps = true;
  bool use_implicit_maps = true;
  camf::FusionMode fusion = camf::FusionMode::Cmf;
  bool use_gen_pathway = true;
  double lambda_align = -1.0;  // < 0: keep the base config value
  std::string label() const;
};

struct AblationRow {
  AblationCell cell;
  std::uint64_t seed = 0;
  double mpjpe = 0.0, pa_mpjpe = 0.0, mpve = 0.0;
};

struct AblationSummary {
  AblationCell cell;
  double mean = 0.0, stddev = 0.0;
  std::vector<double> per_seed;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationSummary> summary;
  std::string to_csv() const;
  std::string summary_csv() const;
  const AblationSummary& find(const std::string& label) const;
};

// The M_e/M_i grid under cmf plus the sum/concat fusion rows.
std::vector<AblationCell> default_grid();

AblationResult ablate(const TrainConfig& base, const std::vector<AblationCell>& cells,
                      const std::vector<std::uint64_t>& seeds, const PreparedData& train, const PreparedData& test,
                      gen::GenerativePathway& pretrained, const body::BodyTemplate& tpl,
                      const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace synmesh::train
