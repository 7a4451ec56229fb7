#pragma once

// Conditioning bundle for the generative pathway: a dense per-joint heatmap
// concatenated with the latent code, sparse joint prompt tokens, and the
// instance location masks used by the perception head.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "synmesh/scene_synth.hpp"

namespace synmesh::cond {

// Confidence above which a detection counts as a visible joint.
inline constexpr double kVisibleConf = 0.5;

struct ConditionSet {
  torch::Tensor c_j;      // [B, c_l + J, h_l, w_l]
  torch::Tensor c_t;      // [B, N_tokens, d_prompt]
  torch::Tensor c_t_mask; // [B, N_tokens] bool, true for real tokens (optional)
  torch::Tensor heatmap;  // [B, J, H, W]
};

// One channel per joint: conf_j * exp(-|p - x_j|^2 / (2 sigma^2)) at pixel
// centers. joints2d [J,2] pixels, conf [J]. Returns [J,H,W] in the dtype of
// joints2d.
torch::Tensor render_heatmap(const torch::Tensor& joints2d, const torch::Tensor& conf, double sigma_px,
                             std::int64_t height, std::int64_t width);

// Per-joint max over the instances of a scene: [J,H,W] float32.
torch::Tensor scene_heatmap(const scene::SceneSample& sample, double sigma_px);

struct PromptOptions {
  std::int64_t hidden = 64;
  std::int64_t d_prompt = 64;  // 768 matches a CLIP-width denoiser
};

// Two-layer MLP lifting [x, y, conf] (coordinates in [-1,1]) to prompt tokens.
class PromptLifterImpl : public torch::nn::Module {
public:
  explicit PromptLifterImpl(const PromptOptions& opts = {});

  // joints2d [..., N, 2] pixels, conf [..., N], present [..., N] bool (joints
  // not present get zeroed coordinates). Returns [..., N, d_prompt].
  torch::Tensor forward(const torch::Tensor& joints2d, const torch::Tensor& conf, const torch::Tensor& present,
                        std::int64_t height, std::int64_t width);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(PromptLifter);

// Area-average downsample of [B,C,H,W] to [B,C,h,w]; H, W must be multiples.
torch::Tensor area_downsample(const torch::Tensor& x, std::int64_t h, std::int64_t w);

ConditionSet build_condition_set(const torch::Tensor& z0, const torch::Tensor& heatmap, const torch::Tensor& c_t,
                                 const torch::Tensor& c_t_mask = {});

// Filled bounding box of each instance's visible joints, dilated by margin.
// joints2d [K,J,2], visible [K,J] bool. Returns [K,H,W] bool.
torch::Tensor instance_masks(const torch::Tensor& joints2d, const torch::Tensor& visible, std::int64_t margin_px,
                             std::int64_t height, std::int64_t width);
torch::Tensor instance_masks(const scene::SceneSample& sample, std::int64_t margin_px);

// Union of masks reduced to a token grid: a token is inside when any pixel of
// its cell is. Returns [h*w] bool.
torch::Tensor union_token_mask(const torch::Tensor& masks, std::int64_t grid_h, std::int64_t grid_w);

// Prompt inputs for a scene padded to max_instances: joints [K_max*J,2],
// conf [K_max*J], present [K_max*J], token mask [K_max*J].
struct PromptInputs {
  torch::Tensor joints2d;
  torch::Tensor conf;
  torch::Tensor present;
  torch::Tensor token_mask;
};
PromptInputs prompt_inputs(const scene::SceneSample& sample, std::int64_t max_instances);

}  // namespace synmesh::cond
