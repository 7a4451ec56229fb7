#pragma once

// Instance-aware perception head: learnable instance queries refined by a
// stack of self-/cross-attention blocks over the fused features, per-query
// body parameter regression, and one-to-one assignment to ground truth.

#include <cstdint>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "synmesh/body_model.hpp"
#include "synmesh/nn.hpp"

namespace synmesh::head {

// Depth at which a unit camera scale places a body.
inline constexpr double kReferenceDepth = 5.25;

struct HeadOptions {
  std::int64_t dim = 96;
  std::int64_t heads = 4;
  std::int64_t blocks = 4;
  std::int64_t queries = 8;  // K_max
  std::int64_t hidden = 128;
  body::BodyDims dims;
};

class DecoderBlockImpl : public torch::nn::Module {
public:
  DecoderBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t hidden);
  // queries [B,K,d], memory [B,T,d], token_mask [B,T] bool (optional).
  nn::AttentionOutput forward(const torch::Tensor& queries, const torch::Tensor& memory,
                              const torch::Tensor& token_mask);

  torch::nn::LayerNorm ln_self{nullptr}, ln_cross{nullptr}, ln_ffn{nullptr};
  nn::MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  nn::Mlp ffn{nullptr};
};
TORCH_MODULE(DecoderBlock);

struct InstancePrediction {
  body::BodyParams params;  // batch B*K, row b*K + k
  torch::Tensor cam;        // [B,K,3]: tx, ty in [-1,1] image units, log scale
  torch::Tensor presence;   // [B,K] in [0,1]
  torch::Tensor presence_logit;
};

struct DecodeOutput {
  torch::Tensor queries;                  // [B,K,d]
  std::vector<torch::Tensor> cross_attn;  // per block, [B,heads,K,T]
};

class PerceptionHeadImpl : public torch::nn::Module {
public:
  explicit PerceptionHeadImpl(const HeadOptions& opts = {});

  // Tokens outside token_mask receive a large negative attention bias.
  DecodeOutput decode(const nn::FeatureMap& fused, const torch::Tensor& token_mask = {});
  InstancePrediction regress(const torch::Tensor& queries);

  const HeadOptions& options() const { return opts_; }

  torch::Tensor query_embed;  // [K_max, d]
  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm out_norm{nullptr};
  nn::Mlp theta{nullptr}, beta{nullptr}, alpha{nullptr}, root{nullptr}, cam{nullptr}, presence{nullptr};

private:
  HeadOptions opts_;
};
TORCH_MODULE(PerceptionHead);

// Root translation from the weak-perspective camera: depth
// kReferenceDepth * exp(-log_s), image-plane offset (tx, ty) in half-image
// units. cam [...,3] -> [...,3].
torch::Tensor cam_to_translation(const torch::Tensor& cam, double focal, std::int64_t height, std::int64_t width);
// Inverse map for a given translation (targets, initialisation).
torch::Tensor translation_to_cam(const torch::Tensor& translation, double focal, std::int64_t height,
                                 std::int64_t width);

struct MatchOptions {
  double joint_weight = 1.0;
  double presence_weight = 1.0;
  std::int64_t exact_limit = 16;  // Hungarian up to this many predictions, greedy above
};

// Minimum-cost one-to-one assignment of rows (ground truths) to columns
// (predictions); rows <= cols. Returns col index per row. Ties resolve to
// the lowest index.
std::vector<std::int64_t> hungarian(const std::vector<std::vector<double>>& cost);
std::vector<std::int64_t> greedy_assignment(const std::vector<std::vector<double>>& cost);

// cost[g][k] = joint_weight * mean |pred2d_k - gt2d_g| / image half-width +
//              presence_weight * (1 - presence_k).
// pred2d [K,J,2], gt2d [G,J,2], presence [K]. Returns pairs (gt, pred).
std::vector<std::pair<std::int64_t, std::int64_t>> match_instances(const torch::Tensor& pred2d,
                                                                   const torch::Tensor& presence,
                                                                   const torch::Tensor& gt2d, double half_width,
                                                                   const MatchOptions& opts = {});

}  // namespace synmesh::head
