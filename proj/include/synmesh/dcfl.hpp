#pragma once

// Diverse-consistent feature learning: per-pathway learnable dictionaries,
// attention-guided cross-pathway compensation, and the correlation-based
// alignment loss against the fused anchor.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "synmesh/nn.hpp"

namespace synmesh::dcfl {

// Correlation of two co-indexed feature tensors [..., h, w, c]. Each channel is
// centered by its own spatial mean; normalization uses the global centered
// norms. Leading dimensions are batch dimensions and give one value each.
// A tensor that is constant within every channel has no defined correlation;
// the result is 0 there, with zero gradient, and `degenerate` (if given) is
// set. "Constant" means a centered norm below 1e-12 (double) or 1e-5 (float)
// of the raw norm.
torch::Tensor fcc(const torch::Tensor& x, const torch::Tensor& y, bool* degenerate = nullptr);
double fcc_value(const torch::Tensor& x, const torch::Tensor& y, bool* degenerate = nullptr);

// -fcc(gen, anchor) - fcc(vit, anchor), averaged over the batch. The anchor
// is detached so the loss moves the compensated features, not the anchor.
torch::Tensor align_loss(const torch::Tensor& gen, const torch::Tensor& vit, const torch::Tensor& anchor);

class FeatureDictionaryImpl : public torch::nn::Module {
public:
  FeatureDictionaryImpl(std::int64_t entries, std::int64_t dim);

  torch::Tensor entries;  // [D, d]
  torch::nn::Linear guidance_proj{nullptr};
};
TORCH_MODULE(FeatureDictionary);

// Per-token salience [B, T] on a gh x gw token grid from a set of attention
// maps. Self-attention maps over that grid contribute the attention each
// token receives; spatial cross-attention maps contribute the strongest
// prompt response per query, resized to the grid. Heads and layers are
// averaged.
torch::Tensor attention_salience(const std::vector<nn::AttentionMap>& maps, std::int64_t gh, std::int64_t gw);

// G guidance tokens [B, G, d] pooled from features [B, T, d]: token g is the
// salience-weighted mean over tokens at least as salient as the g-th most
// salient one. Zero salience falls back to uniform weights.
torch::Tensor pool_guidance(const torch::Tensor& salience, const torch::Tensor& features, std::int64_t groups);

torch::Tensor dictionary_guidance(const std::vector<nn::AttentionMap>& maps, const nn::FeatureMap& features,
                                  std::int64_t groups);

// Single-head residual attention of a pathway's tokens over a counterpart
// dictionary and optional guidance tokens.
class CompensationImpl : public torch::nn::Module {
public:
  explicit CompensationImpl(std::int64_t dim);

  // features [B,T,d], entries [D,d], guidance [B,G,d] or undefined.
  nn::AttentionOutput forward(const torch::Tensor& features, const torch::Tensor& entries,
                              const torch::Tensor& guidance = {});

  torch::nn::Linear w_q{nullptr}, w_k{nullptr}, w_v{nullptr};
};
TORCH_MODULE(Compensation);

struct DcflOptions {
  std::int64_t vit_dim = 96;
  std::int64_t gen_dim = 32;
  std::int64_t dim = 96;
  std::int64_t entries = 32;
  std::int64_t guidance_tokens = 4;
  bool use_explicit_maps = true;  // M_e guides D_e
  bool use_implicit_maps = true;  // M_i guides D_i
};

struct DcflOutput {
  nn::FeatureMap vit;      // adapted, before compensation
  nn::FeatureMap gen;
  nn::FeatureMap vit_hat;  // after compensation
  nn::FeatureMap gen_hat;
};

class DcflImpl : public torch::nn::Module {
public:
  explicit DcflImpl(const DcflOptions& opts = {});

  // Generative features are resized to the discriminative grid. An undefined
  // gen.tokens stands for an absent pathway and is replaced by zeros.
  DcflOutput forward(const nn::FeatureMap& vit, const std::vector<nn::AttentionMap>& vit_maps,
                     const nn::FeatureMap& gen, const std::vector<nn::AttentionMap>& gen_maps);

  const DcflOptions& options() const { return opts_; }

  torch::nn::Linear vit_in{nullptr}, gen_in{nullptr};
  FeatureDictionary dict_explicit{nullptr}, dict_implicit{nullptr};
  Compensation comp_vit{nullptr}, comp_gen{nullptr};

private:
  DcflOptions opts_;
};
TORCH_MODULE(Dcfl);

// Bilinear resize of token features to another grid.
nn::FeatureMap resize_tokens(const nn::FeatureMap& f, std::int64_t h, std::int64_t w);

}  // namespace synmesh::dcfl
