#pragma once

// Discriminative pathway: a small pre-norm vision transformer returning the
// patch-token feature F_d and the self-attention maps of selected blocks.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "synmesh/nn.hpp"

namespace synmesh::disc {

struct ViTOptions {
  std::int64_t image_size = 64;
  std::int64_t channels = 3;
  std::int64_t patch = 8;
  std::int64_t d_model = 96;
  std::int64_t heads = 4;
  std::int64_t blocks = 4;
  std::int64_t mlp_ratio = 2;
  // Blocks whose attention is returned; negative indices count from the end.
  std::vector<std::int64_t> attention_layers{-2, -1};
};

class ViTBlockImpl : public torch::nn::Module {
public:
  ViTBlockImpl(std::int64_t d, std::int64_t heads, std::int64_t hidden);
  nn::AttentionOutput forward(const torch::Tensor& x);

  torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
  nn::MultiHeadAttention attn{nullptr};
  nn::Mlp mlp{nullptr};
};
TORCH_MODULE(ViTBlock);

struct EncoderOutput {
  nn::FeatureMap features;                 // F_d
  std::vector<nn::AttentionMap> attention; // M_e
};

class ViTEncoderImpl : public torch::nn::Module {
public:
  explicit ViTEncoderImpl(const ViTOptions& opts);

  // image [B,C,H,W]; H and W must be multiples of the patch size.
  EncoderOutput forward(const torch::Tensor& image);

  const ViTOptions& options() const { return opts_; }
  std::int64_t grid() const { return opts_.image_size / opts_.patch; }

  torch::nn::Conv2d patch_embed{nullptr};
  torch::Tensor pos_embed;
  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm norm{nullptr};

private:
  ViTOptions opts_;
};
TORCH_MODULE(ViTEncoder);

}  // namespace synmesh::disc
