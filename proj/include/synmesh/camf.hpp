#pragma once

// Cross-attention multi-level fusion: positional embeddings per pathway, a
// stack of bidirectional cross-attention levels, and conv-BN-ReLU units that
// merge the two streams into the fused representation F_u.

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "synmesh/nn.hpp"

namespace synmesh::camf {

enum class FusionMode { Sum, Concat, Cmf };
std::string to_string(FusionMode m);
FusionMode fusion_mode_from_string(const std::string& s);  // ConfigError on unknown names

// conv3x3 (stride 1, pad 1) + BatchNorm + ReLU.
class CauBlockImpl : public torch::nn::Module {
public:
  CauBlockImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(CauBlock);

struct MicaOutput {
  torch::Tensor d;  // [B,T,d]
  torch::Tensor p;
  torch::Tensor weights_d;  // attention producing d: queries from p
  torch::Tensor weights_p;
};

// One exchange level. The same weights serve both directions, so swapping
// the inputs swaps the outputs.
//   d' = d + Attn(q = p, k = v = d);  d'' = d' + FFN(LN d')
//   p' = p + Attn(q = d, k = v = p);  p'' = p' + FFN(LN p')
class MicaLevelImpl : public torch::nn::Module {
public:
  MicaLevelImpl(std::int64_t dim, std::int64_t heads, std::int64_t ffn_hidden);
  MicaOutput forward(const torch::Tensor& d, const torch::Tensor& p);

  torch::nn::LayerNorm ln_q{nullptr}, ln_kv{nullptr}, ln_ffn{nullptr};
  nn::MultiHeadAttention attn{nullptr};
  nn::Mlp ffn{nullptr};
};
TORCH_MODULE(MicaLevel);

struct CamfOptions {
  std::int64_t dim = 96;
  std::int64_t fuse_dim = 96;
  std::int64_t heads = 4;
  std::int64_t levels = 2;
  std::int64_t cau_blocks = 3;
  std::int64_t tokens = 64;  // positional embedding length
  FusionMode mode = FusionMode::Cmf;
};

struct CamfOutput {
  nn::FeatureMap fused;  // F_u, [B, h*w, fuse_dim]
  torch::Tensor d_tilde, p_tilde;  // MICA outputs (cmf only)
  std::vector<torch::Tensor> weights;
};

class CamfImpl : public torch::nn::Module {
public:
  explicit CamfImpl(const CamfOptions& opts = {});

  // Positional embeddings, then every level in turn.
  MicaOutput mica(const torch::Tensor& d, const torch::Tensor& p, std::vector<torch::Tensor>* weights = nullptr);
  nn::FeatureMap fuse(const nn::FeatureMap& d, const nn::FeatureMap& p);
  CamfOutput forward(const nn::FeatureMap& d, const nn::FeatureMap& p);

  const CamfOptions& options() const { return opts_; }

  torch::Tensor pos_d, pos_p;
  torch::nn::ModuleList levels;
  torch::nn::Sequential cau{nullptr};
  torch::nn::Linear concat_proj{nullptr};

private:
  CamfOptions opts_;
};
TORCH_MODULE(Camf);

}  // namespace synmesh::camf
