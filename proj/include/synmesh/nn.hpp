#pragma once

// Shared network pieces: token feature maps, attention maps and a
// multi-head attention layer that exposes its weights.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace synmesh::nn {

// Token grid with a semantic dimension. tokens: [B, h*w, d].
struct FeatureMap {
  torch::Tensor tokens;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t dim() const { return tokens.size(-1); }
  // [B, h, w, d]
  torch::Tensor grid() const { return tokens.reshape({tokens.size(0), h, w, tokens.size(-1)}); }
  // [B, d, h, w]
  torch::Tensor nchw() const { return grid().permute({0, 3, 1, 2}); }
  static FeatureMap from_nchw(const torch::Tensor& x);
};

// weights: [B, heads, T_q, T_k], row-stochastic over T_k.
struct AttentionMap {
  std::int64_t layer = 0;
  torch::Tensor weights;
  // Query-grid shape when the queries are spatial tokens (0 otherwise).
  std::int64_t h = 0;
  std::int64_t w = 0;
};

// Additive bias standing in for -inf on masked keys. Finite, so a fully
// masked row degrades to uniform attention instead of NaN.
inline constexpr double kMaskBias = -1e4;

struct AttentionOutput {
  torch::Tensor output;   // [B, T_q, d_out]
  torch::Tensor weights;  // [B, heads, T_q, T_k]
};

// softmax(q k^T / sqrt(d_head) + bias) v over [B, heads, T, d_head] inputs.
// bias broadcasts against [B, heads, T_q, T_k].
AttentionOutput scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                     const torch::Tensor& bias = {});

struct MultiHeadAttentionOptions {
  std::int64_t dim;
  std::int64_t heads = 4;
  std::int64_t kv_dim = 0;  // 0: same as dim
  bool bias = true;
  bool out_proj = true;
};

class MultiHeadAttentionImpl : public torch::nn::Module {
public:
  explicit MultiHeadAttentionImpl(const MultiHeadAttentionOptions& opts);

  // key_mask: [B, T_k] bool, true = attend. Optional. A row with no
  // attendable key falls back to unmasked attention.
  AttentionOutput forward(const torch::Tensor& query, const torch::Tensor& context,
                          const torch::Tensor& key_mask = {}, const torch::Tensor& bias = {});

  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};
  std::int64_t heads;
};
TORCH_MODULE(MultiHeadAttention);

// Two-layer perceptron with GELU.
class MlpImpl : public torch::nn::Module {
public:
  MlpImpl(std::int64_t in, std::int64_t hidden, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Mlp);

// Sum of |x| over all parameters of a module, in double; a cheap checksum
// for freeze contracts.
double parameter_checksum(const std::vector<torch::Tensor>& params);

// Exact content hash (FNV-1a over raw bytes) of a list of tensors.
std::uint64_t tensor_hash(const std::vector<torch::Tensor>& tensors);

}  // namespace synmesh::nn
