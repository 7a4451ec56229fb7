#include "synmesh/disc_pathway.hpp"

#include "synmesh/errors.hpp"

namespace synmesh::disc {

ViTBlockImpl::ViTBlockImpl(std::int64_t d, std::int64_t heads, std::int64_t hidden) {
  ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  attn = register_module("attn", nn::MultiHeadAttention(nn::MultiHeadAttentionOptions{d, heads}));
  mlp = register_module("mlp", nn::Mlp(d, hidden, d));
}

nn::AttentionOutput ViTBlockImpl::forward(const torch::Tensor& x) {
  const auto h = ln1(x);
  auto a = attn(h, h);
  auto y = x + a.output;
  y = y + mlp(ln2(y));
  return {y, a.weights};
}

ViTEncoderImpl::ViTEncoderImpl(const ViTOptions& opts) : opts_(opts) {
  if (opts.patch <= 0 || opts.image_size % opts.patch != 0)
    throw ConfigError("vit: image_size must be a multiple of patch");
  const auto T = grid() * grid();
  patch_embed = register_module(
      "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(opts.channels, opts.d_model, opts.patch).stride(opts.patch)));
  pos_embed = register_parameter("pos_embed", torch::randn({1, T, opts.d_model}) * 0.02);
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t b = 0; b < opts.blocks; ++b)
    blocks->push_back(ViTBlock(opts.d_model, opts.heads, opts.d_model * opts.mlp_ratio));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({opts.d_model})));
}

EncoderOutput ViTEncoderImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != opts_.channels)
    throw ShapeError("vit: image must be [B," + std::to_string(opts_.channels) + ",H,W]");
  if (image.size(2) % opts_.patch != 0 || image.size(3) % opts_.patch != 0)
    throw ShapeError("vit: image dims must be divisible by the patch size");
  if (image.size(2) != opts_.image_size || image.size(3) != opts_.image_size)
    throw ShapeError("vit: image size differs from the configured size");

  auto x = patch_embed(image);  // [B,d,h,w]
  const auto h = x.size(2), w = x.size(3);
  x = x.flatten(2).transpose(1, 2) + pos_embed;

  const auto nb = static_cast<std::int64_t>(blocks->size());
  std::vector<bool> keep(nb, false);
  for (auto l : opts_.attention_layers) {
    const auto idx = l < 0 ? nb + l : l;
    if (idx < 0 || idx >= nb) throw ConfigError("vit: attention layer index out of range");
    keep[idx] = true;
  }
  EncoderOutput out;
  for (std::int64_t b = 0; b < nb; ++b) {
    auto r = blocks[b]->as<ViTBlock>()->forward(x);
    x = r.output;
    if (keep[b]) out.attention.push_back(nn::AttentionMap{b, r.weights, h, w});
  }
  out.features.tokens = norm(x);
  out.features.h = h;
  out.features.w = w;
  return out;
}

}  // namespace synmesh::disc
