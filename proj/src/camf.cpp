#include "synmesh/camf.hpp"

#include "synmesh/errors.hpp"

namespace synmesh::camf {

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Sum: return "sum";
    case FusionMode::Concat: return "concat";
    case FusionMode::Cmf: return "cmf";
  }
  return "?";
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "sum") return FusionMode::Sum;
  if (s == "concat") return FusionMode::Concat;
  if (s == "cmf") return FusionMode::Cmf;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

CauBlockImpl::CauBlockImpl(std::int64_t in, std::int64_t out) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(1).padding(1)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor CauBlockImpl::forward(const torch::Tensor& x) { return torch::relu(bn(conv(x))); }

MicaLevelImpl::MicaLevelImpl(std::int64_t dim, std::int64_t heads, std::int64_t hidden) {
  ln_q = register_module("ln_q", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ln_kv = register_module("ln_kv", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ln_ffn = register_module("ln_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", nn::MultiHeadAttention(nn::MultiHeadAttentionOptions{dim, heads}));
  ffn = register_module("ffn", nn::Mlp(dim, hidden, dim));
}

MicaOutput MicaLevelImpl::forward(const torch::Tensor& d, const torch::Tensor& p) {
  if (d.sizes() != p.sizes()) throw ShapeError("mica: both streams must be [B, T, d] with equal shapes");
  auto ad = attn(ln_q(p), ln_kv(d));
  auto ap = attn(ln_q(d), ln_kv(p));
  auto d1 = d + ad.output;
  auto p1 = p + ap.output;
  d1 = d1 + ffn(ln_ffn(d1));
  p1 = p1 + ffn(ln_ffn(p1));
  return {d1, p1, ad.weights, ap.weights};
}

CamfImpl::CamfImpl(const CamfOptions& o) : opts_(o) {
  if (o.levels < 1) throw ConfigError("camf: at least one fusion level required");
  if (o.cau_blocks < 1) throw ConfigError("camf: at least one CAU required");
  pos_d = register_parameter("pos_d", torch::randn({1, o.tokens, o.dim}) * 0.02);
  pos_p = register_parameter("pos_p", torch::randn({1, o.tokens, o.dim}) * 0.02);
  levels = register_module("levels", torch::nn::ModuleList());
  for (std::int64_t l = 0; l < o.levels; ++l) levels->push_back(MicaLevel(o.dim, o.heads, 2 * o.dim));
  cau = register_module("cau", torch::nn::Sequential());
  for (std::int64_t b = 0; b < o.cau_blocks; ++b) cau->push_back(CauBlock(b == 0 ? 2 * o.dim : o.fuse_dim, o.fuse_dim));
  concat_proj = register_module("concat_proj", torch::nn::Linear(2 * o.dim, o.fuse_dim));
  if (o.mode == FusionMode::Sum && o.fuse_dim != o.dim) throw ConfigError("camf: sum fusion needs fuse_dim == dim");
}

MicaOutput CamfImpl::mica(const torch::Tensor& d, const torch::Tensor& p, std::vector<torch::Tensor>* weights) {
  if (d.dim() != 3 || d.size(1) != opts_.tokens || d.size(2) != opts_.dim || d.sizes() != p.sizes())
    throw ShapeError("mica: expected [B," + std::to_string(opts_.tokens) + "," + std::to_string(opts_.dim) + "] inputs");
  MicaOutput cur{d + pos_d, p + pos_p, {}, {}};
  for (const auto& m : *levels) {
    cur = m->as<MicaLevel>()->forward(cur.d, cur.p);
    if (weights) {
      weights->push_back(cur.weights_d);
      weights->push_back(cur.weights_p);
    }
  }
  return cur;
}

nn::FeatureMap CamfImpl::fuse(const nn::FeatureMap& d, const nn::FeatureMap& p) {
  if (d.tokens.sizes() != p.tokens.sizes() || d.h != p.h || d.w != p.w)
    throw ShapeError("fuse: streams must share a token grid");
  switch (opts_.mode) {
    case FusionMode::Sum: return nn::FeatureMap{d.tokens + p.tokens, d.h, d.w};
    case FusionMode::Concat: return nn::FeatureMap{concat_proj(torch::cat({d.tokens, p.tokens}, -1)), d.h, d.w};
    case FusionMode::Cmf: {
      const auto x = torch::cat({d.nchw(), p.nchw()}, 1);
      return nn::FeatureMap::from_nchw(cau->forward(x));
    }
  }
  throw ConfigError("fuse: invalid mode");
}

CamfOutput CamfImpl::forward(const nn::FeatureMap& d, const nn::FeatureMap& p) {
  CamfOutput out;
  if (opts_.mode != FusionMode::Cmf) {
    out.fused = fuse(d, p);
    return out;
  }
  auto m = mica(d.tokens, p.tokens, &out.weights);
  out.d_tilde = m.d;
  out.p_tilde = m.p;
  out.fused = fuse(nn::FeatureMap{m.d, d.h, d.w}, nn::FeatureMap{m.p, p.h, p.w});
  return out;
}

}  // namespace synmesh::camf
