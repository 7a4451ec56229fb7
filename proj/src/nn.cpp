#include "synmesh/nn.hpp"

#include <cmath>

#include "synmesh/errors.hpp"

namespace synmesh::nn {

FeatureMap FeatureMap::from_nchw(const torch::Tensor& x) {
  FeatureMap f;
  f.h = x.size(2);
  f.w = x.size(3);
  f.tokens = x.flatten(2).transpose(1, 2);
  return f;
}

AttentionOutput scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                     const torch::Tensor& bias) {
  if (q.size(-1) != k.size(-1) || k.size(-2) != v.size(-2))
    throw ShapeError("attention: query/key widths or key/value lengths disagree");
  auto logits = q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(q.size(-1)));
  if (bias.defined()) logits = logits + bias;
  auto w = torch::softmax(logits, -1);
  return {w.matmul(v), w};
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(const MultiHeadAttentionOptions& opts) : heads(opts.heads) {
  if (opts.dim % opts.heads != 0) throw ConfigError("attention: dim must be divisible by heads");
  const auto kv = opts.kv_dim > 0 ? opts.kv_dim : opts.dim;
  q = register_module("q", torch::nn::Linear(torch::nn::LinearOptions(opts.dim, opts.dim).bias(opts.bias)));
  k = register_module("k", torch::nn::Linear(torch::nn::LinearOptions(kv, opts.dim).bias(opts.bias)));
  v = register_module("v", torch::nn::Linear(torch::nn::LinearOptions(kv, opts.dim).bias(opts.bias)));
  if (opts.out_proj) o = register_module("o", torch::nn::Linear(opts.dim, opts.dim));
}

AttentionOutput MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& context,
                                                const torch::Tensor& key_mask, const torch::Tensor& bias) {
  const auto B = query.size(0), Tq = query.size(1), Tk = context.size(1);
  const auto d = q->weight.size(0), dh = d / heads;
  auto split = [&](const torch::Tensor& x, std::int64_t T) { return x.view({B, T, heads, dh}).transpose(1, 2); };
  const auto qh = split(q(query), Tq), kh = split(k(context), Tk), vh = split(v(context), Tk);
  torch::Tensor total_bias = bias;
  if (key_mask.defined()) {
    auto mb = torch::where(key_mask, 0.0, kMaskBias).to(query.scalar_type()).view({B, 1, 1, Tk});
    total_bias = total_bias.defined() ? total_bias + mb : mb;
  }
  auto att = scaled_dot_attention(qh, kh, vh, total_bias);
  auto out = att.output.transpose(1, 2).reshape({B, Tq, d});
  if (o) out = o(out);
  return {out, att.weights};
}

MlpImpl::MlpImpl(std::int64_t in, std::int64_t hidden, std::int64_t out) {
  fc1 = register_module("fc1", torch::nn::Linear(in, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, out));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x))); }

double parameter_checksum(const std::vector<torch::Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params) s += p.detach().to(torch::kFloat64).abs().sum().item<double>();
  return s;
}

std::uint64_t tensor_hash(const std::vector<torch::Tensor>& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : tensors) {
    const auto c = t.detach().contiguous().cpu();
    const auto* p = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace synmesh::nn
