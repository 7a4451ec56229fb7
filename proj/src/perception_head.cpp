#include "synmesh/perception_head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "synmesh/errors.hpp"

namespace synmesh::head {

DecoderBlockImpl::DecoderBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t hidden) {
  ln_self = register_module("ln_self", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ln_cross = register_module("ln_cross", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ln_ffn = register_module("ln_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  self_attn = register_module("self_attn", nn::MultiHeadAttention(nn::MultiHeadAttentionOptions{dim, heads}));
  cross_attn = register_module("cross_attn", nn::MultiHeadAttention(nn::MultiHeadAttentionOptions{dim, heads}));
  ffn = register_module("ffn", nn::Mlp(dim, hidden, dim));
}

nn::AttentionOutput DecoderBlockImpl::forward(const torch::Tensor& q, const torch::Tensor& memory,
                                              const torch::Tensor& token_mask) {
  auto h = ln_self(q);
  auto x = q + self_attn(h, h).output;
  auto c = cross_attn(ln_cross(x), memory, token_mask);
  x = x + c.output;
  x = x + ffn(ln_ffn(x));
  return {x, c.weights};
}

PerceptionHeadImpl::PerceptionHeadImpl(const HeadOptions& o) : opts_(o) {
  o.dims.validate();
  if (o.queries < 1) throw ConfigError("head: at least one query required");
  query_embed = register_parameter("query_embed", torch::randn({o.queries, o.dim}));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t b = 0; b < o.blocks; ++b) blocks->push_back(DecoderBlock(o.dim, o.heads, o.hidden));
  out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({o.dim})));
  const auto& d = o.dims;
  theta = register_module("theta", nn::Mlp(o.dim, o.hidden, d.joints * 3));
  beta = register_module("beta", nn::Mlp(o.dim, o.hidden, d.shape));
  alpha = register_module("alpha", nn::Mlp(o.dim, o.hidden, d.expression));
  root = register_module("root", nn::Mlp(o.dim, o.hidden, 3));
  cam = register_module("cam", nn::Mlp(o.dim, o.hidden, 3));
  presence = register_module("presence", nn::Mlp(o.dim, o.hidden, 1));
  // Start near the rest pose.
  torch::NoGradGuard ng;
  for (auto* m : {&theta, &beta, &alpha, &root, &cam}) (*m)->fc2->weight.mul_(0.1);
}

DecodeOutput PerceptionHeadImpl::decode(const nn::FeatureMap& fused, const torch::Tensor& token_mask) {
  const auto& mem = fused.tokens;
  if (mem.dim() != 3 || mem.size(2) != opts_.dim)
    throw ShapeError("head: fused tokens must be [B,T," + std::to_string(opts_.dim) + "]");
  if (token_mask.defined() && (token_mask.dim() != 2 || token_mask.size(0) != mem.size(0) ||
                               token_mask.size(1) != mem.size(1)))
    throw ShapeError("head: token mask must be [B,T]");
  DecodeOutput out;
  out.queries = query_embed.unsqueeze(0).expand({mem.size(0), opts_.queries, opts_.dim});
  for (const auto& b : *blocks) {
    auto r = b->as<DecoderBlock>()->forward(out.queries, mem, token_mask);
    out.queries = r.output;
    out.cross_attn.push_back(r.weights);
  }
  return out;
}

InstancePrediction PerceptionHeadImpl::regress(const torch::Tensor& queries) {
  if (queries.dim() != 3 || queries.size(2) != opts_.dim) throw ShapeError("head: queries must be [B,K,d]");
  const auto B = queries.size(0), K = queries.size(1);
  const auto h = out_norm(queries).reshape({B * K, opts_.dim});
  InstancePrediction p;
  p.params.theta = theta(h).view({B * K, opts_.dims.joints, 3});
  p.params.beta = beta(h);
  p.params.alpha = alpha(h);
  p.params.root_rotation = root(h);
  p.cam = cam(h).view({B, K, 3});
  p.presence_logit = presence(h).view({B, K});
  p.presence = torch::sigmoid(p.presence_logit);
  return p;
}

torch::Tensor cam_to_translation(const torch::Tensor& cam, double focal, std::int64_t height, std::int64_t width) {
  if (cam.size(-1) != 3) throw ShapeError("cam_to_translation: expected [...,3]");
  const auto z = kReferenceDepth * torch::exp(-cam.select(-1, 2));
  const auto x = cam.select(-1, 0) * z * (double(width) / (2.0 * focal));
  const auto y = cam.select(-1, 1) * z * (double(height) / (2.0 * focal));
  return torch::stack({x, y, z}, -1);
}

torch::Tensor translation_to_cam(const torch::Tensor& t, double focal, std::int64_t height, std::int64_t width) {
  const auto z = t.select(-1, 2);
  if ((z <= 0).any().item<bool>()) throw DomainError("translation_to_cam: depth must be positive");
  const auto tx = t.select(-1, 0) / (z * (double(width) / (2.0 * focal)));
  const auto ty = t.select(-1, 1) / (z * (double(height) / (2.0 * focal)));
  return torch::stack({tx, ty, -torch::log(z / kReferenceDepth)}, -1);
}

std::vector<std::int64_t> hungarian(const std::vector<std::vector<double>>& a) {
  const auto n = static_cast<std::int64_t>(a.size());
  if (n == 0) return {};
  const auto m = static_cast<std::int64_t>(a[0].size());
  if (n > m) throw CapacityError("hungarian: more rows than columns");
  const double inf = std::numeric_limits<double>::infinity();
  // Potentials method on 1-based arrays; p[j] is the row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::int64_t> p(m + 1, 0), way(m + 1, 0);
  for (std::int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::int64_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const auto i0 = p[j0];
      double delta = inf;
      std::int64_t j1 = 0;
      for (std::int64_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::int64_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const auto j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::int64_t> out(n, -1);
  for (std::int64_t j = 1; j <= m; ++j)
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  return out;
}

std::vector<std::int64_t> greedy_assignment(const std::vector<std::vector<double>>& a) {
  const auto n = a.size();
  if (n == 0) return {};
  const auto m = a[0].size();
  if (n > m) throw CapacityError("greedy_assignment: more rows than columns");
  std::vector<std::int64_t> out(n, -1);
  std::vector<char> row_done(n, 0), col_done(m, 0);
  for (std::size_t it = 0; it < n; ++it) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (row_done[i]) continue;
      for (std::size_t j = 0; j < m; ++j)
        if (!col_done[j] && a[i][j] < best) {
          best = a[i][j];
          bi = i;
          bj = j;
        }
    }
    row_done[bi] = col_done[bj] = 1;
    out[bi] = static_cast<std::int64_t>(bj);
  }
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> match_instances(const torch::Tensor& pred2d,
                                                                   const torch::Tensor& presence,
                                                                   const torch::Tensor& gt2d, double half_width,
                                                                   const MatchOptions& opts) {
  const auto K = pred2d.size(0), G = gt2d.size(0);
  if (G > K) throw CapacityError("match_instances: " + std::to_string(G) + " instances exceed " + std::to_string(K) +
                                 " queries");
  if (G == 0) return {};
  if (pred2d.size(1) != gt2d.size(1) || presence.size(0) != K) throw ShapeError("match_instances: shape mismatch");
  const auto pd = pred2d.detach().to(torch::kFloat64);
  const auto gd = gt2d.detach().to(torch::kFloat64);
  const auto dist = (gd.unsqueeze(1) - pd.unsqueeze(0)).norm(2, -1).mean(-1) / half_width;  // [G,K]
  const auto pres = presence.detach().to(torch::kFloat64);
  const auto c = (opts.joint_weight * dist + opts.presence_weight * (1.0 - pres).unsqueeze(0)).contiguous();
  auto acc = c.accessor<double, 2>();
  std::vector<std::vector<double>> cost(G, std::vector<double>(K));
  for (std::int64_t g = 0; g < G; ++g)
    for (std::int64_t k = 0; k < K; ++k) cost[g][k] = acc[g][k];
  const auto assign = K <= opts.exact_limit ? hungarian(cost) : greedy_assignment(cost);
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t g = 0; g < G; ++g) out.emplace_back(g, assign[g]);
  return out;
}

}  // namespace synmesh::head
