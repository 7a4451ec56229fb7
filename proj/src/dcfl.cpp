#include "synmesh/dcfl.hpp"

#include <cmath>

#include "synmesh/errors.hpp"

namespace synmesh::dcfl {

torch::Tensor fcc(const torch::Tensor& x, const torch::Tensor& y, bool* degenerate) {
  if (x.dim() < 3 || x.sizes() != y.sizes()) throw ShapeError("fcc: operands must share a [..., h, w, c] shape");
  const std::vector<std::int64_t> spatial{-3, -2};
  const std::vector<std::int64_t> all{-3, -2, -1};
  const auto xc = x - x.mean(spatial, true);
  const auto yc = y - y.mean(spatial, true);
  const auto num = (xc * yc).sum(all);
  const auto sx = xc.square().sum(all);
  const auto sy = yc.square().sum(all);
  // A channel-constant tensor centers to rounding noise, not exact zero.
  const double rel = x.scalar_type() == torch::kFloat64 ? 1e-12 : 1e-5;
  const auto tol_x = rel * rel * x.detach().square().sum(all);
  const auto tol_y = rel * rel * y.detach().square().sum(all);
  const auto deg = (sx.detach() <= tol_x) | (sy.detach() <= tol_y);
  if (degenerate) *degenerate = deg.any().item<bool>();
  // Substitute before the square root so degenerate rows get zero gradient.
  const auto den = (torch::where(deg, torch::ones_like(sx), sx) * torch::where(deg, torch::ones_like(sy), sy)).sqrt();
  return torch::where(deg, torch::zeros_like(num), num / den);
}

double fcc_value(const torch::Tensor& x, const torch::Tensor& y, bool* degenerate) {
  if (x.dim() != 3) throw ShapeError("fcc_value: expected [h, w, c]");
  return fcc(x, y, degenerate).item<double>();
}

torch::Tensor align_loss(const torch::Tensor& gen, const torch::Tensor& vit, const torch::Tensor& anchor) {
  if (gen.sizes() != anchor.sizes() || vit.sizes() != anchor.sizes())
    throw ShapeError("align_loss: features and anchor must share a shape");
  const auto a = anchor.detach();
  return -fcc(gen, a).mean() - fcc(vit, a).mean();
}

FeatureDictionaryImpl::FeatureDictionaryImpl(std::int64_t n, std::int64_t dim) {
  if (n < 1) throw ConfigError("dictionary: at least one entry required");
  entries = register_parameter("entries", torch::randn({n, dim}) * 0.02);
  guidance_proj = register_module("guidance_proj", torch::nn::Linear(dim, dim));
}

torch::Tensor attention_salience(const std::vector<nn::AttentionMap>& maps, std::int64_t gh, std::int64_t gw) {
  if (maps.empty()) throw ShapeError("attention_salience: no attention maps");
  const auto T = gh * gw;
  torch::Tensor total;
  for (const auto& m : maps) {
    if (m.weights.dim() != 4) throw ShapeError("attention_salience: weights must be [B, heads, Tq, Tk]");
    const auto w = m.weights.mean(1);
    const auto B = w.size(0), Tq = w.size(1), Tk = w.size(2);
    torch::Tensor s;
    if (Tq == T && Tk == T && m.h == gh && m.w == gw) {
      s = w.mean(1);
    } else {
      if (m.h * m.w != Tq) throw ShapeError("attention_salience: query grid does not match the map");
      auto grid = std::get<0>(w.max(2)).view({B, 1, m.h, m.w});
      if (m.h % gh == 0 && m.w % gw == 0)
        grid = torch::avg_pool2d(grid, {m.h / gh, m.w / gw});
      else
        grid = torch::nn::functional::interpolate(grid, torch::nn::functional::InterpolateFuncOptions()
                                                            .size(std::vector<std::int64_t>{gh, gw})
                                                            .mode(torch::kBilinear)
                                                            .align_corners(false));
      s = grid.view({B, T});
    }
    const auto norm = s.sum(1, true);
    s = torch::where(norm > 0, s / torch::where(norm > 0, norm, torch::ones_like(norm)), s);
    total = total.defined() ? total + s : s;
  }
  return total / double(maps.size());
}

torch::Tensor pool_guidance(const torch::Tensor& salience, const torch::Tensor& features, std::int64_t groups) {
  if (salience.dim() != 2 || features.dim() != 3 || salience.size(0) != features.size(0) ||
      salience.size(1) != features.size(1))
    throw ShapeError("pool_guidance: salience [B,T] must match features [B,T,d]");
  const auto T = salience.size(1);
  if (groups < 1 || groups > T) throw ConfigError("pool_guidance: groups must lie in [1, T]");
  const auto sorted = std::get<0>(salience.detach().sort(1, true));
  const auto thr = sorted.slice(1, 0, groups).unsqueeze(-1);                 // [B,G,1]
  const auto mask = salience.detach().unsqueeze(1) >= thr;                    // [B,G,T]
  auto w = salience.unsqueeze(1) * mask.to(salience.scalar_type());
  const auto sum = w.sum(-1, true);
  const auto ok = sum.detach() > 0;
  w = torch::where(ok, w / torch::where(ok, sum, torch::ones_like(sum)), torch::full_like(w, 1.0 / double(T)));
  return w.matmul(features);
}

torch::Tensor dictionary_guidance(const std::vector<nn::AttentionMap>& maps, const nn::FeatureMap& f,
                                  std::int64_t groups) {
  return pool_guidance(attention_salience(maps, f.h, f.w), f.tokens, groups);
}

CompensationImpl::CompensationImpl(std::int64_t dim) {
  auto lin = [&](const char* name) {
    return register_module(name, torch::nn::Linear(torch::nn::LinearOptions(dim, dim).bias(false)));
  };
  w_q = lin("w_q");
  w_k = lin("w_k");
  w_v = lin("w_v");
}

nn::AttentionOutput CompensationImpl::forward(const torch::Tensor& features, const torch::Tensor& entries,
                                              const torch::Tensor& guidance) {
  const auto d = w_q->weight.size(1);
  if (features.dim() != 3 || features.size(2) != d || entries.dim() != 2 || entries.size(1) != d)
    throw ShapeError("compensate: feature and dictionary widths must equal " + std::to_string(d));
  auto ctx = entries.unsqueeze(0).expand({features.size(0), entries.size(0), d});
  if (guidance.defined()) {
    if (guidance.dim() != 3 || guidance.size(0) != features.size(0) || guidance.size(2) != d)
      throw ShapeError("compensate: guidance must be [B, G, d]");
    ctx = torch::cat({ctx, guidance}, 1);
  }
  auto att = nn::scaled_dot_attention(w_q(features).unsqueeze(1), w_k(ctx).unsqueeze(1), w_v(ctx).unsqueeze(1));
  return {features + att.output.squeeze(1), att.weights};
}

nn::FeatureMap resize_tokens(const nn::FeatureMap& f, std::int64_t h, std::int64_t w) {
  if (f.h == h && f.w == w) return f;
  auto x = torch::nn::functional::interpolate(
      f.nchw(), torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<std::int64_t>{h, w})
                    .mode(torch::kBilinear)
                    .align_corners(false));
  return nn::FeatureMap::from_nchw(x);
}

DcflImpl::DcflImpl(const DcflOptions& o) : opts_(o) {
  vit_in = register_module("vit_in", torch::nn::Linear(o.vit_dim, o.dim));
  gen_in = register_module("gen_in", torch::nn::Linear(o.gen_dim, o.dim));
  dict_explicit = register_module("dict_explicit", FeatureDictionary(o.entries, o.dim));
  dict_implicit = register_module("dict_implicit", FeatureDictionary(o.entries, o.dim));
  comp_vit = register_module("comp_vit", Compensation(o.dim));
  comp_gen = register_module("comp_gen", Compensation(o.dim));
}

DcflOutput DcflImpl::forward(const nn::FeatureMap& vit, const std::vector<nn::AttentionMap>& vit_maps,
                             const nn::FeatureMap& gen, const std::vector<nn::AttentionMap>& gen_maps) {
  DcflOutput out;
  out.vit = nn::FeatureMap{vit_in(vit.tokens), vit.h, vit.w};
  const bool have_gen = gen.tokens.defined();
  if (have_gen) {
    const auto g = resize_tokens(gen, vit.h, vit.w);
    out.gen = nn::FeatureMap{gen_in(g.tokens), vit.h, vit.w};
  } else {
    out.gen = nn::FeatureMap{torch::zeros_like(out.vit.tokens), vit.h, vit.w};
  }

  torch::Tensor guide_e, guide_i;
  if (opts_.use_explicit_maps && !vit_maps.empty())
    guide_e = dict_explicit->guidance_proj(dictionary_guidance(vit_maps, out.vit, opts_.guidance_tokens));
  if (opts_.use_implicit_maps && have_gen && !gen_maps.empty())
    guide_i = dict_implicit->guidance_proj(dictionary_guidance(gen_maps, out.gen, opts_.guidance_tokens));

  // Each pathway is compensated from its counterpart's dictionary.
  out.gen_hat = nn::FeatureMap{comp_gen(out.gen.tokens, dict_explicit->entries, guide_e).output, vit.h, vit.w};
  out.vit_hat = nn::FeatureMap{comp_vit(out.vit.tokens, dict_implicit->entries, guide_i).output, vit.h, vit.w};
  return out;
}

}  // namespace synmesh::dcfl
