#include "synmesh/conditioning.hpp"

#include <algorithm>
#include <cmath>

#include "synmesh/errors.hpp"

namespace synmesh::cond {

torch::Tensor render_heatmap(const torch::Tensor& joints2d, const torch::Tensor& conf, double sigma_px,
                             std::int64_t height, std::int64_t width) {
  if (!(sigma_px > 0.0)) throw DomainError("render_heatmap: sigma must be > 0");
  if (!torch::isfinite(joints2d).all().item<bool>() || !torch::isfinite(conf).all().item<bool>())
    throw DomainError("render_heatmap: non-finite joints");
  const auto opts = joints2d.options();
  const auto xs = torch::arange(width, opts).view({1, 1, width});
  const auto ys = torch::arange(height, opts).view({1, height, 1});
  const auto jx = joints2d.select(1, 0).view({-1, 1, 1});
  const auto jy = joints2d.select(1, 1).view({-1, 1, 1});
  const auto d2 = (xs - jx).square() + (ys - jy).square();
  return conf.to(opts.dtype()).view({-1, 1, 1}) * torch::exp(-d2 / (2.0 * sigma_px * sigma_px));
}

torch::Tensor scene_heatmap(const scene::SceneSample& s, double sigma_px) {
  const auto H = s.height(), W = s.width();
  torch::Tensor out;
  for (const auto& inst : s.instances) {
    auto hm = render_heatmap(inst.detected2d.to(torch::kFloat32), inst.joint_conf.to(torch::kFloat32), sigma_px, H, W);
    out = out.defined() ? torch::maximum(out, hm) : hm;
  }
  return out;
}

PromptLifterImpl::PromptLifterImpl(const PromptOptions& opts) {
  fc1 = register_module("fc1", torch::nn::Linear(3, opts.hidden));
  fc2 = register_module("fc2", torch::nn::Linear(opts.hidden, opts.d_prompt));
}

torch::Tensor PromptLifterImpl::forward(const torch::Tensor& joints2d, const torch::Tensor& conf,
                                        const torch::Tensor& present, std::int64_t height, std::int64_t width) {
  const auto dt = fc1->weight.scalar_type();
  auto x = joints2d.select(-1, 0).to(dt) * (2.0 / double(width - 1)) - 1.0;
  auto y = joints2d.select(-1, 1).to(dt) * (2.0 / double(height - 1)) - 1.0;
  if (present.defined()) {
    x = torch::where(present, x, torch::zeros_like(x));
    y = torch::where(present, y, torch::zeros_like(y));
  }
  const auto in = torch::stack({x, y, conf.to(dt)}, -1);
  return fc2(torch::gelu(fc1(in)));
}

torch::Tensor area_downsample(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  const auto H = x.size(-2), W = x.size(-1);
  if (h <= 0 || w <= 0 || H % h != 0 || W % w != 0)
    throw ShapeError("area_downsample: " + std::to_string(H) + "x" + std::to_string(W) + " is not a multiple of " +
                     std::to_string(h) + "x" + std::to_string(w));
  return torch::avg_pool2d(x, {H / h, W / w});
}

ConditionSet build_condition_set(const torch::Tensor& z0, const torch::Tensor& heatmap, const torch::Tensor& c_t,
                                 const torch::Tensor& c_t_mask) {
  if (z0.dim() != 4 || heatmap.dim() != 4 || z0.size(0) != heatmap.size(0))
    throw ShapeError("build_condition_set: expected [B,C,h,w] latent and [B,J,H,W] heatmap");
  const auto hm = area_downsample(heatmap.to(z0.scalar_type()), z0.size(2), z0.size(3));
  if (hm.size(2) != z0.size(2) || hm.size(3) != z0.size(3)) throw ShapeError("build_condition_set: spatial mismatch");
  return ConditionSet{torch::cat({z0, hm}, 1), c_t, c_t_mask, heatmap};
}

torch::Tensor instance_masks(const torch::Tensor& joints2d, const torch::Tensor& visible, std::int64_t margin,
                             std::int64_t H, std::int64_t W) {
  const auto K = joints2d.size(0), J = joints2d.size(1);
  auto masks = torch::zeros({K, H, W}, torch::kBool);
  const auto pts = joints2d.to(torch::kFloat64).contiguous();
  const auto vis = visible.to(torch::kBool).contiguous();
  auto pa = pts.accessor<double, 3>();
  auto va = vis.accessor<bool, 2>();
  for (std::int64_t k = 0; k < K; ++k) {
    double x0 = 1e18, y0 = 1e18, x1 = -1e18, y1 = -1e18;
    bool any = false;
    for (std::int64_t j = 0; j < J; ++j) {
      if (!va[k][j]) continue;
      any = true;
      x0 = std::min(x0, pa[k][j][0]);
      x1 = std::max(x1, pa[k][j][0]);
      y0 = std::min(y0, pa[k][j][1]);
      y1 = std::max(y1, pa[k][j][1]);
    }
    if (!any) continue;
    const auto c0 = std::max<std::int64_t>(0, std::lround(x0) - margin);
    const auto c1 = std::min<std::int64_t>(W - 1, std::lround(x1) + margin);
    const auto r0 = std::max<std::int64_t>(0, std::lround(y0) - margin);
    const auto r1 = std::min<std::int64_t>(H - 1, std::lround(y1) + margin);
    if (c0 > c1 || r0 > r1) continue;
    masks[k].index_put_({torch::indexing::Slice(r0, r1 + 1), torch::indexing::Slice(c0, c1 + 1)}, true);
  }
  return masks;
}

torch::Tensor instance_masks(const scene::SceneSample& s, std::int64_t margin) {
  std::vector<torch::Tensor> joints, vis;
  for (const auto& inst : s.instances) {
    joints.push_back(inst.detected2d);
    vis.push_back(inst.joint_conf > kVisibleConf);
  }
  if (joints.empty()) return torch::zeros({0, s.height(), s.width()}, torch::kBool);
  return instance_masks(torch::stack(joints), torch::stack(vis), margin, s.height(), s.width());
}

torch::Tensor union_token_mask(const torch::Tensor& masks, std::int64_t gh, std::int64_t gw) {
  const auto H = masks.size(-2), W = masks.size(-1);
  if (H % gh != 0 || W % gw != 0) throw ShapeError("union_token_mask: grid does not tile the mask");
  auto u = masks.any(0).to(torch::kFloat32).view({1, 1, H, W});
  auto pooled = torch::max_pool2d(u, {H / gh, W / gw});
  return (pooled.view({gh * gw}) > 0.5);
}

PromptInputs prompt_inputs(const scene::SceneSample& s, std::int64_t max_instances) {
  const auto K = static_cast<std::int64_t>(s.instances.size());
  if (K > max_instances) throw CapacityError("prompt_inputs: scene has more instances than K_max");
  const auto J = s.instances.empty() ? 0 : s.instances[0].detected2d.size(0);
  PromptInputs p;
  p.joints2d = torch::zeros({max_instances * J, 2}, torch::kFloat32);
  p.conf = torch::zeros({max_instances * J}, torch::kFloat32);
  p.present = torch::zeros({max_instances * J}, torch::kBool);
  p.token_mask = torch::zeros({max_instances * J}, torch::kBool);
  for (std::int64_t k = 0; k < K; ++k) {
    const auto& inst = s.instances[k];
    const auto sl = torch::indexing::Slice(k * J, (k + 1) * J);
    p.joints2d.index_put_({sl}, inst.detected2d.to(torch::kFloat32));
    p.conf.index_put_({sl}, inst.joint_conf.to(torch::kFloat32));
    // A zero-confidence detection is a joint the detector never found.
    p.present.index_put_({sl}, inst.joint_conf > 0.0f);
    p.token_mask.index_put_({sl}, true);
  }
  return p;
}

}  // namespace synmesh::cond
