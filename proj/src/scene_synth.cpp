#include "synmesh/scene_synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "synmesh/container.hpp"
#include "synmesh/errors.hpp"

namespace synmesh::scene {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(std::mt19937_64& rng, double sd) { return std::normal_distribution<double>(0.0, sd)(rng); }

std::array<double, 3> hue_color(double h) {
  // HSV with s = 0.9, v = 1.
  const double s = 0.9, v = 1.0;
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh);
  const double f = hh - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Per-pixel layer of one instance.
struct Layer {
  std::vector<float> alpha;  // H*W
  std::vector<float> color;  // H*W*C
};

Layer render_instance(const InstanceGT& inst, const CameraModel& cam, std::int64_t H, std::int64_t W,
                      std::int64_t C, double sigma, const std::array<double, 3>& base) {
  Layer layer{std::vector<float>(H * W, 0.0f), std::vector<float>(H * W * C, 0.0f)};
  std::vector<float> sil(H * W, 0.0f);
  std::vector<double> weight(H * W, 0.0);
  std::vector<double> mix(H * W * 3, 0.0);

  // Silhouette: discs around projected vertices, radius from depth.
  const auto v2d = cam.project(inst.vertices.to(torch::kFloat64));
  const auto vz = cam.depth(inst.vertices.to(torch::kFloat64));
  auto va = v2d.accessor<double, 2>();
  auto za = vz.accessor<double, 1>();
  for (std::int64_t v = 0; v < v2d.size(0); ++v) {
    const double r = std::max(0.75, 0.07 * cam.focal / std::max(za[v], 1e-3));
    const auto x0 = static_cast<std::int64_t>(std::floor(va[v][0] - r)), x1 = static_cast<std::int64_t>(std::ceil(va[v][0] + r));
    const auto y0 = static_cast<std::int64_t>(std::floor(va[v][1] - r)), y1 = static_cast<std::int64_t>(std::ceil(va[v][1] + r));
    for (auto y = std::max<std::int64_t>(0, y0); y <= std::min(H - 1, y1); ++y)
      for (auto x = std::max<std::int64_t>(0, x0); x <= std::min(W - 1, x1); ++x) {
        const double dx = x - va[v][0], dy = y - va[v][1];
        if (dx * dx + dy * dy <= r * r) sil[y * W + x] = 1.0f;
      }
  }
  for (std::int64_t p = 0; p < H * W; ++p)
    if (sil[p] > 0) {
      weight[p] = 1.0;
      for (int c = 0; c < 3; ++c) mix[p * 3 + c] = base[c];
    }

  // Joint splats in a per-joint colour.
  auto ja = inst.joints2d.accessor<float, 2>();
  const auto J = inst.joints2d.size(0);
  const double reach = 4.0 * sigma;
  std::vector<float> splat(H * W, 0.0f);
  for (std::int64_t j = 0; j < J; ++j) {
    const auto col = hue_color(double(j) / double(J));
    const double jx = ja[j][0], jy = ja[j][1];
    for (auto y = std::max<std::int64_t>(0, std::int64_t(std::floor(jy - reach)));
         y <= std::min<std::int64_t>(H - 1, std::int64_t(std::ceil(jy + reach))); ++y)
      for (auto x = std::max<std::int64_t>(0, std::int64_t(std::floor(jx - reach)));
           x <= std::min<std::int64_t>(W - 1, std::int64_t(std::ceil(jx + reach))); ++x) {
        const double d2 = (x - jx) * (x - jx) + (y - jy) * (y - jy);
        const double g = std::exp(-d2 / (2.0 * sigma * sigma));
        const auto p = y * W + x;
        weight[p] += 2.0 * g;
        for (int c = 0; c < 3; ++c) mix[p * 3 + c] += 2.0 * g * col[c];
        splat[p] = std::max(splat[p], static_cast<float>(g));
      }
  }
  for (std::int64_t p = 0; p < H * W; ++p) {
    layer.alpha[p] = std::max(sil[p], splat[p]);
    if (weight[p] <= 0) continue;
    std::array<double, 3> rgb{mix[p * 3] / weight[p], mix[p * 3 + 1] / weight[p], mix[p * 3 + 2] / weight[p]};
    if (C == 1) {
      layer.color[p] = static_cast<float>(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]);
    } else {
      for (std::int64_t c = 0; c < std::min<std::int64_t>(C, 3); ++c) layer.color[p * C + c] = static_cast<float>(rgb[c]);
    }
  }
  return layer;
}

bool inside_frame(double x, double y, std::int64_t H, std::int64_t W) {
  return x >= -0.5 && y >= -0.5 && x < W - 0.5 && y < H - 0.5;
}

std::int64_t pixel_index(double x, double y, std::int64_t W) {
  return static_cast<std::int64_t>(std::lround(y)) * W + static_cast<std::int64_t>(std::lround(x));
}

// Joint falls off the usable frame: its detection carries no information.
void mark_missing(InstanceGT& inst, std::int64_t j) {
  inst.visibility[j] = false;
  inst.joint_conf[j] = 0.0f;
  inst.detected2d[j][0] = 0.0f;
  inst.detected2d[j][1] = 0.0f;
}

void mark_occluded(InstanceGT& inst, std::int64_t j, std::mt19937_64& rng) {
  if (!inst.visibility[j].item<bool>()) return;
  inst.visibility[j] = false;
  inst.joint_conf[j] = static_cast<float>(uniform(rng, 0.0, 0.2));
}

void write_box(SceneSample& s, std::int64_t x0, std::int64_t y0, std::int64_t x1, std::int64_t y1,
               const std::vector<float>& color) {
  const auto H = s.height(), W = s.width(), C = s.image.size(2);
  auto img = s.image.accessor<float, 3>();
  for (auto y = std::max<std::int64_t>(0, y0); y <= std::min(H - 1, y1); ++y)
    for (auto x = std::max<std::int64_t>(0, x0); x <= std::min(W - 1, x1); ++x)
      for (std::int64_t c = 0; c < C; ++c) img[y][x][c] = color[c];
}

torch::Tensor append_boxes(const torch::Tensor& a, const torch::Tensor& b) {
  return torch::cat({a.to(torch::kFloat32).reshape({-1, 4}), b.to(torch::kFloat32).reshape({-1, 4})});
}

void person_overlap(SceneSample& s, const SceneConfig& cfg, std::mt19937_64& rng, const body::BodyTemplate& tpl) {
  const auto K = static_cast<std::int64_t>(s.instances.size());
  if (K < 2) {
    s.occlusion.impossible = true;
    return;
  }
  const auto a = std::uniform_int_distribution<std::int64_t>(0, K - 1)(rng);
  auto b = std::uniform_int_distribution<std::int64_t>(0, K - 2)(rng);
  if (b >= a) ++b;
  const auto& A = s.instances[a];
  const auto box_a = bounding_box(A.joints2d);
  const auto base = s.instances[b].params;
  const double za = A.params.root_translation[0][2].item<double>();
  const double zb = base.root_translation[0][2].item<double>();
  const double xa = A.params.root_translation[0][0].item<double>() * zb / za;
  const double xb = base.root_translation[0][0].item<double>();

  auto moved = [&](double f) {
    auto p = body::BodyParams{base.theta.clone(), base.beta.clone(), base.alpha.clone(), base.root_rotation.clone(),
                              base.root_translation.clone()};
    p.root_translation[0][0] = xb + f * (xa - xb);
    return make_instance(p, s.camera, tpl);
  };
  // Smallest shift along x reaching the IoU target.
  if (box_iou(box_a, bounding_box(moved(1.0).joints2d)) < cfg.overlap_iou) {
    s.occlusion.impossible = true;
    return;
  }
  double lo = 0.0, hi = 1.0;
  if (box_iou(box_a, bounding_box(s.instances[b].joints2d)) < cfg.overlap_iou) {
    for (int it = 0; it < 30; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (box_iou(box_a, bounding_box(moved(mid).joints2d)) >= cfg.overlap_iou) hi = mid;
      else lo = mid;
    }
    s.instances[b] = moved(hi);
  }
  render(s, cfg, rng);
  s.occlusion.boxes = torch::stack({box_a, bounding_box(s.instances[b].joints2d)}).to(torch::kFloat32);
}

void truncate(SceneSample& s, std::mt19937_64& rng) {
  const auto H = s.height(), W = s.width();
  const int side = std::uniform_int_distribution<int>(0, 3)(rng);
  const double frac = uniform(rng, 0.2, 0.4);
  std::int64_t x0 = 0, y0 = 0, x1 = W - 1, y1 = H - 1;
  switch (side) {
    case 0: x1 = std::int64_t(frac * W) - 1; break;           // left band
    case 1: x0 = W - std::int64_t(frac * W); break;           // right band
    case 2: y1 = std::int64_t(frac * H) - 1; break;           // top band
    default: y0 = H - std::int64_t(frac * H); break;          // bottom band
  }
  write_box(s, x0, y0, x1, y1, std::vector<float>(s.image.size(2), 0.0f));
  for (auto& inst : s.instances) {
    auto ja = inst.joints2d.accessor<float, 2>();
    for (std::int64_t j = 0; j < inst.joints2d.size(0); ++j) {
      const double x = std::lround(ja[j][0]), y = std::lround(ja[j][1]);
      if (x >= x0 && x <= x1 && y >= y0 && y <= y1) mark_missing(inst, j);
    }
  }
  s.occlusion.boxes = append_boxes(s.occlusion.boxes, torch::tensor({double(x0), double(y0), double(x1), double(y1)}));
}

torch::Tensor vec_tensor(const std::vector<double>& v) { return torch::tensor(v, torch::kFloat64); }

}  // namespace

CameraModel CameraModel::for_image(std::int64_t height, std::int64_t width) {
  CameraModel cam;
  cam.focal = 1.8 * double(width);
  cam.cx = (double(width) - 1.0) / 2.0;
  cam.cy = (double(height) - 1.0) / 2.0;
  return cam;
}

void CameraModel::validate() const {
  if (!(focal > 0.0) || !std::isfinite(focal)) throw ConfigError("camera: focal must be > 0");
  if (!std::isfinite(cx) || !std::isfinite(cy)) throw ConfigError("camera: non-finite principal point");
  if (rotation.sizes() != torch::IntArrayRef{3, 3} || translation.numel() != 3)
    throw ConfigError("camera: extrinsic must be a 3x3 rotation and a 3-vector");
  const auto R = rotation.to(torch::kFloat64);
  const double orth = (R.matmul(R.t()) - torch::eye(3, torch::kFloat64)).abs().max().item<double>();
  if (orth > 1e-6 || std::abs(torch::det(R).item<double>() - 1.0) > 1e-6)
    throw ConfigError("camera: extrinsic rotation is not a proper rotation");
}

torch::Tensor CameraModel::project(const torch::Tensor& points) const {
  const auto R = rotation.to(points.scalar_type());
  const auto t = translation.to(points.scalar_type());
  const auto pc = points.matmul(R.t()) + t;
  const auto z = pc.select(-1, 2);
  const auto u = focal * pc.select(-1, 0) / z + cx;
  const auto v = focal * pc.select(-1, 1) / z + cy;
  return torch::stack({u, v}, -1);
}

torch::Tensor CameraModel::depth(const torch::Tensor& points) const {
  const auto R = rotation.to(points.scalar_type());
  const auto t = translation.to(points.scalar_type());
  return (points.matmul(R.t()) + t).select(-1, 2);
}

std::string to_string(OcclusionKind kind) {
  switch (kind) {
    case OcclusionKind::None: return "none";
    case OcclusionKind::ObjectPatch: return "object_patch";
    case OcclusionKind::PersonOverlap: return "person_overlap";
    case OcclusionKind::Truncation: return "truncation";
  }
  return "none";
}

OcclusionKind occlusion_kind_from_string(const std::string& name) {
  if (name == "none") return OcclusionKind::None;
  if (name == "object_patch") return OcclusionKind::ObjectPatch;
  if (name == "person_overlap") return OcclusionKind::PersonOverlap;
  if (name == "truncation") return OcclusionKind::Truncation;
  throw ConfigError("unknown occlusion kind '" + name + "'");
}

void SceneConfig::validate() const {
  if (height < 8 || width < 8) throw ConfigError("scene: image must be at least 8x8");
  if (channels < 1) throw ConfigError("scene: channels must be >= 1");
  if (min_instances < 1 || max_instances < min_instances) throw ConfigError("scene: invalid K range");
  if (max_instances > instance_limit) throw ConfigError("scene: K range exceeds K_max");
  if (occlusion_prob < 0.0 || occlusion_prob > 1.0) throw ConfigError("scene: occlusion_prob must be in [0,1]");
  if (occlusion_prob > 0.0 && occlusion_kinds.empty()) throw ConfigError("scene: no occlusion kinds enabled");
  if (!(pose_scale >= 0.0) || !(detection_noise_px >= 0.0) || !(splat_sigma_px > 0.0))
    throw ConfigError("scene: scales must be non-negative");
  if (!(depth_min > 0.0) || depth_max < depth_min) throw ConfigError("scene: invalid depth range");
  if (!(focal_scale > 0.0)) throw ConfigError("scene: focal_scale must be > 0");
  effective_camera().validate();
}

CameraModel SceneConfig::effective_camera() const {
  if (custom_camera) return camera;
  auto cam = CameraModel::for_image(height, width);
  cam.focal = focal_scale * double(width);
  return cam;
}

std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  return splitmix64(dataset_seed ^ splitmix64(index + 1));
}

InstanceGT make_instance(const body::BodyParams& params, const CameraModel& cam, const body::BodyTemplate& tpl) {
  torch::NoGradGuard ng;
  const auto mesh = body::forward(params.to(torch::kFloat64), tpl);
  InstanceGT inst;
  inst.params = params.to(torch::kFloat32);
  inst.joints3d = mesh.joints3d[0].to(torch::kFloat32);
  inst.vertices = mesh.vertices[0].to(torch::kFloat32);
  inst.joints2d = cam.project(mesh.joints3d[0]).to(torch::kFloat32);
  const auto J = inst.joints3d.size(0);
  inst.detected2d = inst.joints2d.clone();
  inst.joint_conf = torch::ones({J}, torch::kFloat32);
  inst.visibility = torch::ones({J}, torch::kBool);
  return inst;
}

void render(SceneSample& s, const SceneConfig& cfg, std::mt19937_64& noise_rng) {
  const auto H = cfg.height, W = cfg.width, C = cfg.channels;
  s.image = torch::zeros({H, W, C}, torch::kFloat32);
  const auto K = static_cast<std::int64_t>(s.instances.size());

  // Far to near.
  std::vector<std::int64_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> depth(K);
  for (std::int64_t k = 0; k < K; ++k) depth[k] = s.camera.depth(s.instances[k].joints3d[0].to(torch::kFloat64)).item<double>();
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return depth[a] > depth[b]; });

  std::vector<Layer> layers(K);
  auto img = s.image.accessor<float, 3>();
  for (auto k : order) {
    // Muted body colour derived from the instance's shape code.
    const auto b = s.instances[k].params.beta[0];
    std::array<double, 3> base{0.35 + 0.1 * std::tanh(b[0].item<double>()), 0.35 + 0.1 * std::tanh(b[1 % b.size(0)].item<double>()),
                               0.35 + 0.1 * std::tanh(b[2 % b.size(0)].item<double>())};
    layers[k] = render_instance(s.instances[k], s.camera, H, W, C, cfg.splat_sigma_px, base);
    const auto& L = layers[k];
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const float a = L.alpha[y * W + x];
        if (a <= 0.0f) continue;
        for (std::int64_t c = 0; c < C; ++c) img[y][x][c] = img[y][x][c] * (1.0f - a) + L.color[(y * W + x) * C + c] * a;
      }
  }

  // Visibility: in frame and not behind a nearer body; detections are noisy
  // projections with visibility-driven confidence.
  for (std::int64_t k = 0; k < K; ++k) {
    auto& inst = s.instances[k];
    const auto J = inst.joints2d.size(0);
    inst.visibility = torch::ones({J}, torch::kBool);
    inst.joint_conf = torch::ones({J}, torch::kFloat32);
    inst.detected2d = inst.joints2d.clone();
    auto ja = inst.joints2d.accessor<float, 2>();
    for (std::int64_t j = 0; j < J; ++j) {
      const double nx = normal(noise_rng, cfg.detection_noise_px + 1e-300);
      const double ny = normal(noise_rng, cfg.detection_noise_px + 1e-300);
      const double conf = uniform(noise_rng, 0.75, 1.0);
      const double occ_conf = uniform(noise_rng, 0.0, 0.2);
      const double x = ja[j][0], y = ja[j][1];
      inst.detected2d[j][0] = static_cast<float>(x + nx);
      inst.detected2d[j][1] = static_cast<float>(y + ny);
      inst.joint_conf[j] = static_cast<float>(conf);
      if (!inside_frame(x, y, H, W)) {
        mark_missing(inst, j);
        continue;
      }
      const auto p = pixel_index(x, y, W);
      for (std::int64_t o = 0; o < K; ++o) {
        if (o == k || depth[o] >= depth[k]) continue;
        if (layers[o].alpha[p] > 0.5f) {
          inst.visibility[j] = false;
          inst.joint_conf[j] = static_cast<float>(occ_conf);
          break;
        }
      }
    }
  }
}

void occlude_with_boxes(SceneSample& s, const torch::Tensor& boxes, std::mt19937_64& rng) {
  const auto b = boxes.to(torch::kFloat64).reshape({-1, 4});
  const auto C = s.image.size(2);
  for (std::int64_t i = 0; i < b.size(0); ++i) {
    const auto x0 = std::int64_t(std::lround(b[i][0].item<double>())), y0 = std::int64_t(std::lround(b[i][1].item<double>()));
    const auto x1 = std::int64_t(std::lround(b[i][2].item<double>())), y1 = std::int64_t(std::lround(b[i][3].item<double>()));
    std::vector<float> color(C);
    const double gray = uniform(rng, 0.1, 0.9);
    for (auto& c : color) c = static_cast<float>(std::clamp(gray + normal(rng, 0.05), 0.0, 1.0));
    write_box(s, x0, y0, x1, y1, color);
    for (auto& inst : s.instances) {
      auto ja = inst.joints2d.accessor<float, 2>();
      for (std::int64_t j = 0; j < inst.joints2d.size(0); ++j) {
        const double x = std::lround(ja[j][0]), y = std::lround(ja[j][1]);
        if (x >= x0 && x <= x1 && y >= y0 && y <= y1) mark_occluded(inst, j, rng);
      }
    }
  }
  s.occlusion.boxes = append_boxes(s.occlusion.boxes, b);
}

SceneSample apply_occlusion(const SceneSample& sample, OcclusionKind kind, std::mt19937_64& rng,
                            const SceneConfig& cfg, const body::BodyTemplate& tpl) {
  SceneSample s = sample;
  s.image = sample.image.clone();
  for (auto& inst : s.instances) {
    inst.visibility = inst.visibility.clone();
    inst.joint_conf = inst.joint_conf.clone();
    inst.detected2d = inst.detected2d.clone();
  }
  s.occlusion.kind = kind;
  const auto H = s.height(), W = s.width();
  switch (kind) {
    case OcclusionKind::None: break;
    case OcclusionKind::ObjectPatch: {
      const int n = std::uniform_int_distribution<int>(1, 3)(rng);
      std::vector<double> flat;
      // Patches are placed over bodies so they actually hide something.
      for (int i = 0; i < n; ++i) {
        const double bw = uniform(rng, 0.15, 0.4) * W, bh = uniform(rng, 0.15, 0.4) * H;
        double cx = uniform(rng, 0, W - 1), cy = uniform(rng, 0, H - 1);
        if (!s.instances.empty()) {
          const auto k = std::uniform_int_distribution<std::size_t>(0, s.instances.size() - 1)(rng);
          const auto j = std::uniform_int_distribution<std::int64_t>(0, s.instances[k].joints2d.size(0) - 1)(rng);
          cx = s.instances[k].joints2d[j][0].item<double>() + normal(rng, 3.0);
          cy = s.instances[k].joints2d[j][1].item<double>() + normal(rng, 3.0);
        }
        flat.insert(flat.end(), {cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2});
      }
      occlude_with_boxes(s, vec_tensor(flat).reshape({-1, 4}), rng);
      break;
    }
    case OcclusionKind::PersonOverlap: person_overlap(s, cfg, rng, tpl); break;
    case OcclusionKind::Truncation: truncate(s, rng); break;
  }
  return s;
}

SceneSample sample_scene(std::uint64_t seed, const SceneConfig& cfg, const body::BodyTemplate& tpl) {
  cfg.validate();
  auto body_rng = make_stream(seed, 0, 0);
  auto occ_rng = make_stream(seed, 0, 1);
  auto noise_rng = make_stream(seed, 0, 2);
  const auto dims = tpl.dims();

  SceneSample s;
  s.seed = seed;
  s.camera = cfg.effective_camera();
  const auto K = std::uniform_int_distribution<std::int64_t>(cfg.min_instances, cfg.max_instances)(body_rng);

  // Horizontal slots in front of the camera, shuffled.
  std::vector<double> slots(K);
  for (std::int64_t k = 0; k < K; ++k) slots[k] = K == 1 ? 0.0 : -0.9 + 1.8 * double(k) / double(K - 1);
  std::shuffle(slots.begin(), slots.end(), body_rng);

  for (std::int64_t k = 0; k < K; ++k) {
    auto p = body::BodyParams::zeros(1, dims, torch::kFloat64);
    auto th = p.theta.accessor<double, 3>();
    for (std::int64_t j = 0; j < dims.joints; ++j)
      for (int c = 0; c < 3; ++c) th[0][j][c] = normal(body_rng, cfg.pose_scale);
    auto be = p.beta.accessor<double, 2>();
    for (std::int64_t i = 0; i < dims.shape; ++i) be[0][i] = normal(body_rng, 1.0);
    auto al = p.alpha.accessor<double, 2>();
    for (std::int64_t i = 0; i < dims.expression; ++i) al[0][i] = normal(body_rng, 1.0);
    p.root_rotation[0][0] = normal(body_rng, 0.1);
    p.root_rotation[0][1] = normal(body_rng, cfg.yaw_scale);
    p.root_rotation[0][2] = normal(body_rng, 0.1);
    const double z = uniform(body_rng, cfg.depth_min, cfg.depth_max);
    p.root_translation[0][0] = slots[k] * z / 5.0 + normal(body_rng, 0.1);
    p.root_translation[0][1] = 0.85 + normal(body_rng, 0.05);
    p.root_translation[0][2] = z;
    s.instances.push_back(make_instance(p, s.camera, tpl));
  }
  render(s, cfg, noise_rng);

  if (cfg.occlusion_prob > 0.0 && uniform(occ_rng, 0.0, 1.0) < cfg.occlusion_prob) {
    const auto pick = std::uniform_int_distribution<std::size_t>(0, cfg.occlusion_kinds.size() - 1)(occ_rng);
    s = apply_occlusion(s, cfg.occlusion_kinds[pick], occ_rng, cfg, tpl);
  }
  return s;
}

SceneSample flip_horizontal(const SceneSample& sample, const body::BodyTemplate& tpl) {
  const auto W = sample.width();
  const auto& cam = sample.camera;
  const auto R = cam.rotation.to(torch::kFloat64), t = cam.translation.to(torch::kFloat64);
  if (std::abs(cam.cx - (double(W) - 1.0) / 2.0) > 1e-9 ||
      !torch::allclose(R, torch::eye(3, torch::kFloat64)) || t[0].item<double>() != 0.0)
    throw ConfigError("flip: camera is not symmetric about the vertical image axis");
  SceneSample out;
  out.image = sample.image.flip({1}).contiguous();
  out.camera = cam;
  out.seed = sample.seed;
  out.occlusion = sample.occlusion;
  if (sample.occlusion.boxes.size(0) > 0) {
    const auto b = sample.occlusion.boxes;
    out.occlusion.boxes = torch::stack({(W - 1) - b.select(1, 2), b.select(1, 1), (W - 1) - b.select(1, 0), b.select(1, 3)}, 1);
  }
  const auto perm = torch::tensor(tpl.joint_mirror, torch::kInt64);
  for (const auto& inst : sample.instances) {
    auto m = make_instance(body::mirror_params(inst.params.to(torch::kFloat64), tpl), cam, tpl);
    m.visibility = inst.visibility.index_select(0, perm);
    m.joint_conf = inst.joint_conf.index_select(0, perm);
    auto det = inst.detected2d.index_select(0, perm).clone();
    const auto missing = m.joint_conf.eq(0.0f).logical_and(m.visibility.logical_not());
    det.select(1, 0) = torch::where(missing, det.select(1, 0), float(W - 1) - det.select(1, 0));
    m.detected2d = det;
    out.instances.push_back(std::move(m));
  }
  return out;
}

std::vector<SceneSample> generate_dataset(std::uint64_t seed, std::int64_t count, const SceneConfig& cfg,
                                          const body::BodyTemplate& tpl) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(std::max<std::int64_t>(count, 0)));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(sample_scene(sample_seed(seed, i), cfg, tpl));
  return out;
}

torch::Tensor bounding_box(const torch::Tensor& pts) {
  const auto p = pts.to(torch::kFloat64);
  const auto mn = std::get<0>(p.min(0)), mx = std::get<0>(p.max(0));
  return torch::stack({mn[0], mn[1], mx[0], mx[1]});
}

double box_iou(const torch::Tensor& a_, const torch::Tensor& b_) {
  const auto a = a_.to(torch::kFloat64), b = b_.to(torch::kFloat64);
  const double ax0 = a[0].item<double>(), ay0 = a[1].item<double>(), ax1 = a[2].item<double>(), ay1 = a[3].item<double>();
  const double bx0 = b[0].item<double>(), by0 = b[1].item<double>(), bx1 = b[2].item<double>(), by1 = b[3].item<double>();
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void write_dataset(const std::vector<SceneSample>& samples, const std::string& path, const std::string& meta_json) {
  std::vector<io::Record> recs;
  io::Record header;
  header.put_text("kind", "dataset");
  header.put_int("count", static_cast<std::int64_t>(samples.size()));
  header.put_text("config", meta_json);
  recs.push_back(std::move(header));
  for (const auto& s : samples) {
    io::Record r;
    r.put("image", s.image.to(torch::kFloat32));
    r.put_int("seed", static_cast<std::int64_t>(s.seed));
    r.put("camera.intrinsics", torch::tensor({s.camera.focal, s.camera.cx, s.camera.cy}, torch::kFloat64));
    r.put("camera.rotation", s.camera.rotation.to(torch::kFloat64));
    r.put("camera.translation", s.camera.translation.to(torch::kFloat64));
    r.put_text("occlusion.kind", to_string(s.occlusion.kind));
    r.put("occlusion.boxes", s.occlusion.boxes.to(torch::kFloat32));
    r.put_int("occlusion.impossible", s.occlusion.impossible ? 1 : 0);
    r.put_int("instances", static_cast<std::int64_t>(s.instances.size()));
    for (std::size_t k = 0; k < s.instances.size(); ++k) {
      const auto& in = s.instances[k];
      const std::string pre = "inst" + std::to_string(k) + ".";
      r.put(pre + "theta", in.params.theta.to(torch::kFloat32));
      r.put(pre + "beta", in.params.beta.to(torch::kFloat32));
      r.put(pre + "alpha", in.params.alpha.to(torch::kFloat32));
      r.put(pre + "root_rotation", in.params.root_rotation.to(torch::kFloat32));
      r.put(pre + "root_translation", in.params.root_translation.to(torch::kFloat32));
      r.put(pre + "joints3d", in.joints3d.to(torch::kFloat32));
      r.put(pre + "joints2d", in.joints2d.to(torch::kFloat32));
      r.put(pre + "detected2d", in.detected2d.to(torch::kFloat32));
      r.put(pre + "joint_conf", in.joint_conf.to(torch::kFloat32));
      r.put(pre + "vertices", in.vertices.to(torch::kFloat32));
      r.put(pre + "visibility", in.visibility.to(torch::kUInt8));
    }
    recs.push_back(std::move(r));
  }
  io::write_container(path, io::kDatasetMagic, recs);
}

std::vector<SceneSample> read_dataset(const std::string& path, std::string* meta_json) {
  const auto recs = io::read_container(path, io::kDatasetMagic);
  if (recs.empty() || !recs[0].has("count")) throw IoError("dataset: missing header record", 0);
  const auto count = recs[0].get_int("count");
  if (static_cast<std::int64_t>(recs.size()) != count + 1)
    throw IoError("dataset: header count disagrees with record count", 0);
  if (meta_json) *meta_json = recs[0].text("config");
  std::vector<SceneSample> out;
  for (std::size_t i = 1; i < recs.size(); ++i) {
    const auto& r = recs[i];
    SceneSample s;
    s.image = r.get("image");
    s.seed = static_cast<std::uint64_t>(r.get_int("seed"));
    const auto intr = r.get("camera.intrinsics");
    s.camera.focal = intr[0].item<double>();
    s.camera.cx = intr[1].item<double>();
    s.camera.cy = intr[2].item<double>();
    s.camera.rotation = r.get("camera.rotation");
    s.camera.translation = r.get("camera.translation");
    s.occlusion.kind = occlusion_kind_from_string(r.text("occlusion.kind"));
    s.occlusion.boxes = r.get("occlusion.boxes");
    s.occlusion.impossible = r.get_int("occlusion.impossible") != 0;
    const auto K = r.get_int("instances");
    for (std::int64_t k = 0; k < K; ++k) {
      const std::string pre = "inst" + std::to_string(k) + ".";
      InstanceGT in;
      in.params = body::BodyParams{r.get(pre + "theta"), r.get(pre + "beta"), r.get(pre + "alpha"),
                                   r.get(pre + "root_rotation"), r.get(pre + "root_translation")};
      in.joints3d = r.get(pre + "joints3d");
      in.joints2d = r.get(pre + "joints2d");
      in.detected2d = r.get(pre + "detected2d");
      in.joint_conf = r.get(pre + "joint_conf");
      in.vertices = r.get(pre + "vertices");
      in.visibility = r.get(pre + "visibility").to(torch::kBool);
      s.instances.push_back(std::move(in));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace synmesh::scene
