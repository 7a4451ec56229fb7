#include "synmesh/body_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "synmesh/container.hpp"
#include "synmesh/errors.hpp"

namespace synmesh::body {
namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 mirror(const Vec3& a) { return {-a[0], a[1], a[2]}; }

enum class Side { Center, Left, Right };

struct Skeleton {
  std::vector<Vec3> joints;
  std::vector<std::int64_t> parents;
  std::vector<Side> side;
  std::vector<std::int64_t> mirror;
  std::vector<std::int64_t> arm_ends;  // terminal joints of the arms
  std::int64_t head = 0;
};

// Chain-plus-limbs humanoid. Joints are handed out round-robin to the spine,
// the leg pair and the arm pair so any J >= 2 yields a symmetric tree.
Skeleton build_skeleton(std::int64_t J) {
  std::int64_t spine = 0, leg = 0, arm = 0;
  std::int64_t left = J - 1;
  int turn = 0;
  while (left > 0) {
    if (turn == 0 || left == 1) {
      ++spine;
      --left;
    } else if (turn == 1) {
      ++leg;
      left -= 2;
    } else {
      ++arm;
      left -= 2;
    }
    turn = (turn + 1) % 3;
  }

  Skeleton s;
  auto push = [&](Vec3 p, std::int64_t parent, Side side) {
    s.joints.push_back(p);
    s.parents.push_back(parent);
    s.side.push_back(side);
    return static_cast<std::int64_t>(s.joints.size() - 1);
  };
  const double pelvis_y = -0.95, head_y = -1.65, shoulder_y = -1.45;
  push({0.0, pelvis_y, 0.0}, kNoParent, Side::Center);

  std::vector<std::int64_t> spine_ids;
  std::int64_t prev = 0;
  for (std::int64_t i = 0; i < spine; ++i) {
    const double y = pelvis_y + (head_y - pelvis_y) * double(i + 1) / double(spine);
    prev = push({0.0, y, 0.0}, prev, Side::Center);
    spine_ids.push_back(prev);
  }
  s.head = spine_ids.empty() ? 0 : spine_ids.back();

  auto limb = [&](std::int64_t n, std::int64_t attach, Vec3 from, Vec3 to, std::vector<std::int64_t>& ends) {
    std::int64_t pl = attach, pr = attach;
    for (std::int64_t i = 0; i < n; ++i) {
      const double f = n == 1 ? 0.0 : double(i) / double(n - 1);
      const Vec3 p = add(from, scale(sub(to, from), f));
      const auto l = push(p, pl, Side::Left);
      const auto r = push(mirror(p), pr, Side::Right);
      pl = l;
      pr = r;
    }
    if (n > 0) {
      ends.push_back(pl);
      ends.push_back(pr);
    }
  };
  std::vector<std::int64_t> unused;
  limb(leg, 0, {0.1, -0.88, 0.0}, {0.12, -0.05, 0.0}, unused);
  // Arms hang off the spine joint closest to shoulder height.
  std::int64_t shoulder = 0;
  double best = 1e9;
  for (auto id : spine_ids) {
    const double d = std::abs(s.joints[id][1] - shoulder_y);
    if (d < best) {
      best = d;
      shoulder = id;
    }
  }
  limb(arm, shoulder, {0.18, shoulder_y, 0.0}, {0.78, shoulder_y, 0.0}, s.arm_ends);

  s.mirror.resize(s.joints.size());
  for (std::size_t j = 0; j < s.joints.size(); ++j) {
    if (s.side[j] == Side::Center) s.mirror[j] = static_cast<std::int64_t>(j);
    else if (s.side[j] == Side::Left) s.mirror[j] = static_cast<std::int64_t>(j + 1);
    else s.mirror[j] = static_cast<std::int64_t>(j - 1);
  }
  return s;
}

// Closest point parameter of p on segment a-b.
double segment_param(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = sub(b, a);
  const double len2 = dot(ab, ab);
  if (len2 <= 0.0) return 0.0;
  return std::clamp(dot(sub(p, a), ab) / len2, 0.0, 1.0);
}

Vec3 any_perpendicular(const Vec3& d) {
  Vec3 ref = std::abs(d[1]) < 0.9 ? Vec3{0, 1, 0} : Vec3{1, 0, 0};
  Vec3 c{d[1] * ref[2] - d[2] * ref[1], d[2] * ref[0] - d[0] * ref[2], d[0] * ref[1] - d[1] * ref[0]};
  return scale(c, 1.0 / norm(c));
}

torch::Tensor to_tensor(const std::vector<Vec3>& pts) {
  auto t = torch::empty({static_cast<std::int64_t>(pts.size()), 3}, torch::kFloat64);
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int c = 0; c < 3; ++c) a[i][c] = pts[i][c];
  return t;
}

torch::Tensor skew(const torch::Tensor& w) {
  auto zero = torch::zeros_like(w.select(-1, 0));
  auto x = w.select(-1, 0), y = w.select(-1, 1), z = w.select(-1, 2);
  auto row0 = torch::stack({zero, -z, y}, -1);
  auto row1 = torch::stack({z, zero, -x}, -1);
  auto row2 = torch::stack({-y, x, zero}, -1);
  return torch::stack({row0, row1, row2}, -2);
}

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>())
    throw DomainError(std::string("body forward: non-finite ") + what);
}

torch::Tensor index_tensor(const std::vector<std::int64_t>& v) {
  return torch::tensor(v.empty() ? std::vector<std::int64_t>{} : v, torch::kInt64);
}

std::vector<std::int64_t> to_vector(const torch::Tensor& t) {
  auto c = t.to(torch::kInt64).contiguous();
  return {c.data_ptr<std::int64_t>(), c.data_ptr<std::int64_t>() + c.numel()};
}

}  // namespace

void BodyDims::validate() const {
  if (joints < 2) throw ConfigError("body: J_body must be >= 2");
  if (vertices < joints) throw ConfigError("body: V_t must be >= J_body");
  if (shape < 1) throw ConfigError("body: S must be >= 1");
  if (expression < 1) throw ConfigError("body: E must be >= 1");
}

BodyDims toy_dims() { return BodyDims{602, 24, 10, 10}; }

BodyDims expressive_dims(std::int64_t vertices) { return BodyDims{vertices, 53, 10, 10}; }

BodyDims BodyTemplate::dims() const {
  return BodyDims{template_vertices.size(0), joint_regressor.size(0), shape_basis.size(2),
                  expression_basis.size(2)};
}

void BodyTemplate::validate() const {
  const auto V = template_vertices.size(0);
  const auto J = joint_regressor.size(0);
  if (template_vertices.dim() != 2 || template_vertices.size(1) != 3)
    throw ConfigError("template: template_vertices must be [V,3]");
  if (shape_basis.dim() != 3 || shape_basis.size(0) != V || shape_basis.size(1) != 3)
    throw ConfigError("template: shape_basis must be [V,3,S]");
  if (expression_basis.dim() != 3 || expression_basis.size(0) != V || expression_basis.size(1) != 3)
    throw ConfigError("template: expression_basis must be [V,3,E]");
  if (skin_weights.sizes() != torch::IntArrayRef{V, J}) throw ConfigError("template: skin_weights must be [V,J]");
  if (joint_regressor.sizes() != torch::IntArrayRef{J, V})
    throw ConfigError("template: joint_regressor must be [J,V]");
  if (static_cast<std::int64_t>(parents.size()) != J) throw ConfigError("template: parents must have J entries");
  if ((skin_weights < 0).any().item<bool>()) throw ConfigError("template: negative skin weight");
  if (((skin_weights.sum(1) - 1.0).abs() > 1e-6).any().item<bool>())
    throw ConfigError("template: skin weight rows must sum to 1");
  if (((joint_regressor.sum(1) - 1.0).abs() > 1e-6).any().item<bool>())
    throw ConfigError("template: joint regressor rows must sum to 1");
  if (parents.empty() || parents[0] != kNoParent) throw ConfigError("template: joint 0 must be the root");
  for (std::int64_t j = 1; j < J; ++j) {
    // Parents precede children, which makes the tree acyclic and single-rooted.
    if (parents[j] < 0 || parents[j] >= j) throw ConfigError("template: parents must precede children");
  }
  for (const auto* t : {&template_vertices, &shape_basis, &expression_basis, &skin_weights, &joint_regressor})
    if (!torch::isfinite(*t).all().item<bool>()) throw ConfigError("template: non-finite entries");
}

BodyTemplate make_toy_template(const BodyDims& dims, std::uint64_t seed) {
  dims.validate();
  const auto V = dims.vertices, J = dims.joints, S = dims.shape, E = dims.expression;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Skeleton sk = build_skeleton(J);

  // Bones of the left half and the center line; right-side geometry is the
  // mirror image, so the mesh is exactly symmetric.
  struct Bone {
    std::int64_t parent, child;
    double radius;
  };
  std::vector<Bone> half_bones;
  for (std::int64_t j = 1; j < J; ++j) {
    if (sk.side[j] == Side::Right) continue;
    const bool center = sk.side[j] == Side::Center;
    half_bones.push_back({sk.parents[j], j, center ? 0.11 : 0.05});
  }
  std::vector<double> bone_len;
  for (const auto& b : half_bones) bone_len.push_back(norm(sub(sk.joints[b.child], sk.joints[b.parent])) + 0.05);
  std::discrete_distribution<std::size_t> pick(bone_len.begin(), bone_len.end());

  std::vector<Vec3> verts(V);
  std::vector<std::int64_t> vmirror(V);
  const std::int64_t pairs = V / 2;
  for (std::int64_t i = 0; i < pairs; ++i) {
    const auto& b = half_bones[pick(rng)];
    const Vec3 a = sk.joints[b.parent], c = sk.joints[b.child];
    const Vec3 dir = scale(sub(c, a), 1.0 / norm(sub(c, a)));
    const Vec3 u = any_perpendicular(dir);
    const Vec3 w{dir[1] * u[2] - dir[2] * u[1], dir[2] * u[0] - dir[0] * u[2], dir[0] * u[1] - dir[1] * u[0]};
    const double t = uni(rng), phi = 2.0 * M_PI * uni(rng);
    const double r = b.radius * (0.8 + 0.4 * uni(rng));
    Vec3 p = add(add(a, scale(sub(c, a), t)), add(scale(u, r * std::cos(phi)), scale(w, r * std::sin(phi))));
    verts[2 * i] = p;
    verts[2 * i + 1] = mirror(p);
    vmirror[2 * i] = 2 * i + 1;
    vmirror[2 * i + 1] = 2 * i;
  }
  if (V % 2 == 1) {
    verts[V - 1] = {0.0, -1.2, 0.12};
    vmirror[V - 1] = V - 1;
  }

  // Skin weights: Gaussian falloff from joint positions, top-4 joints kept.
  auto W = torch::zeros({V, J}, torch::kFloat64);
  {
    auto wa = W.accessor<double, 2>();
    const double tau2 = 2.0 * 0.12 * 0.12;
    const std::int64_t keep = std::min<std::int64_t>(4, J);
    std::vector<std::pair<double, std::int64_t>> d(J);
    for (std::int64_t v = 0; v < V; ++v) {
      for (std::int64_t j = 0; j < J; ++j) {
        const Vec3 diff = sub(verts[v], sk.joints[j]);
        d[j] = {dot(diff, diff), j};
      }
      std::partial_sort(d.begin(), d.begin() + keep, d.end());
      double total = 0.0;
      for (std::int64_t k = 0; k < keep; ++k) total += std::exp(-(d[k].first - d[0].first) / tau2);
      for (std::int64_t k = 0; k < keep; ++k)
        wa[v][d[k].second] = std::exp(-(d[k].first - d[0].first) / tau2) / total;
    }
  }

  // Joint regressor: inverse-distance weights over nearest vertices,
  // symmetrized with the mirror permutation.
  auto R = torch::zeros({J, V}, torch::kFloat64);
  {
    auto ra = R.accessor<double, 2>();
    const std::int64_t k_near = std::min<std::int64_t>(8, V);
    std::vector<std::pair<double, std::int64_t>> d(V);
    for (std::int64_t j = 0; j < J; ++j) {
      for (std::int64_t v = 0; v < V; ++v) d[v] = {norm(sub(verts[v], sk.joints[j])), v};
      std::partial_sort(d.begin(), d.begin() + k_near, d.end());
      double total = 0.0;
      for (std::int64_t k = 0; k < k_near; ++k) total += 1.0 / (d[k].first + 1e-3);
      for (std::int64_t k = 0; k < k_near; ++k) ra[j][d[k].second] = (1.0 / (d[k].first + 1e-3)) / total;
    }
    auto sym = torch::zeros_like(R);
    auto sa = sym.accessor<double, 2>();
    for (std::int64_t j = 0; j < J; ++j)
      for (std::int64_t v = 0; v < V; ++v) sa[j][v] = 0.5 * (ra[j][v] + ra[sk.mirror[j]][vmirror[v]]);
    R = sym / sym.sum(1, true);
  }

  // Dominant joint per vertex defines the hand and face regions.
  auto dominant = W.argmax(1);
  std::vector<std::int64_t> hands, face;
  {
    auto da = dominant.accessor<std::int64_t, 1>();
    for (std::int64_t v = 0; v < V; ++v) {
      if (std::find(sk.arm_ends.begin(), sk.arm_ends.end(), da[v]) != sk.arm_ends.end()) hands.push_back(v);
      if (da[v] == sk.head) face.push_back(v);
    }
  }

  // Shape basis: per component a random mix of girth, height and a smooth
  // random field. Expression basis only moves face vertices.
  auto shape = torch::zeros({V, 3, S}, torch::kFloat64);
  auto expr = torch::zeros({V, 3, E}, torch::kFloat64);
  {
    auto sa = shape.accessor<double, 3>();
    auto ea = expr.accessor<double, 3>();
    for (std::int64_t s = 0; s < S; ++s) {
      const double girth = 0.08 * gauss(rng), height = 0.02 * gauss(rng);
      Vec3 k{gauss(rng) * 2.0, gauss(rng) * 2.0, gauss(rng) * 2.0};
      const double amp = 0.01 * gauss(rng);
      for (std::int64_t i = 0; i < pairs + (V % 2); ++i) {
        const std::int64_t v = (i < pairs) ? 2 * i : V - 1;
        const Vec3& p = verts[v];
        // Girth: displacement away from the closest designed bone.
        Vec3 radial{0, 0, 0};
        double best = 1e9;
        for (std::int64_t j = 1; j < J; ++j) {
          const Vec3 a = sk.joints[sk.parents[j]], c = sk.joints[j];
          const Vec3 q = add(a, scale(sub(c, a), segment_param(p, a, c)));
          const double dd = norm(sub(p, q));
          if (dd < best) {
            best = dd;
            radial = sub(p, q);
          }
        }
        Vec3 disp = add(scale(radial, girth), Vec3{0.0, height * (p[1] + 0.95), 0.0});
        const double field = amp * std::sin(k[0] * std::abs(p[0]) + k[1] * p[1] + k[2] * p[2]);
        disp = add(disp, Vec3{0.0, field, field});
        if (v == V - 1 && V % 2 == 1) disp[0] = 0.0;
        for (int c = 0; c < 3; ++c) sa[v][c][s] = disp[c];
        if (vmirror[v] != v) {
          const Vec3 m = mirror(disp);
          for (int c = 0; c < 3; ++c) sa[vmirror[v]][c][s] = m[c];
        }
      }
    }
    std::vector<char> is_face(V, 0);
    for (auto v : face) is_face[v] = 1;
    for (std::int64_t e = 0; e < E; ++e) {
      Vec3 k{gauss(rng) * 8.0, gauss(rng) * 8.0, gauss(rng) * 8.0};
      const double amp = 0.005 * (1.0 + std::abs(gauss(rng)));
      for (std::int64_t v = 0; v < V; ++v) {
        if (!is_face[v] || vmirror[v] < v) continue;
        const Vec3& p = verts[v];
        Vec3 disp{0.0, amp * std::sin(k[1] * p[1] + k[0] * std::abs(p[0])), amp * std::cos(k[2] * p[2] + k[0] * std::abs(p[0]))};
        for (int c = 0; c < 3; ++c) ea[v][c][e] = disp[c];
        const Vec3 m = mirror(disp);
        for (int c = 0; c < 3; ++c) ea[vmirror[v]][c][e] = m[c];
      }
    }
  }

  BodyTemplate tpl;
  tpl.template_vertices = to_tensor(verts);
  tpl.shape_basis = shape;
  tpl.expression_basis = expr;
  tpl.skin_weights = W;
  tpl.joint_regressor = R;
  tpl.parents = sk.parents;
  tpl.joint_mirror = sk.mirror;
  tpl.vertex_mirror = vmirror;
  tpl.hand_vertices = hands;
  tpl.face_vertices = face;
  tpl.validate();
  return tpl;
}

void BodyTemplate::save(const std::string& path) const {
  io::Record rec;
  rec.put("template_vertices", template_vertices);
  rec.put("shape_basis", shape_basis);
  rec.put("expression_basis", expression_basis);
  rec.put("skin_weights", skin_weights);
  rec.put("joint_regressor", joint_regressor);
  rec.put("parents", index_tensor(parents));
  rec.put("joint_mirror", index_tensor(joint_mirror));
  rec.put("vertex_mirror", index_tensor(vertex_mirror));
  rec.put("hand_vertices", index_tensor(hand_vertices));
  rec.put("face_vertices", index_tensor(face_vertices));
  io::write_container(path, io::kTemplateMagic, {rec});
}

BodyTemplate BodyTemplate::load(const std::string& path) {
  const auto recs = io::read_container(path, io::kTemplateMagic);
  if (recs.size() != 1) throw IoError("template: expected exactly one record", 0);
  const auto& rec = recs[0];
  BodyTemplate tpl;
  tpl.template_vertices = rec.get("template_vertices");
  tpl.shape_basis = rec.get("shape_basis");
  tpl.expression_basis = rec.get("expression_basis");
  tpl.skin_weights = rec.get("skin_weights");
  tpl.joint_regressor = rec.get("joint_regressor");
  tpl.parents = to_vector(rec.get("parents"));
  tpl.joint_mirror = to_vector(rec.get("joint_mirror"));
  tpl.vertex_mirror = to_vector(rec.get("vertex_mirror"));
  tpl.hand_vertices = to_vector(rec.get("hand_vertices"));
  tpl.face_vertices = to_vector(rec.get("face_vertices"));
  tpl.validate();
  return tpl;
}

BodyParams BodyParams::zeros(std::int64_t batch, const BodyDims& dims, torch::TensorOptions opts) {
  return BodyParams{torch::zeros({batch, dims.joints, 3}, opts), torch::zeros({batch, dims.shape}, opts),
                    torch::zeros({batch, dims.expression}, opts), torch::zeros({batch, 3}, opts),
                    torch::zeros({batch, 3}, opts)};
}

BodyParams BodyParams::index(const torch::Tensor& rows) const {
  return BodyParams{theta.index_select(0, rows), beta.index_select(0, rows), alpha.index_select(0, rows),
                    root_rotation.index_select(0, rows), root_translation.index_select(0, rows)};
}

BodyParams BodyParams::to(torch::ScalarType dtype) const {
  return BodyParams{theta.to(dtype), beta.to(dtype), alpha.to(dtype), root_rotation.to(dtype),
                    root_translation.to(dtype)};
}

BodyParams BodyParams::cat(const std::vector<BodyParams>& parts) {
  std::vector<torch::Tensor> th, be, al, rr, rt;
  for (const auto& p : parts) {
    th.push_back(p.theta);
    be.push_back(p.beta);
    al.push_back(p.alpha);
    rr.push_back(p.root_rotation);
    rt.push_back(p.root_translation);
  }
  return BodyParams{torch::cat(th), torch::cat(be), torch::cat(al), torch::cat(rr), torch::cat(rt)};
}

torch::Tensor axis_angle_to_matrix(const torch::Tensor& w) {
  const auto theta2 = (w * w).sum(-1, true).unsqueeze(-1);  // [...,1,1]
  const auto small = theta2 < 1e-16;
  const auto safe2 = torch::where(small, torch::ones_like(theta2), theta2);
  const auto angle = safe2.sqrt();
  const auto a = torch::where(small, 1.0 - theta2 / 6.0, torch::sin(angle) / angle);
  const auto b = torch::where(small, 0.5 - theta2 / 24.0, (1.0 - torch::cos(angle)) / safe2);
  const auto K = skew(w);
  auto eye = torch::eye(3, w.options()).expand_as(K);
  return eye + a * K + b * K.matmul(K);
}

torch::Tensor matrix_to_axis_angle(const torch::Tensor& R) {
  const auto trace = R.diagonal(0, -2, -1).sum(-1);
  const auto cos_a = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
  const auto angle = torch::acos(cos_a);
  auto v = torch::stack({R.select(-2, 2).select(-1, 1) - R.select(-2, 1).select(-1, 2),
                         R.select(-2, 0).select(-1, 2) - R.select(-2, 2).select(-1, 0),
                         R.select(-2, 1).select(-1, 0) - R.select(-2, 0).select(-1, 1)},
                        -1);
  const auto s = torch::sin(angle);
  const auto small = s.abs() < 1e-12;
  const auto factor = torch::where(small, torch::full_like(angle, 0.5), angle / (2.0 * torch::where(small, torch::ones_like(s), s)));
  return v * factor.unsqueeze(-1);
}

MeshResult forward(const BodyParams& p, const BodyTemplate& tpl) {
  const auto d = tpl.dims();
  const auto B = p.theta.size(0);
  if (p.theta.dim() != 3 || p.theta.size(1) != d.joints || p.theta.size(2) != 3)
    throw ShapeError("body forward: theta must be [B," + std::to_string(d.joints) + ",3]");
  if (p.beta.sizes() != torch::IntArrayRef{B, d.shape}) throw ShapeError("body forward: beta must be [B,S]");
  if (p.alpha.sizes() != torch::IntArrayRef{B, d.expression}) throw ShapeError("body forward: alpha must be [B,E]");
  if (p.root_rotation.sizes() != torch::IntArrayRef{B, 3} || p.root_translation.sizes() != torch::IntArrayRef{B, 3})
    throw ShapeError("body forward: root transform must be [B,3]");
  require_finite(p.theta, "theta");
  require_finite(p.beta, "beta");
  require_finite(p.alpha, "alpha");
  require_finite(p.root_rotation, "root_rotation");
  require_finite(p.root_translation, "root_translation");

  const auto opts = p.theta.options();
  const auto T = tpl.template_vertices.to(opts.dtype());
  const auto SB = tpl.shape_basis.to(opts.dtype());
  const auto EB = tpl.expression_basis.to(opts.dtype());
  const auto W = tpl.skin_weights.to(opts.dtype());
  const auto Reg = tpl.joint_regressor.to(opts.dtype());

  const auto rest = T.unsqueeze(0) + torch::einsum("vcs,bs->bvc", {SB, p.beta}) +
                    torch::einsum("vce,be->bvc", {EB, p.alpha});
  const auto J_rest = torch::einsum("jv,bvc->bjc", {Reg, rest});

  // Chain accumulation. d_j is the displacement of joint j from rest, so the
  // zero pose leaves every quantity exactly at its rest value.
  const auto R_local = axis_angle_to_matrix(p.theta);  // [B,J,3,3]
  const auto eye = torch::eye(3, opts);
  std::vector<torch::Tensor> R_glob(d.joints), disp(d.joints);
  R_glob[0] = R_local.select(1, 0);
  disp[0] = torch::zeros({B, 3}, opts);
  for (std::int64_t j = 1; j < d.joints; ++j) {
    const auto par = tpl.parents[j];
    R_glob[j] = R_glob[par].matmul(R_local.select(1, j));
    const auto bone = (J_rest.select(1, j) - J_rest.select(1, par)).unsqueeze(-1);
    disp[j] = disp[par] + (R_glob[par] - eye).matmul(bone).squeeze(-1);
  }
  const auto M = torch::stack(R_glob, 1) - eye;  // [B,J,3,3]
  const auto D = torch::stack(disp, 1);           // [B,J,3]
  const auto offset = D - M.matmul(J_rest.unsqueeze(-1)).squeeze(-1);

  const auto M_blend = torch::einsum("vj,bjac->bvac", {W, M});
  auto verts = rest + M_blend.matmul(rest.unsqueeze(-1)).squeeze(-1) + torch::einsum("vj,bjc->bvc", {W, offset});
  auto joints = J_rest + D;

  // Global rotation about the root joint, then translation.
  const auto Rr = axis_angle_to_matrix(p.root_rotation) - eye;  // [B,3,3]
  const auto root = joints.select(1, 0).unsqueeze(1);
  const auto t = p.root_translation.unsqueeze(1);
  verts = verts + (verts - root).matmul(Rr.transpose(1, 2)) + t;
  joints = joints + (joints - root).matmul(Rr.transpose(1, 2)) + t;
  return MeshResult{verts, joints};
}

torch::Tensor regress_joints(const torch::Tensor& vertices, const BodyTemplate& tpl) {
  const auto V = tpl.template_vertices.size(0);
  const bool batched = vertices.dim() == 3;
  if (!((vertices.dim() == 2 || batched) && vertices.size(-2) == V && vertices.size(-1) == 3))
    throw ShapeError("regress_joints: vertices must be [V,3] or [B,V,3] with V=" + std::to_string(V));
  const auto Reg = tpl.joint_regressor.to(vertices.scalar_type());
  return batched ? torch::einsum("jv,bvc->bjc", {Reg, vertices}) : Reg.matmul(vertices);
}

BodyParams mirror_params(const BodyParams& p, const BodyTemplate& tpl) {
  const auto flip_aa = torch::tensor({1.0, -1.0, -1.0}, p.theta.options());
  const auto perm = torch::tensor(tpl.joint_mirror, torch::kInt64);
  BodyParams out;
  out.theta = p.theta.index_select(1, perm) * flip_aa;
  out.beta = p.beta;
  out.alpha = p.alpha;
  out.root_rotation = p.root_rotation * flip_aa;
  out.root_translation = p.root_translation * torch::tensor({-1.0, 1.0, 1.0}, p.theta.options());
  return out;
}

}  // namespace synmesh::body
