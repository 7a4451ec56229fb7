#include "synmesh/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "synmesh/container.hpp"
#include "synmesh/errors.hpp"
#include "synmesh/perception_head.hpp"

namespace synmesh::metrics {

Points to_points(const torch::Tensor& t) {
  if (t.dim() != 2 || t.size(1) != 3) throw ShapeError("expected [N,3] points");
  const auto c = t.detach().to(torch::kFloat64).contiguous().cpu();
  Points p(c.size(0), 3);
  std::copy_n(c.data_ptr<double>(), c.numel(), p.data());
  return p;
}

Points root_align(const Points& p, Eigen::Index root) {
  if (root < 0 || root >= p.rows()) throw ShapeError("root_align: root index out of range");
  return p.rowwise() - p.row(root);
}

double mpjpe(const Points& pred, const Points& gt) {
  if (pred.rows() != gt.rows() || pred.rows() == 0) throw ShapeError("mpjpe: point sets differ in size");
  return (pred - gt).rowwise().norm().mean();
}

Points Similarity::apply(const Points& p) const {
  Points out = (scale * p * rotation.transpose()).rowwise() + translation;
  return out;
}

Similarity procrustes(const Points& pred, const Points& gt) {
  if (pred.rows() != gt.rows()) throw ShapeError("procrustes: point sets differ in size");
  if (pred.rows() < 3) throw DegeneracyError("procrustes: at least 3 points required");
  const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
  const Points P = pred.rowwise() - mp, G = gt.rowwise() - mg;

  Eigen::JacobiSVD<Eigen::MatrixXd> gs(G);
  const auto sv = gs.singularValues();
  if (!(sv(1) > 1e-9 * sv(0))) throw DegeneracyError("procrustes: target points are collinear");
  const double pn = P.squaredNorm();
  if (!(pn > 0.0)) throw DegeneracyError("procrustes: source points coincide");

  const Eigen::Matrix3d cov = G.transpose() * P;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d(1.0, 1.0, (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0);
  Similarity s;
  s.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  s.scale = svd.singularValues().dot(d) / pn;
  s.translation = mg - s.scale * mp * s.rotation.transpose();
  return s;
}

double pa_mpjpe(const Points& pred, const Points& gt) { return mpjpe(procrustes(pred, gt).apply(pred), gt); }

double mpve(const Points& pred, const Points& gt) {
  if (pred.rows() != gt.rows() || pred.rows() == 0) throw ShapeError("mpve: vertex counts differ");
  return (pred - gt).rowwise().norm().mean();
}

double region_pve(const Points& pred, const Points& gt, const std::vector<std::int64_t>& vertices) {
  if (pred.rows() != gt.rows()) throw ShapeError("region_pve: vertex counts differ");
  if (vertices.empty()) throw ShapeError("region_pve: empty region");
  double s = 0.0;
  for (auto v : vertices) {
    if (v < 0 || v >= pred.rows()) throw ShapeError("region_pve: vertex index out of range");
    s += (pred.row(v) - gt.row(v)).norm();
  }
  return s / double(vertices.size());
}

F1Score f1_match(const torch::Tensor& pred_roots, const torch::Tensor& presence, const torch::Tensor& gt_roots,
                 double threshold) {
  if (!(threshold > 0.0)) throw DomainError("f1_match: threshold must be > 0");
  const auto pr = pred_roots.detach().to(torch::kFloat64).contiguous();
  const auto gr = gt_roots.detach().to(torch::kFloat64).contiguous();
  const auto ps = presence.detach().to(torch::kFloat64).contiguous();
  std::vector<std::int64_t> live;
  for (std::int64_t k = 0; k < pr.size(0); ++k)
    if (ps[k].item<double>() > 0.5) live.push_back(k);
  const auto G = gr.size(0);
  struct Cand {
    double d;
    std::int64_t g, k;
  };
  std::vector<Cand> cands;
  auto pa = pr.accessor<double, 2>();
  auto ga = gr.accessor<double, 2>();
  for (std::int64_t g = 0; g < G; ++g)
    for (auto k : live) {
      const double d = std::hypot(pa[k][0] - ga[g][0], pa[k][1] - ga[g][1]);
      if (d < threshold) cands.push_back({d, g, k});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.d < b.d; });
  std::vector<char> gu(G, 0), ku(pr.size(0), 0);
  F1Score s;
  for (const auto& c : cands) {
    if (gu[c.g] || ku[c.k]) continue;
    gu[c.g] = ku[c.k] = 1;
    ++s.true_positives;
  }
  const auto np = static_cast<double>(live.size());
  if (np == 0 && G == 0) return {1.0, 1.0, 1.0, 0};
  s.precision = np > 0 ? double(s.true_positives) / np : 0.0;
  s.recall = G > 0 ? double(s.true_positives) / double(G) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

void write_predictions(const std::vector<ScenePrediction>& preds, const std::string& path,
                       const std::string& meta_json) {
  std::vector<io::Record> recs;
  io::Record header;
  header.put_text("kind", "predictions");
  header.put_int("count", static_cast<std::int64_t>(preds.size()));
  header.put_text("config", meta_json);
  recs.push_back(std::move(header));
  for (const auto& p : preds) {
    io::Record r;
    r.put("joints3d", p.joints3d.detach().to(torch::kFloat32));
    r.put("vertices", p.vertices.detach().to(torch::kFloat32));
    r.put("joints2d", p.joints2d.detach().to(torch::kFloat32));
    r.put("presence", p.presence.detach().to(torch::kFloat32));
    recs.push_back(std::move(r));
  }
  io::write_container(path, io::kPredictionMagic, recs);
}

std::vector<ScenePrediction> read_predictions(const std::string& path) {
  const auto recs = io::read_container(path, io::kPredictionMagic);
  if (recs.empty() || !recs[0].has("count")) throw FormatError("predictions: missing header record", 0);
  const auto n = recs[0].get_int("count");
  if (static_cast<std::int64_t>(recs.size()) != n + 1) throw FormatError("predictions: record count mismatch", 0);
  std::vector<ScenePrediction> out;
  for (std::int64_t i = 1; i <= n; ++i) {
    const auto& r = recs[i];
    out.push_back({r.get("joints3d"), r.get("vertices"), r.get("joints2d"), r.get("presence")});
  }
  return out;
}

EvalReport evaluate(const std::vector<ScenePrediction>& preds, const std::vector<scene::SceneSample>& scenes,
                    const body::BodyTemplate& tpl, double threshold_px) {
  if (preds.size() != scenes.size()) throw ShapeError("evaluate: prediction and scene counts differ");
  EvalReport rep;
  rep.threshold_px = threshold_px;
  double n_inst = 0;
  std::int64_t tp = 0, n_pred = 0, n_gt = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    const auto& p = preds[i];
    SceneRow row;
    row.scene = static_cast<std::int64_t>(i);
    row.instances = static_cast<std::int64_t>(s.instances.size());
    std::vector<torch::Tensor> gt2d, gt_roots;
    for (const auto& in : s.instances) {
      gt2d.push_back(in.joints2d);
      gt_roots.push_back(in.joints2d[0]);
    }
    if (!s.instances.empty()) {
      const auto pairs = head::match_instances(p.joints2d, p.presence, torch::stack(gt2d), double(s.width()) / 2.0);
      for (auto [g, k] : pairs) {
        const auto& in = s.instances[g];
        const auto pj = root_align(to_points(p.joints3d[k])), gj = root_align(to_points(in.joints3d));
        const auto pv = to_points(p.vertices[k]), gv = to_points(in.vertices);
        const Eigen::RowVector3d pr = to_points(p.joints3d[k]).row(0), gr = to_points(in.joints3d).row(0);
        const Points pva = pv.rowwise() - pr, gva = gv.rowwise() - gr;
        row.mpjpe += mpjpe(pj, gj);
        row.pa_mpjpe += pa_mpjpe(pj, gj);
        row.mpve += mpve(pva, gva);
        if (!tpl.hand_vertices.empty()) row.hand_pve += region_pve(pva, gva, tpl.hand_vertices);
        if (!tpl.face_vertices.empty()) row.face_pve += region_pve(pva, gva, tpl.face_vertices);
      }
      const double k = double(pairs.size());
      for (double* v : {&row.mpjpe, &row.pa_mpjpe, &row.mpve, &row.hand_pve, &row.face_pve}) *v *= kMillimeters / k;
    }
    const auto roots = s.instances.empty() ? torch::zeros({0, 2}) : torch::stack(gt_roots);
    const auto f = f1_match(p.joints2d.select(1, 0), p.presence, roots, threshold_px);
    row.f1 = f.f1;
    row.precision = f.precision;
    row.recall = f.recall;
    tp += f.true_positives;
    n_pred += (p.presence > 0.5).sum().item<std::int64_t>();
    n_gt += row.instances;

    const double w = double(row.instances);
    rep.mpjpe += w * row.mpjpe;
    rep.pa_mpjpe += w * row.pa_mpjpe;
    rep.mpve += w * row.mpve;
    rep.hand_pve += w * row.hand_pve;
    rep.face_pve += w * row.face_pve;
    n_inst += w;
    rep.rows.push_back(row);
  }
  if (n_inst > 0)
    for (double* v : {&rep.mpjpe, &rep.pa_mpjpe, &rep.mpve, &rep.hand_pve, &rep.face_pve}) *v /= n_inst;
  rep.precision = n_pred > 0 ? double(tp) / double(n_pred) : 0.0;
  rep.recall = n_gt > 0 ? double(tp) / double(n_gt) : 0.0;
  rep.f1 = rep.precision + rep.recall > 0 ? 2 * rep.precision * rep.recall / (rep.precision + rep.recall) : 0.0;
  return rep;
}

std::string EvalReport::to_json(const std::string& config_json) const {
  nlohmann::json j;
  j["threshold_px"] = threshold_px;
  j["scenes"] = rows.size();
  j["mpjpe_mm"] = mpjpe;
  j["pa_mpjpe_mm"] = pa_mpjpe;
  j["mpve_mm"] = mpve;
  j["pve_mm"] = mpve;
  j["hand_pve_mm"] = hand_pve;
  j["face_pve_mm"] = face_pve;
  j["f1"] = f1;
  j["precision"] = precision;
  j["recall"] = recall;
  j["config"] = nlohmann::json::parse(config_json.empty() ? "{}" : config_json);
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "scene,instances,mpjpe_mm,pa_mpjpe_mm,mpve_mm,hand_pve_mm,face_pve_mm,f1,precision,recall\n";
  for (const auto& r : rows)
    os << r.scene << ',' << r.instances << ',' << r.mpjpe << ',' << r.pa_mpjpe << ',' << r.mpve << ',' << r.hand_pve
       << ',' << r.face_pve << ',' << r.f1 << ',' << r.precision << ',' << r.recall << '\n';
  return os.str();
}

void EvalReport::write(const std::string& json_path, const std::string& csv_path, const std::string& config) const {
  std::ofstream js(json_path), cs(csv_path);
  if (!js || !cs) throw IoError("report: cannot open output files", 0);
  js << to_json(config) << '\n';
  cs << to_csv();
}

}  // namespace synmesh::metrics
