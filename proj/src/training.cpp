#include "synmesh/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "synmesh/config.hpp"
#include "synmesh/container.hpp"
#include "synmesh/errors.hpp"

namespace synmesh::train {
namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

torch::Tensor l1(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().mean(); }

std::vector<std::pair<std::string, torch::Tensor>> named_state(torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : m.named_parameters()) out.emplace_back(p.key(), p.value());
  for (const auto& b : m.named_buffers()) out.emplace_back(b.key(), b.value());
  return out;
}

void put_state(io::Record& rec, torch::nn::Module& m, const std::string& prefix = "") {
  for (const auto& p : m.named_parameters())
    rec.put(prefix + p.key(), p.value().detach().cpu(), p.value().requires_grad() ? io::kNone : io::kFrozen);
  for (const auto& b : m.named_buffers()) rec.put(prefix + b.key(), b.value().detach().cpu(), io::kFrozen);
}

void load_state(const io::Record& rec, torch::nn::Module& m, const std::string& prefix = "") {
  torch::NoGradGuard ng;
  for (auto& [name, t] : named_state(m)) {
    const auto key = prefix + name;
    if (!rec.has(key)) throw FormatError("checkpoint: missing tensor '" + key + "'", 0);
    const auto& v = rec.get(key);
    if (v.sizes() != t.sizes()) throw FormatError("checkpoint: shape mismatch for '" + key + "'", 0);
    t.copy_(v);
  }
}

torch::Tensor blob(const std::string& bytes) {
  auto t = torch::empty({static_cast<std::int64_t>(bytes.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
  return t;
}

std::string unblob(const torch::Tensor& t) {
  const auto c = t.contiguous();
  return std::string(static_cast<const char*>(c.data_ptr()), static_cast<std::size_t>(c.numel()));
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  body.validate();
  if (image_size <= 0 || image_size % 16 != 0) throw ConfigError("model.image_size: must be a positive multiple of 16");
  if (patch <= 0 || image_size % patch != 0) throw ConfigError("model.patch: must divide image_size");
  if (vit_dim % vit_heads != 0) throw ConfigError("model.vit_dim: must be divisible by vit_heads");
  if (dim % 4 != 0) throw ConfigError("model.dim: must be divisible by 4 heads");
  if (max_instances < 1) throw ConfigError("model.max_instances: must be >= 1");
  if (guidance_tokens < 1 || guidance_tokens > (image_size / patch) * (image_size / patch))
    throw ConfigError("model.guidance_tokens: must lie in [1, tokens]");
  if (dictionary_entries < 1) throw ConfigError("model.dictionary_entries: must be >= 1");
  if (!(heatmap_sigma > 0)) throw ConfigError("model.heatmap_sigma: must be > 0");
  if (unet_base % 4 != 0 || unet_mid % 4 != 0) throw ConfigError("model.unet widths must be divisible by 4 heads");
  if (diffusion_steps < 1 || t_star < 0 || t_star > diffusion_steps)
    throw ConfigError("model.t_star: must lie in [0, diffusion_steps]");
}

gen::GenerativeOptions ModelConfig::generative() const {
  gen::GenerativeOptions g;
  g.autoencoder = {channels, latent_channels, ae_hidden};
  g.unet = {latent_channels, unet_base, unet_mid, 64, d_prompt, 4};
  g.prompt = {64, d_prompt};
  g.joints = body.joints;
  g.steps = diffusion_steps;
  g.t_star = t_star;
  return g;
}

void TrainConfig::validate() const {
  if (!(lambda_align >= 0.0 && lambda_align <= 1.0)) throw ConfigError("lambda_align: must lie in [0,1]");
  if (!(lr > 0.0) || !(lr_final > 0.0)) throw ConfigError("lr: learning rates must be > 0");
  if (!(decay_fraction >= 0.0 && decay_fraction <= 1.0)) throw ConfigError("decay_fraction: must lie in [0,1]");
  if (weight_decay < 0.0) throw ConfigError("weight_decay: must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (steps < 0) throw ConfigError("steps: must be >= 0");
  if (log_every < 1) throw ConfigError("log_every: must be >= 1");
  if (ablation.fusion == camf::FusionMode::Sum && model.dim <= 0) throw ConfigError("dim: must be > 0");
  model.validate();
}

double TrainConfig::lr_at(std::int64_t step) const {
  const auto tail = static_cast<std::int64_t>(std::llround(double(steps) * decay_fraction));
  return step >= steps - tail ? lr_final : lr;
}

// ---------------------------------------------------------------------------

torch::Tensor total_loss(const torch::Tensor& align, const torch::Tensor& reg, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("total_loss: lambda must lie in [0,1]");
  return lambda * align + (1.0 - lambda) * reg;
}

LossBreakdown reg_loss(const BodyPrediction& pred, const MatchedTargets& t, const LossWeights& w, double half_width) {
  LossBreakdown lb;
  const auto zero = torch::zeros({}, pred.presence_logit.options());
  const auto presence = torch::sigmoid(pred.presence_logit);
  if (t.presence_target.sizes() != presence.sizes()) throw StateError("reg_loss: no assignment for this batch");
  lb.presence = torch::binary_cross_entropy(presence, t.presence_target.to(presence.scalar_type()));
  if (t.rows.empty()) {
    lb.theta = lb.beta = lb.alpha = lb.joints3d = lb.vertices = lb.joints2d = zero;
  } else {
    const auto idx = torch::tensor(t.rows, torch::kInt64);
    const auto dt = pred.joints3d.scalar_type();
    const auto p = pred.params.index(idx);
    const auto g = t.params.to(dt);
    lb.theta = l1(p.theta, g.theta) + l1(p.root_rotation, g.root_rotation);
    lb.beta = l1(p.beta, g.beta);
    lb.alpha = l1(p.alpha, g.alpha);
    const auto pj = pred.joints3d.index_select(0, idx), gj = t.joints3d.to(dt);
    const auto pr = pj.narrow(1, 0, 1), gr = gj.narrow(1, 0, 1);
    lb.joints3d = l1(pj - pr, gj - gr);
    lb.vertices = l1(pred.vertices.index_select(0, idx) - pr, t.vertices.to(dt) - gr);
    lb.joints2d = l1(pred.joints2d.index_select(0, idx) / half_width, t.joints2d.to(dt) / half_width);
  }
  lb.reg = w.theta * lb.theta + w.beta * lb.beta + w.alpha * lb.alpha + w.joints3d * lb.joints3d +
           w.vertices * lb.vertices + w.joints2d * lb.joints2d + w.presence * lb.presence;
  return lb;
}

// ---------------------------------------------------------------------------

PreparedData prepare(const std::vector<scene::SceneSample>& scenes, const ModelConfig& cfg) {
  if (scenes.empty()) throw ConfigError("dataset is empty");
  PreparedData d;
  d.scenes = &scenes;
  const auto H = scenes[0].height(), W = scenes[0].width();
  if (H != cfg.image_size || W != cfg.image_size)
    throw ConfigError("dataset images are " + std::to_string(H) + "x" + std::to_string(W) + ", model expects " +
                      std::to_string(cfg.image_size));
  d.camera = scenes[0].camera;
  const auto g = cfg.image_size / cfg.patch;
  const auto hl = H / 4, wl = W / 4;
  std::vector<torch::Tensor> images, heat, pj, pc, pp, pm, tm;
  for (const auto& s : scenes) {
    if (s.height() != H || s.width() != W) throw ConfigError("dataset mixes image sizes");
    if (s.camera.focal != d.camera.focal || s.camera.cx != d.camera.cx || s.camera.cy != d.camera.cy)
      throw ConfigError("dataset mixes camera intrinsics");
    if (static_cast<std::int64_t>(s.instances.size()) > cfg.max_instances)
      throw CapacityError("scene has more instances than max_instances");
    images.push_back(s.image.permute({2, 0, 1}).to(torch::kFloat32));
    torch::Tensor hm = s.instances.empty() ? torch::zeros({cfg.body.joints, H, W}) : cond::scene_heatmap(s, cfg.heatmap_sigma);
    heat.push_back(cond::area_downsample(hm.unsqueeze(0), hl, wl).squeeze(0));
    const auto pi = cond::prompt_inputs(s, cfg.max_instances);
    if (s.instances.empty()) {
      const auto n = cfg.max_instances * cfg.body.joints;
      pj.push_back(torch::zeros({n, 2}));
      pc.push_back(torch::zeros({n}));
      pp.push_back(torch::zeros({n}, torch::kBool));
      pm.push_back(torch::zeros({n}, torch::kBool));
    } else {
      pj.push_back(pi.joints2d);
      pc.push_back(pi.conf);
      pp.push_back(pi.present);
      pm.push_back(pi.token_mask);
    }
    tm.push_back(cond::union_token_mask(cond::instance_masks(s, cfg.mask_margin).view({-1, H, W}), g, g));
  }
  d.images = torch::stack(images).contiguous();
  d.heatmaps = torch::stack(heat).contiguous();
  d.prompt_joints = torch::stack(pj);
  d.prompt_conf = torch::stack(pc);
  d.prompt_present = torch::stack(pp);
  d.prompt_mask = torch::stack(pm);
  d.token_mask = torch::stack(tm);
  return d;
}

// ---------------------------------------------------------------------------

SynergyModelImpl::SynergyModelImpl(const ModelConfig& cfg, const Ablation& ab, const body::BodyTemplate& tpl)
    : cfg_(cfg), ablation_(ab), tpl_(tpl) {
  cfg.validate();
  if (!(tpl.dims() == cfg.body)) throw ConfigError("model: body template does not match the configured dims");
  disc::ViTOptions vo;
  vo.image_size = cfg.image_size;
  vo.channels = cfg.channels;
  vo.patch = cfg.patch;
  vo.d_model = cfg.vit_dim;
  vo.heads = cfg.vit_heads;
  vo.blocks = cfg.vit_blocks;
  vit = register_module("vit", disc::ViTEncoder(vo));
  gen = register_module("gen", gen::GenerativePathway(cfg.generative()));
  dcfl::DcflOptions dopt;
  dopt.vit_dim = cfg.vit_dim;
  dopt.gen_dim = cfg.unet_base;
  dopt.dim = cfg.dim;
  dopt.entries = cfg.dictionary_entries;
  dopt.guidance_tokens = cfg.guidance_tokens;
  dopt.use_explicit_maps = ab.use_explicit_maps;
  dopt.use_implicit_maps = ab.use_implicit_maps;
  dcfl = register_module("dcfl", dcfl::Dcfl(dopt));
  camf::CamfOptions copt;
  copt.dim = cfg.dim;
  copt.fuse_dim = cfg.dim;
  copt.levels = cfg.fuse_levels;
  copt.cau_blocks = cfg.cau_blocks;
  copt.tokens = (cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch);
  copt.mode = ab.fusion;
  camf = register_module("camf", camf::Camf(copt));
  head::HeadOptions hopt;
  hopt.dim = cfg.dim;
  hopt.blocks = cfg.head_blocks;
  hopt.queries = cfg.max_instances;
  hopt.dims = cfg.body;
  head = register_module("head", head::PerceptionHead(hopt));
}

ModelOutput SynergyModelImpl::forward_features(const nn::FeatureMap& vit_f, const std::vector<nn::AttentionMap>& vit_maps,
                                               const nn::FeatureMap& gen_f,
                                               const std::vector<nn::AttentionMap>& gen_maps,
                                               const torch::Tensor& token_mask, const Frame& frame) {
  ModelOutput out;
  out.explicit_maps = vit_maps;
  out.implicit_maps = gen_maps;
  out.dcfl = dcfl(vit_f, vit_maps, gen_f, gen_maps);
  out.camf = camf(out.dcfl.vit_hat, out.dcfl.gen_hat);
  out.decode = head->decode(out.camf.fused, token_mask);
  out.head = head->regress(out.decode.queries);

  const auto B = out.head.cam.size(0), K = out.head.cam.size(1);
  auto& bp = out.body;
  bp.params = out.head.params;
  bp.params.root_translation =
      head::cam_to_translation(out.head.cam, frame.camera.focal, frame.height, frame.width).reshape({B * K, 3});
  const auto mesh = body::forward(bp.params, tpl_);
  bp.joints3d = mesh.joints3d;
  bp.vertices = mesh.vertices;
  bp.joints2d = frame.camera.project(mesh.joints3d);
  bp.presence_logit = out.head.presence_logit;
  return out;
}

ModelOutput SynergyModelImpl::forward(const PreparedData& data, const torch::Tensor& rows, const torch::Tensor& noise) {
  const auto images = data.images.index_select(0, rows);
  const auto H = images.size(2), W = images.size(3);
  auto v = vit(images);
  nn::FeatureMap gen_f;
  std::vector<nn::AttentionMap> gen_maps;
  if (ablation_.use_gen_pathway) {
    torch::Tensor z0;
    {
      torch::NoGradGuard ng;
      z0 = gen->encode_latent(images);
    }
    const auto z_t = gen::forward_diffuse(z0, gen->t_star(), noise.to(z0.scalar_type()), gen->schedule());
    cond::ConditionSet c;
    c.heatmap = data.heatmaps.index_select(0, rows);
    c.c_j = torch::cat({z0, c.heatmap.to(z0.scalar_type())}, 1);
    c.c_t_mask = data.prompt_mask.index_select(0, rows);
    c.c_t = gen->prompt(data.prompt_joints.index_select(0, rows), data.prompt_conf.index_select(0, rows),
                        data.prompt_present.index_select(0, rows), H, W);
    auto d = gen->denoise_single_step(z_t, c);
    gen_f = d.features;
    gen_maps = d.attention;
  }
  return forward_features(v.features, v.attention, gen_f, gen_maps, data.token_mask.index_select(0, rows),
                          Frame{data.camera, H, W});
}

std::vector<torch::Tensor> SynergyModelImpl::trainable_parameters() {
  std::vector<torch::Tensor> out;
  auto add = [&](const std::vector<torch::Tensor>& ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  add(vit->parameters());
  if (ablation_.use_gen_pathway) add(gen->trainable_parameters());
  add(dcfl->parameters());
  add(camf->parameters());
  add(head->parameters());
  return out;
}

MatchedTargets match_batch(const BodyPrediction& pred, const std::vector<const scene::SceneSample*>& scenes,
                           std::int64_t K, double half_width) {
  MatchedTargets t;
  const auto B = static_cast<std::int64_t>(scenes.size());
  t.presence_target = torch::zeros({B, K}, pred.presence_logit.options());
  const auto presence = torch::sigmoid(pred.presence_logit.detach());
  std::vector<body::BodyParams> ps;
  std::vector<torch::Tensor> j3, vv, j2;
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& s = *scenes[b];
    if (s.instances.empty()) continue;
    std::vector<torch::Tensor> gt2d;
    for (const auto& in : s.instances) gt2d.push_back(in.joints2d);
    const auto pairs = head::match_instances(pred.joints2d.narrow(0, b * K, K), presence[b], torch::stack(gt2d),
                                             half_width);
    for (auto [g, k] : pairs) {
      const auto& in = s.instances[g];
      t.rows.push_back(b * K + k);
      t.presence_target[b][k] = 1.0;
      ps.push_back(in.params);
      j3.push_back(in.joints3d);
      vv.push_back(in.vertices);
      j2.push_back(in.joints2d);
    }
  }
  if (!t.rows.empty()) {
    t.params = body::BodyParams::cat(ps);
    t.joints3d = torch::stack(j3);
    t.vertices = torch::stack(vv);
    t.joints2d = torch::stack(j2);
  }
  return t;
}

// ---------------------------------------------------------------------------

std::string LogRecord::to_json() const {
  nlohmann::json j{{"step", step}, {"L_total", total}, {"L_align", align}, {"L_reg", reg}};
  j["MPJPE_val"] = mpjpe_val ? nlohmann::json(*mpjpe_val) : nlohmann::json(nullptr);
  return j.dump();
}

Trainer::Trainer(const TrainConfig& cfg, const body::BodyTemplate& tpl) : cfg_(cfg), tpl_(tpl) {
  cfg_.validate();
  torch::manual_seed(cfg_.seed);
  model_ = SynergyModel(cfg_.model, cfg_.ablation, tpl_);
  opt_ = std::make_unique<torch::optim::AdamW>(
      model_->trainable_parameters(), torch::optim::AdamWOptions(cfg_.lr).weight_decay(cfg_.weight_decay));
}

void Trainer::set_denoiser(gen::GenerativePathway& src) {
  {
    torch::NoGradGuard ng;
    auto dst = named_state(*model_->gen);
    auto from = named_state(*src);
    if (dst.size() != from.size()) throw ConfigError("denoiser: pathway layouts differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].first != from[i].first || dst[i].second.sizes() != from[i].second.sizes())
        throw ConfigError("denoiser: pathway layouts differ at '" + dst[i].first + "'");
      dst[i].second.copy_(from[i].second);
    }
  }
  if (!model_->gen->pretrained()) throw StateError("denoiser: source pathway has not been pretrained");
  model_->gen->mark_pretrained();
}

void Trainer::load_denoiser(const std::string& path) {
  ModelConfig mc;
  auto g = load_pathway(path, &mc);
  set_denoiser(g);
}

torch::Tensor Trainer::batch_rows(std::int64_t step, std::int64_t n) const {
  std::vector<std::int64_t> rows;
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> perm(n);
  for (std::int64_t i = 0; i < cfg_.batch_size; ++i) {
    const auto pos = step * cfg_.batch_size + i;
    const auto epoch = pos / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      auto rng = scene::make_stream(cfg_.seed, static_cast<std::uint64_t>(epoch), 3);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    rows.push_back(perm[pos % n]);
  }
  return torch::tensor(rows, torch::kInt64);
}

LossBreakdown Trainer::step_once(const PreparedData& data, const torch::Tensor& rows) {
  model_->train();
  const auto& g = model_->config();
  const auto B = rows.size(0);
  const auto noise = gen::seeded_normal({B, g.latent_channels, g.image_size / 4, g.image_size / 4},
                                        mix(cfg_.seed, static_cast<std::uint64_t>(step_)), torch::kFloat32);
  LossBreakdown lb;
  try {
    auto out = model_->forward(data, rows, noise);
    std::vector<const scene::SceneSample*> scenes;
    for (std::int64_t i = 0; i < B; ++i) scenes.push_back(&(*data.scenes)[rows[i].item<std::int64_t>()]);
    const double half_w = double(g.image_size) / 2.0;
    const auto targets = match_batch(out.body, scenes, g.max_instances, half_w);
    lb = reg_loss(out.body, targets, cfg_.weights, half_w);
    lb.align = dcfl::align_loss(out.dcfl.gen_hat.grid(), out.dcfl.vit_hat.grid(), out.camf.fused.grid());
    lb.total = total_loss(lb.align, lb.reg, cfg_.lambda_align);
  } catch (const DomainError& e) {
    throw TrainingError(std::string("non-finite model output: ") + e.what(), step_);
  }
  const double tot = lb.total.item<double>();
  if (!std::isfinite(tot)) {
    std::ostringstream os;
    os << "loss is not finite: L_total=" << tot << " L_align=" << lb.align.item<double>()
       << " L_reg=" << lb.reg.item<double>() << " (theta=" << lb.theta.item<double>()
       << " joints3d=" << lb.joints3d.item<double>() << " vertices=" << lb.vertices.item<double>()
       << " joints2d=" << lb.joints2d.item<double>() << " presence=" << lb.presence.item<double>() << ")";
    throw TrainingError(os.str(), step_);
  }
  opt_->zero_grad();
  lb.total.backward();
  for (auto& group : opt_->param_groups())
    static_cast<torch::optim::AdamWOptions&>(group.options()).lr(cfg_.lr_at(step_));
  opt_->step();
  ++step_;
  return lb;
}

std::vector<LogRecord> Trainer::train(const PreparedData& data, const PreparedData* val, std::ostream* log,
                                      const std::string& ckpt) {
  std::vector<LogRecord> records;
  if (model_->ablation().use_gen_pathway && !model_->gen->pretrained())
    throw StateError("train: the generative pathway needs a pretrained denoiser");
  while (step_ < cfg_.steps) {
    const auto lb = step_once(data, batch_rows(step_, data.size()));
    const bool at_end = step_ == cfg_.steps;
    if (step_ % cfg_.log_every == 0 || at_end) {
      LogRecord r{step_, lb.total.item<double>(), lb.align.item<double>(), lb.reg.item<double>(), std::nullopt};
      if (val && cfg_.eval_every > 0 && (step_ % cfg_.eval_every == 0 || at_end)) r.mpjpe_val = evaluate(*val).mpjpe;
      if (log) *log << r.to_json() << '\n' << std::flush;
      records.push_back(r);
    }
    if (!ckpt.empty() && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) save(ckpt);
  }
  if (!ckpt.empty()) save(ckpt);
  return records;
}

ModelOutput Trainer::infer(const PreparedData& data, std::int64_t begin, std::int64_t end) {
  const auto& g = model_->config();
  std::vector<torch::Tensor> noise;
  for (std::int64_t i = begin; i < end; ++i)
    noise.push_back(gen::seeded_normal({g.latent_channels, g.image_size / 4, g.image_size / 4},
                                       scene::sample_seed(mix(cfg_.seed, 0xE7A1), static_cast<std::uint64_t>(i)),
                                       torch::kFloat32));
  return model_->forward(data, torch::arange(begin, end, torch::kInt64), torch::stack(noise));
}

std::vector<metrics::ScenePrediction> Trainer::predict(const PreparedData& data) {
  const bool was_training = model_->is_training();
  model_->eval();
  torch::NoGradGuard ng;
  const auto K = model_->config().max_instances;
  std::vector<metrics::ScenePrediction> out;
  const std::int64_t chunk = 16;
  for (std::int64_t s = 0; s < data.size(); s += chunk) {
    const auto e = std::min(data.size(), s + chunk);
    auto o = infer(data, s, e);
    const auto pres = torch::sigmoid(o.body.presence_logit);
    for (std::int64_t b = 0; b < e - s; ++b)
      out.push_back({o.body.joints3d.narrow(0, b * K, K).clone(), o.body.vertices.narrow(0, b * K, K).clone(),
                     o.body.joints2d.narrow(0, b * K, K).clone(), pres[b].clone()});
  }
  if (was_training) model_->train();
  return out;
}

metrics::EvalReport Trainer::evaluate(const PreparedData& data, double threshold_px) {
  return metrics::evaluate(predict(data), *data.scenes, tpl_, threshold_px);
}

void Trainer::save(const std::string& path) const {
  auto& model = const_cast<SynergyModelImpl&>(*model_);
  io::Record header, weights, optim;
  header.put_text("kind", "checkpoint");
  header.put_int("step", step_);
  header.put_int("seed", static_cast<std::int64_t>(cfg_.seed));
  header.put_text("config", config::to_json(cfg_).dump());
  header.put("rng.torch", at::detail::getDefaultCPUGenerator().get_state());
  put_state(weights, model);
  torch::serialize::OutputArchive ar;
  opt_->save(ar);
  std::ostringstream os;
  ar.save_to(os);
  optim.put("optimizer", blob(os.str()));
  io::write_container(path, io::kCheckpointMagic, {header, weights, optim});
}

void Trainer::resume(const std::string& path) {
  const auto recs = io::read_container(path, io::kCheckpointMagic);
  if (recs.size() != 3 || !recs[0].has("kind") || recs[0].text("kind") != "checkpoint")
    throw FormatError("checkpoint: unexpected layout", 0);
  load_state(recs[1], *model_);
  std::istringstream is(unblob(recs[2].get("optimizer")));
  torch::serialize::InputArchive ar;
  ar.load_from(is);
  opt_->load(ar);
  step_ = recs[0].get_int("step");
  auto gen_state = at::detail::getDefaultCPUGenerator();
  gen_state.set_state(recs[0].get("rng.torch"));
  if (model_->gen->pretrained())
    for (auto& p : model_->gen->frozen_parameters()) p.set_requires_grad(false);
}

TrainConfig checkpoint_config(const std::string& path, std::int64_t* step) {
  const auto recs = io::read_container(path, io::kCheckpointMagic);
  if (recs.empty() || !recs[0].has("kind") || recs[0].text("kind") != "checkpoint")
    throw FormatError("checkpoint: unexpected layout", 0);
  if (step) *step = recs[0].get_int("step");
  return config::train_from_json(config::parse(recs[0].text("config"), "checkpoint config"));
}

void save_pathway(gen::GenerativePathway& g, const ModelConfig& cfg, const std::string& path,
                  const std::string& config_json) {
  io::Record header, weights;
  header.put_text("kind", "pathway");
  header.put_text("model", config::to_json(cfg).dump());
  header.put_text("config", config_json);
  put_state(weights, *g);
  io::write_container(path, io::kCheckpointMagic, {header, weights});
}

gen::GenerativePathway load_pathway(const std::string& path, ModelConfig* cfg_out) {
  const auto recs = io::read_container(path, io::kCheckpointMagic);
  if (recs.size() != 2 || !recs[0].has("kind") || recs[0].text("kind") != "pathway")
    throw FormatError("pathway checkpoint: unexpected layout", 0);
  const auto mc = config::model_from_json(config::parse(recs[0].text("model"), "pathway model config"));
  gen::GenerativePathway g(mc.generative());
  load_state(recs[1], *g);
  if (g->pretrained()) g->mark_pretrained();
  if (cfg_out) *cfg_out = mc;
  return g;
}

gen::GenerativePathway pretrain_pathway(const std::vector<scene::SceneSample>& scenes, const ModelConfig& cfg,
                                        const gen::PretrainOptions& opts,
                                        const std::function<void(std::int64_t, double)>& on_step) {
  torch::manual_seed(opts.seed);
  gen::GenerativePathway g(cfg.generative());
  const auto d = prepare(scenes, cfg);
  gen::pretrain_autoencoder(g, d.images, opts);
  gen::pretrain_denoiser(g, d.images, d.prompt_joints, d.prompt_conf, d.prompt_mask, opts, on_step);
  return g;
}

// ---------------------------------------------------------------------------

std::string AblationCell::label() const {
  std::string s = camf::to_string(fusion);
  s += std::string("|Me=") + (use_explicit_maps ? "w" : "w/o");
  s += std::string("|Mi=") + (use_implicit_maps ? "w" : "w/o");
  if (!use_gen_pathway) s += "|gen=off";
  if (lambda_align >= 0.0) {
    std::ostringstream os;
    os << "|lambda=" << lambda_align;
    s += os.str();
  }
  return s;
}

std::vector<AblationCell> default_grid() {
  using camf::FusionMode;
  return {{true, true, FusionMode::Cmf},  {true, false, FusionMode::Cmf}, {false, true, FusionMode::Cmf},
          {false, false, FusionMode::Cmf}, {true, true, FusionMode::Sum},  {true, true, FusionMode::Concat}};
}

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10) << "cell,fusion,use_Me,use_Mi,seed,mpjpe_mm,pa_mpjpe_mm,mpve_mm\n";
  for (const auto& r : rows)
    os << r.cell.label() << ',' << camf::to_string(r.cell.fusion) << ',' << (r.cell.use_explicit_maps ? "w" : "w/o")
       << ',' << (r.cell.use_implicit_maps ? "w" : "w/o") << ',' << r.seed << ',' << r.mpjpe << ',' << r.pa_mpjpe
       << ',' << r.mpve << '\n';
  return os.str();
}

std::string AblationResult::summary_csv() const {
  std::ostringstream os;
  os << std::setprecision(10) << "cell,fusion,use_Me,use_Mi,seeds,mean_mpjpe_mm,std_mpjpe_mm\n";
  for (const auto& s : summary)
    os << s.cell.label() << ',' << camf::to_string(s.cell.fusion) << ',' << (s.cell.use_explicit_maps ? "w" : "w/o")
       << ',' << (s.cell.use_implicit_maps ? "w" : "w/o") << ',' << s.per_seed.size() << ',' << s.mean << ','
       << s.stddev << '\n';
  return os.str();
}

const AblationSummary& AblationResult::find(const std::string& label) const {
  for (const auto& s : summary)
    if (s.cell.label() == label) return s;
  throw StateError("ablation: no cell labelled " + label);
}

AblationResult ablate(const TrainConfig& base, const std::vector<AblationCell>& cells,
                      const std::vector<std::uint64_t>& seeds, const PreparedData& train_data,
                      const PreparedData& test, gen::GenerativePathway& pretrained, const body::BodyTemplate& tpl,
                      const std::function<void(const AblationRow&)>& on_row) {
  if (cells.empty() || seeds.empty()) throw ConfigError("ablate: empty grid or seed list");
  AblationResult res;
  for (const auto& cell : cells) {
    AblationSummary sum;
    sum.cell = cell;
    for (auto seed : seeds) {
      auto cfg = base;
      cfg.seed = seed;
      cfg.ablation = Ablation{cell.use_explicit_maps, cell.use_implicit_maps, cell.fusion, cell.use_gen_pathway};
      if (cell.lambda_align >= 0.0) cfg.lambda_align = cell.lambda_align;
      Trainer t(cfg, tpl);
      if (cell.use_gen_pathway) t.set_denoiser(pretrained);
      t.train(train_data);
      const auto rep = t.evaluate(test);
      AblationRow row{cell, seed, rep.mpjpe, rep.pa_mpjpe, rep.mpve};
      if (on_row) on_row(row);
      res.rows.push_back(row);
      sum.per_seed.push_back(rep.mpjpe);
    }
    const double n = double(sum.per_seed.size());
    sum.mean = std::accumulate(sum.per_seed.begin(), sum.per_seed.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : sum.per_seed) ss += (v - sum.mean) * (v - sum.mean);
    sum.stddev = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    res.summary.push_back(sum);
  }
  return res;
}

}  // namespace synmesh::train
