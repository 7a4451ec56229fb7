#include "synmesh/config.hpp"

#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include "synmesh/errors.hpp"

namespace synmesh::config {
namespace {

// Reads the members of one JSON object, refusing keys nobody asked for.
class Reader {
public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }
  const Json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return where_ + "." + key; }

private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Json dims_json(const body::BodyDims& d) {
  return {{"vertices", d.vertices}, {"joints", d.joints}, {"shape", d.shape}, {"expression", d.expression}};
}

}  // namespace

Json to_json(const scene::SceneConfig& c) {
  Json kinds = Json::array();
  for (auto k : c.occlusion_kinds) kinds.push_back(scene::to_string(k));
  Json j{{"height", c.height},
         {"width", c.width},
         {"channels", c.channels},
         {"min_instances", c.min_instances},
         {"max_instances", c.max_instances},
         {"instance_limit", c.instance_limit},
         {"occlusion_prob", c.occlusion_prob},
         {"occlusion_kinds", kinds},
         {"pose_scale", c.pose_scale},
         {"yaw_scale", c.yaw_scale},
         {"detection_noise_px", c.detection_noise_px},
         {"splat_sigma_px", c.splat_sigma_px},
         {"overlap_iou", c.overlap_iou},
         {"depth_min", c.depth_min},
         {"depth_max", c.depth_max},
         {"focal_scale", c.focal_scale}};
  return j;
}

scene::SceneConfig scene_from_json(const Json& j, scene::SceneConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("channels", c.channels);
  r.get("min_instances", c.min_instances);
  r.get("max_instances", c.max_instances);
  r.get("instance_limit", c.instance_limit);
  r.get("occlusion_prob", c.occlusion_prob);
  std::vector<std::string> kinds;
  r.get("occlusion_kinds", kinds);
  if (j.contains("occlusion_kinds")) {
    c.occlusion_kinds.clear();
    for (const auto& k : kinds) c.occlusion_kinds.push_back(scene::occlusion_kind_from_string(k));
  }
  r.get("pose_scale", c.pose_scale);
  r.get("yaw_scale", c.yaw_scale);
  r.get("detection_noise_px", c.detection_noise_px);
  r.get("splat_sigma_px", c.splat_sigma_px);
  r.get("overlap_iou", c.overlap_iou);
  r.get("depth_min", c.depth_min);
  r.get("depth_max", c.depth_max);
  r.get("focal_scale", c.focal_scale);
  c.validate();
  return c;
}

Json to_json(const gen::PretrainOptions& c) {
  return {{"autoencoder_steps", c.autoencoder_steps}, {"denoiser_steps", c.denoiser_steps},
          {"batch_size", c.batch_size},               {"autoencoder_lr", c.autoencoder_lr},
          {"denoiser_lr", c.denoiser_lr},             {"seed", c.seed}};
}

gen::PretrainOptions pretrain_from_json(const Json& j, gen::PretrainOptions c, const std::string& where) {
  Reader r(j, where);
  r.get("autoencoder_steps", c.autoencoder_steps);
  r.get("denoiser_steps", c.denoiser_steps);
  r.get("batch_size", c.batch_size);
  r.get("autoencoder_lr", c.autoencoder_lr);
  r.get("denoiser_lr", c.denoiser_lr);
  r.get("seed", c.seed);
  if (c.autoencoder_steps < 0 || c.denoiser_steps < 0) throw ConfigError(where + ": steps must be >= 0");
  if (c.batch_size < 1) throw ConfigError(where + ".batch_size: must be >= 1");
  if (!(c.autoencoder_lr > 0) || !(c.denoiser_lr > 0)) throw ConfigError(where + ": learning rates must be > 0");
  return c;
}

Json to_json(const train::ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"channels", c.channels},
          {"body", dims_json(c.body)},
          {"template_seed", c.template_seed},
          {"patch", c.patch},
          {"vit_dim", c.vit_dim},
          {"vit_heads", c.vit_heads},
          {"vit_blocks", c.vit_blocks},
          {"latent_channels", c.latent_channels},
          {"ae_hidden", c.ae_hidden},
          {"unet_base", c.unet_base},
          {"unet_mid", c.unet_mid},
          {"d_prompt", c.d_prompt},
          {"diffusion_steps", c.diffusion_steps},
          {"t_star", c.t_star},
          {"dim", c.dim},
          {"dictionary_entries", c.dictionary_entries},
          {"guidance_tokens", c.guidance_tokens},
          {"fuse_levels", c.fuse_levels},
          {"cau_blocks", c.cau_blocks},
          {"head_blocks", c.head_blocks},
          {"max_instances", c.max_instances},
          {"heatmap_sigma", c.heatmap_sigma},
          {"mask_margin", c.mask_margin}};
}

train::ModelConfig model_from_json(const Json& j, train::ModelConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("image_size", c.image_size);
  r.get("channels", c.channels);
  if (const auto* b = r.sub("body")) {
    Reader rb(*b, r.path("body"));
    rb.get("vertices", c.body.vertices);
    rb.get("joints", c.body.joints);
    rb.get("shape", c.body.shape);
    rb.get("expression", c.body.expression);
  }
  r.get("template_seed", c.template_seed);
  r.get("patch", c.patch);
  r.get("vit_dim", c.vit_dim);
  r.get("vit_heads", c.vit_heads);
  r.get("vit_blocks", c.vit_blocks);
  r.get("latent_channels", c.latent_channels);
  r.get("ae_hidden", c.ae_hidden);
  r.get("unet_base", c.unet_base);
  r.get("unet_mid", c.unet_mid);
  r.get("d_prompt", c.d_prompt);
  r.get("diffusion_steps", c.diffusion_steps);
  r.get("t_star", c.t_star);
  r.get("dim", c.dim);
  r.get("dictionary_entries", c.dictionary_entries);
  r.get("guidance_tokens", c.guidance_tokens);
  r.get("fuse_levels", c.fuse_levels);
  r.get("cau_blocks", c.cau_blocks);
  r.get("head_blocks", c.head_blocks);
  r.get("max_instances", c.max_instances);
  r.get("heatmap_sigma", c.heatmap_sigma);
  r.get("mask_margin", c.mask_margin);
  c.validate();
  return c;
}

Json to_json(const train::TrainConfig& c) {
  const auto& w = c.weights;
  const auto& a = c.ablation;
  return {{"lambda_align", c.lambda_align},
          {"lr", c.lr},
          {"lr_final", c.lr_final},
          {"decay_fraction", c.decay_fraction},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"ablation",
           {{"use_Me", a.use_explicit_maps},
            {"use_Mi", a.use_implicit_maps},
            {"fusion_mode", camf::to_string(a.fusion)},
            {"use_gen_pathway", a.use_gen_pathway}}},
          {"loss_weights",
           {{"theta", w.theta},
            {"beta", w.beta},
            {"alpha", w.alpha},
            {"joints3d", w.joints3d},
            {"vertices", w.vertices},
            {"joints2d", w.joints2d},
            {"presence", w.presence}}},
          {"model", to_json(c.model)}};
}

train::TrainConfig train_from_json(const Json& j, train::TrainConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("lambda_align", c.lambda_align);
  r.get("lr", c.lr);
  r.get("lr_final", c.lr_final);
  r.get("decay_fraction", c.decay_fraction);
  r.get("weight_decay", c.weight_decay);
  r.get("batch_size", c.batch_size);
  r.get("steps", c.steps);
  r.get("seed", c.seed);
  r.get("log_every", c.log_every);
  r.get("eval_every", c.eval_every);
  r.get("checkpoint_every", c.checkpoint_every);
  if (const auto* a = r.sub("ablation")) {
    Reader ra(*a, r.path("ablation"));
    ra.get("use_Me", c.ablation.use_explicit_maps);
    ra.get("use_Mi", c.ablation.use_implicit_maps);
    std::string mode = camf::to_string(c.ablation.fusion);
    ra.get("fusion_mode", mode);
    c.ablation.fusion = camf::fusion_mode_from_string(mode);
    ra.get("use_gen_pathway", c.ablation.use_gen_pathway);
  }
  if (const auto* w = r.sub("loss_weights")) {
    Reader rw(*w, r.path("loss_weights"));
    rw.get("theta", c.weights.theta);
    rw.get("beta", c.weights.beta);
    rw.get("alpha", c.weights.alpha);
    rw.get("joints3d", c.weights.joints3d);
    rw.get("vertices", c.weights.vertices);
    rw.get("joints2d", c.weights.joints2d);
    rw.get("presence", c.weights.presence);
  }
  if (const auto* m = r.sub("model")) c.model = model_from_json(*m, c.model, r.path("model"));
  c.validate();
  return c;
}

Json parse(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

Json load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

}  // namespace synmesh::config
