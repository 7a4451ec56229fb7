#include "synmesh/gen_pathway.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "synmesh/errors.hpp"

namespace synmesh::gen {
namespace {

std::int64_t groups_for(std::int64_t channels) { return std::gcd<std::int64_t>(8, channels); }

torch::Tensor sinusoid(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, t.options()) / double(half));
  const auto args = t.unsqueeze(-1) * freqs;
  return torch::cat({torch::sin(args), torch::cos(args)}, -1);
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

torch::nn::Conv2d conv3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::Conv2d zero_conv(std::int64_t ch) {
  auto c = torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 1));
  torch::NoGradGuard ng;
  c->weight.zero_();
  c->bias.zero_();
  return c;
}

void check_finite_loss(double loss, std::int64_t step, const char* what) {
  if (!std::isfinite(loss)) throw TrainingError(std::string(what) + ": loss is not finite", step);
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(std::int64_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule: steps must be >= 1");
  if (beta_start < 0) beta_start = std::min(0.5, 1e-4 * 1000.0 / double(steps));
  if (beta_end < 0) beta_end = std::min(0.5, 2e-2 * 1000.0 / double(steps));
  NoiseSchedule s;
  s.steps = steps;
  double abar = 1.0;
  for (std::int64_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : double(i) / double(steps - 1);
    const double b = beta_start + f * (beta_end - beta_start);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    abar *= 1.0 - b;
    s.alpha_bars.push_back(abar);
  }
  s.validate();
  return s;
}

double NoiseSchedule::alpha_bar(std::int64_t t) const {
  if (t < 1 || t > steps) throw DomainError("schedule: timestep " + std::to_string(t) + " outside [1," + std::to_string(steps) + "]");
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::validate() const {
  if (static_cast<std::int64_t>(betas.size()) != steps) throw ConfigError("schedule: betas length != steps");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw ConfigError("schedule: betas must lie in (0,1)");
    if (!(alpha_bars[i] > 0.0 && alpha_bars[i] < 1.0)) throw ConfigError("schedule: alpha_bar must lie in (0,1)");
    if (i > 0 && !(alpha_bars[i] < alpha_bars[i - 1])) throw ConfigError("schedule: alpha_bar must decrease");
  }
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  const double abar = schedule.alpha_bar(t);
  if (z0.sizes() != eps.sizes()) throw ShapeError("forward_diffuse: eps must have the shape of z0");
  return std::sqrt(abar) * z0 + std::sqrt(1.0 - abar) * eps;
}

torch::Tensor seeded_normal(torch::IntArrayRef sizes, std::uint64_t seed, torch::ScalarType dtype) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(sizes, gen, torch::TensorOptions().dtype(torch::kFloat64)).to(dtype);
}

LatentAutoencoderImpl::LatentAutoencoderImpl(const AutoencoderOptions& o) {
  using namespace torch::nn;
  encoder = register_module(
      "encoder", Sequential(conv3(o.channels, o.hidden), SiLU(),
                            Conv2d(Conv2dOptions(o.hidden, o.hidden, 4).stride(2).padding(1)), SiLU(),
                            Conv2d(Conv2dOptions(o.hidden, o.hidden, 4).stride(2).padding(1)), SiLU(),
                            Conv2d(Conv2dOptions(o.hidden, o.latent_channels, 1))));
  decoder = register_module(
      "decoder", Sequential(Conv2d(Conv2dOptions(o.latent_channels, o.hidden, 1)), SiLU(),
                            ConvTranspose2d(ConvTranspose2dOptions(o.hidden, o.hidden, 4).stride(2).padding(1)), SiLU(),
                            ConvTranspose2d(ConvTranspose2dOptions(o.hidden, o.hidden, 4).stride(2).padding(1)), SiLU(),
                            conv3(o.hidden, o.channels), Sigmoid()));
  latent_scale = register_buffer("latent_scale", torch::ones({1}));
}

torch::Tensor LatentAutoencoderImpl::encode(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(2) % 4 != 0 || image.size(3) % 4 != 0)
    throw ShapeError("autoencoder: image must be [B,C,H,W] with H, W multiples of 4");
  return encoder->forward(image) * latent_scale;
}

torch::Tensor LatentAutoencoderImpl::decode(const torch::Tensor& z) { return decoder->forward(z / latent_scale); }

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim) {
  gn1 = register_module("gn1", torch::nn::GroupNorm(groups_for(in), in));
  conv1 = register_module("conv1", conv3(in, out));
  time = register_module("time", torch::nn::Linear(time_dim, out));
  gn2 = register_module("gn2", torch::nn::GroupNorm(groups_for(out), out));
  conv2 = register_module("conv2", conv3(out, out));
  if (in != out) skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(gn1(x)));
  h = h + time(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(gn2(h)));
  return (skip ? skip(x) : x) + h;
}

CrossAttentionBlockImpl::CrossAttentionBlockImpl(std::int64_t channels, std::int64_t d_prompt, std::int64_t heads) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  attn = register_module("attn", nn::MultiHeadAttention(nn::MultiHeadAttentionOptions{channels, heads, d_prompt}));
}

nn::AttentionOutput CrossAttentionBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& c_t,
                                                     const torch::Tensor& mask) {
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const auto tokens = x.flatten(2).transpose(1, 2);
  auto a = attn(norm(tokens), c_t, mask);
  auto out = (tokens + a.output).transpose(1, 2).reshape({B, C, H, W});
  return {out, a.weights};
}

UNetEncoderImpl::UNetEncoderImpl(std::int64_t in_channels, const UNetOptions& o) {
  conv_in = register_module("conv_in", conv3(in_channels, o.base));
  res1 = register_module("res1", ResBlock(o.base, o.base, o.time_dim));
  xattn1 = register_module("xattn1", CrossAttentionBlock(o.base, o.d_prompt, o.heads));
  down1 = register_module("down1", conv3(o.base, o.base, 2));
  res2 = register_module("res2", ResBlock(o.base, o.mid, o.time_dim));
  xattn2 = register_module("xattn2", CrossAttentionBlock(o.mid, o.d_prompt, o.heads));
  down2 = register_module("down2", conv3(o.mid, o.mid, 2));
  res_mid = register_module("res_mid", ResBlock(o.mid, o.mid, o.time_dim));
  xattn_mid = register_module("xattn_mid", CrossAttentionBlock(o.mid, o.d_prompt, o.heads));
}

EncoderFeatures UNetEncoderImpl::forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& c_t,
                                         const torch::Tensor& mask) {
  EncoderFeatures f;
  auto h = res1(conv_in(x), temb);
  f.skip1 = xattn1(h, c_t, mask).output;
  h = res2(down1(f.skip1), temb);
  f.skip2 = xattn2(h, c_t, mask).output;
  h = res_mid(down2(f.skip2), temb);
  f.mid = xattn_mid(h, c_t, mask).output;
  return f;
}

DenoiserUNetImpl::DenoiserUNetImpl(const UNetOptions& o) : opts_(o) {
  if (o.time_dim % 2 != 0) throw ConfigError("unet: time_dim must be even");
  time_mlp = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(o.time_dim, o.time_dim),
                                                               torch::nn::SiLU(),
                                                               torch::nn::Linear(o.time_dim, o.time_dim)));
  encoder = register_module("encoder", UNetEncoder(o.latent_channels, o));
  up1 = register_module("up1", conv3(o.mid, o.mid));
  res_up1 = register_module("res_up1", ResBlock(2 * o.mid, o.mid, o.time_dim));
  xattn_up1 = register_module("xattn_up1", CrossAttentionBlock(o.mid, o.d_prompt, o.heads));
  up2 = register_module("up2", conv3(o.mid, o.mid));
  res_up2 = register_module("res_up2", ResBlock(o.mid + o.base, o.base, o.time_dim));
  xattn_up2 = register_module("xattn_up2", CrossAttentionBlock(o.base, o.d_prompt, o.heads));
  out_norm = register_module("out_norm", torch::nn::GroupNorm(groups_for(o.base), o.base));
  out_conv = register_module("out_conv", conv3(o.base, o.latent_channels));
}

torch::Tensor DenoiserUNetImpl::embed_times(const torch::Tensor& t) {
  const auto dt = time_mlp->parameters()[0].scalar_type();
  return time_mlp->forward(sinusoid(t.to(dt), opts_.time_dim));
}

torch::Tensor DenoiserUNetImpl::time_embedding(std::int64_t t, std::int64_t batch, torch::ScalarType dtype) {
  auto tt = torch::full({batch}, double(t), torch::TensorOptions().dtype(dtype));
  return embed_times(tt);
}

DenoiserOutput DenoiserUNetImpl::forward(const torch::Tensor& z_t, std::int64_t t, const torch::Tensor& c_t,
                                         const torch::Tensor& mask, const ControlResiduals* control) {
  return forward_batch(z_t, time_embedding(t, z_t.size(0), z_t.scalar_type()), c_t, mask, control);
}

DenoiserOutput DenoiserUNetImpl::forward_batch(const torch::Tensor& z_t, const torch::Tensor& temb,
                                               const torch::Tensor& c_t, const torch::Tensor& mask,
                                               const ControlResiduals* control) {
  if (z_t.dim() != 4 || z_t.size(1) != opts_.latent_channels || z_t.size(2) % 4 != 0 || z_t.size(3) % 4 != 0)
    throw ShapeError("unet: latent must be [B,c_l,h,w] with h, w multiples of 4");
  auto enc = encoder(z_t, temb, c_t, mask);
  auto mid = enc.mid, skip2 = enc.skip2, skip1 = enc.skip1;
  if (control) {
    mid = mid + control->mid;
    skip2 = skip2 + control->skip2;
    skip1 = skip1 + control->skip1;
  }
  DenoiserOutput out;
  auto h = up1(upsample2(mid));
  h = res_up1(torch::cat({h, skip2}, 1), temb);
  auto a1 = xattn_up1(h, c_t, mask);
  out.attention.push_back(nn::AttentionMap{0, a1.weights, a1.output.size(2), a1.output.size(3)});
  h = up2(upsample2(a1.output));
  h = res_up2(torch::cat({h, skip1}, 1), temb);
  auto a2 = xattn_up2(h, c_t, mask);
  out.attention.push_back(nn::AttentionMap{1, a2.weights, a2.output.size(2), a2.output.size(3)});
  out.features = nn::FeatureMap::from_nchw(a2.output);
  out.eps_hat = out_conv(torch::silu(out_norm(a2.output)));
  return out;
}

ControlAdapterImpl::ControlAdapterImpl(std::int64_t cond_channels, const UNetOptions& o) {
  encoder = register_module("encoder", UNetEncoder(cond_channels, o));
  zero1 = register_module("zero1", zero_conv(o.base));
  zero2 = register_module("zero2", zero_conv(o.mid));
  zero_mid = register_module("zero_mid", zero_conv(o.mid));
}

void ControlAdapterImpl::init_from(const UNetEncoder& source) {
  torch::NoGradGuard ng;
  auto src = source->named_parameters();
  for (auto& p : encoder->named_parameters()) {
    if (p.key().rfind("conv_in", 0) == 0) continue;
    const auto* s = src.find(p.key());
    if (s && s->sizes() == p.value().sizes()) p.value().copy_(*s);
  }
  for (auto* z : {&zero1, &zero2, &zero_mid}) {
    (*z)->weight.zero_();
    (*z)->bias.zero_();
  }
}

ControlResiduals ControlAdapterImpl::forward(const torch::Tensor& c_j, const torch::Tensor& temb,
                                             const torch::Tensor& c_t, const torch::Tensor& mask) {
  auto f = encoder(c_j, temb, c_t, mask);
  return {zero1(f.skip1), zero2(f.skip2), zero_mid(f.mid)};
}

GenerativePathwayImpl::GenerativePathwayImpl(const GenerativeOptions& opts) : opts_(opts) {
  if (opts_.t_star == 0) opts_.t_star = std::max<std::int64_t>(1, opts_.steps / 5);
  schedule_ = NoiseSchedule::linear(opts_.steps);
  schedule_.alpha_bar(opts_.t_star);
  if (opts_.prompt.d_prompt != opts_.unet.d_prompt) throw ConfigError("generative: prompt width must match the U-Net");
  autoencoder = register_module("autoencoder", LatentAutoencoder(opts_.autoencoder));
  unet = register_module("unet", DenoiserUNet(opts_.unet));
  adapter = register_module("adapter", ControlAdapter(opts_.unet.latent_channels + opts_.joints, opts_.unet));
  prompt = register_module("prompt", cond::PromptLifter(opts_.prompt));
  pretrained_flag = register_buffer("pretrained_flag", torch::zeros({1}, torch::kInt64));
  reset_adapter();
}

void GenerativePathwayImpl::reset_adapter() { adapter->init_from(unet->encoder); }

torch::Tensor GenerativePathwayImpl::encode_latent(const torch::Tensor& image) { return autoencoder->encode(image); }

DenoiserOutput GenerativePathwayImpl::denoise_single_step(const torch::Tensor& z_t, const cond::ConditionSet& c) {
  if (!pretrained()) throw StateError("denoiser has not been pretrained");
  const auto temb = unet->time_embedding(opts_.t_star, z_t.size(0), z_t.scalar_type());
  const auto control = adapter(c.c_j, temb, c.c_t, c.c_t_mask);
  return unet->forward_batch(z_t, temb, c.c_t, c.c_t_mask, &control);
}

DenoiserOutput GenerativePathwayImpl::denoise_unconditioned(const torch::Tensor& z_t, const cond::ConditionSet& c) {
  if (!pretrained()) throw StateError("denoiser has not been pretrained");
  const auto temb = unet->time_embedding(opts_.t_star, z_t.size(0), z_t.scalar_type());
  return unet->forward_batch(z_t, temb, c.c_t, c.c_t_mask, nullptr);
}

void GenerativePathwayImpl::mark_pretrained() {
  pretrained_flag.fill_(1);
  for (auto& p : frozen_parameters()) p.set_requires_grad(false);
  reset_adapter();
}

std::vector<torch::Tensor> GenerativePathwayImpl::frozen_parameters() const {
  auto out = autoencoder->parameters();
  auto u = unet->parameters();
  out.insert(out.end(), u.begin(), u.end());
  return out;
}

std::vector<torch::Tensor> GenerativePathwayImpl::trainable_parameters() const {
  auto out = adapter->parameters();
  auto p = prompt->parameters();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

PretrainStats pretrain_autoencoder(GenerativePathway& g, const torch::Tensor& images, const PretrainOptions& o) {
  PretrainStats st;
  auto& ae = g->autoencoder;
  const auto N = images.size(0);
  if (N == 0) throw ConfigError("pretrain: empty image set");
  torch::manual_seed(o.seed);
  std::mt19937_64 rng(o.seed);
  std::uniform_int_distribution<std::int64_t> pick(0, N - 1);
  ae->latent_scale.fill_(1.0);
  torch::optim::Adam opt(ae->parameters(), torch::optim::AdamOptions(o.autoencoder_lr));
  for (std::int64_t step = 0; step < o.autoencoder_steps; ++step) {
    std::vector<std::int64_t> idx(std::min(o.batch_size, N));
    for (auto& i : idx) i = pick(rng);
    const auto x = images.index_select(0, torch::tensor(idx, torch::kInt64));
    auto loss = torch::mse_loss(ae->decode(ae->encode(x)), x);
    const double l = loss.item<double>();
    check_finite_loss(l, step, "autoencoder pretraining");
    st.losses.push_back(l);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  {
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> lat;
    for (std::int64_t i = 0; i < N; i += 32) lat.push_back(ae->encoder->forward(images.slice(0, i, std::min(N, i + 32))));
    const double sd = torch::cat(lat).std().item<double>();
    ae->latent_scale.fill_(sd > 1e-8 ? 1.0 / sd : 1.0);
  }
  if (!st.losses.empty()) {
    st.initial_loss = st.losses.front();
    const auto tail = std::max<std::size_t>(1, st.losses.size() / 10);
    st.final_loss = std::accumulate(st.losses.end() - tail, st.losses.end(), 0.0) / double(tail);
  }
  return st;
}

PretrainStats pretrain_denoiser(GenerativePathway& g, const torch::Tensor& images, const torch::Tensor& joints,
                                const torch::Tensor& conf, const torch::Tensor& mask, const PretrainOptions& o,
                                const std::function<void(std::int64_t, double)>& on_step) {
  PretrainStats st;
  const auto N = images.size(0);
  if (N == 0) throw ConfigError("pretrain: empty image set");
  const auto H = images.size(2), W = images.size(3);
  torch::manual_seed(o.seed + 1);
  std::mt19937_64 rng(o.seed + 1);
  std::uniform_int_distribution<std::int64_t> pick(0, N - 1);
  const auto& sched = g->schedule();
  std::uniform_int_distribution<std::int64_t> pick_t(1, sched.steps);

  torch::Tensor z0_all;
  {
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> lat;
    for (std::int64_t i = 0; i < N; i += 32) lat.push_back(g->encode_latent(images.slice(0, i, std::min(N, i + 32))));
    z0_all = torch::cat(lat);
  }
  auto params = g->unet->parameters();
  auto pp = g->prompt->parameters();
  params.insert(params.end(), pp.begin(), pp.end());
  torch::optim::Adam opt(params, torch::optim::AdamOptions(o.denoiser_lr));
  const auto sqrt_abar = torch::tensor(sched.alpha_bars, torch::kFloat64).sqrt();
  const auto sqrt_1m = (1.0 - torch::tensor(sched.alpha_bars, torch::kFloat64)).sqrt();

  for (std::int64_t step = 0; step < o.denoiser_steps; ++step) {
    std::vector<std::int64_t> idx(std::min(o.batch_size, N)), ts(idx.size());
    for (auto& i : idx) i = pick(rng);
    for (auto& t : ts) t = pick_t(rng);
    const auto it = torch::tensor(idx, torch::kInt64);
    const auto tt = torch::tensor(ts, torch::kInt64);
    const auto z0 = z0_all.index_select(0, it);
    const auto eps = torch::randn_like(z0);
    const auto a = sqrt_abar.index_select(0, tt - 1).to(z0.scalar_type()).view({-1, 1, 1, 1});
    const auto b = sqrt_1m.index_select(0, tt - 1).to(z0.scalar_type()).view({-1, 1, 1, 1});
    const auto z_t = a * z0 + b * eps;
    const auto m = mask.index_select(0, it);
    const auto c_t = g->prompt(joints.index_select(0, it), conf.index_select(0, it), m, H, W);
    const auto temb = g->unet->embed_times(tt);
    auto pred = g->unet->forward_batch(z_t, temb, c_t, m, nullptr).eps_hat;
    auto loss = torch::mse_loss(pred, eps);
    const double l = loss.item<double>();
    check_finite_loss(l, step, "denoiser pretraining");
    st.losses.push_back(l);
    if (on_step) on_step(step, l);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  if (!st.losses.empty()) {
    st.initial_loss = st.losses.front();
    const auto tail = std::max<std::size_t>(1, st.losses.size() / 10);
    st.final_loss = std::accumulate(st.losses.end() - tail, st.losses.end(), 0.0) / double(tail);
  }
  g->mark_pretrained();
  return st;
}

std::pair<double, double> reconstruction_error(GenerativePathway& g, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  double se = 0.0;
  const auto N = images.size(0);
  for (std::int64_t i = 0; i < N; i += 32) {
    const auto x = images.slice(0, i, std::min(N, i + 32));
    se += (g->autoencoder->decode(g->autoencoder->encode(x)) - x).square().sum().item<double>();
  }
  const double mse = se / double(images.numel());
  const double var = images.to(torch::kFloat64).var().item<double>();
  return {mse, var};
}

}  // namespace synmesh::gen
