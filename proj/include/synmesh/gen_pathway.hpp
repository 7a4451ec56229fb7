#pragma once

// Generative pathway: latent autoencoder, DDPM forward process, and a small
// cross-attention U-Net run once at a fixed timestep. A trainable copy of the
// U-Net encoder consumes the dense condition and feeds the decoder through
// zero-initialised 1x1 convolutions; the U-Net itself stays frozen after
// pretraining.

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "synmesh/conditioning.hpp"
#include "synmesh/nn.hpp"

namespace synmesh::gen {

struct NoiseSchedule {
  std::int64_t steps = 100;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;  // alpha_bars[t-1] = prod_{s<=t} alphas[s-1]

  // Linear betas; defaults rescale the usual 1e-4..2e-2 range to `steps`.
  static NoiseSchedule linear(std::int64_t steps, double beta_start = -1.0, double beta_end = -1.0);
  double alpha_bar(std::int64_t t) const;  // 1 <= t <= steps
  void validate() const;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
torch::Tensor forward_diffuse(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

struct AutoencoderOptions {
  std::int64_t channels = 3;
  std::int64_t latent_channels = 4;
  std::int64_t hidden = 32;
};

// x4 spatial compression.
class LatentAutoencoderImpl : public torch::nn::Module {
public:
  explicit LatentAutoencoderImpl(const AutoencoderOptions& opts = {});
  torch::Tensor encode(const torch::Tensor& image);  // [B,C,H,W] -> [B,c_l,H/4,W/4], scaled
  torch::Tensor decode(const torch::Tensor& z);

  torch::nn::Sequential encoder{nullptr}, decoder{nullptr};
  torch::Tensor latent_scale;  // buffer; fitted so latents have unit variance
};
TORCH_MODULE(LatentAutoencoder);

struct UNetOptions {
  std::int64_t latent_channels = 4;
  std::int64_t base = 32;
  std::int64_t mid = 64;
  std::int64_t time_dim = 64;
  std::int64_t d_prompt = 64;
  std::int64_t heads = 4;
};

class ResBlockImpl : public torch::nn::Module {
public:
  ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm gn1{nullptr}, gn2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time{nullptr};
};
TORCH_MODULE(ResBlock);

// Spatial tokens attend to the prompt tokens.
class CrossAttentionBlockImpl : public torch::nn::Module {
public:
  CrossAttentionBlockImpl(std::int64_t channels, std::int64_t d_prompt, std::int64_t heads);
  nn::AttentionOutput forward(const torch::Tensor& x, const torch::Tensor& c_t, const torch::Tensor& mask);

  torch::nn::LayerNorm norm{nullptr};
  nn::MultiHeadAttention attn{nullptr};
};
TORCH_MODULE(CrossAttentionBlock);

struct EncoderFeatures {
  torch::Tensor skip1;  // [B,base,h,w]
  torch::Tensor skip2;  // [B,mid,h/2,w/2]
  torch::Tensor mid;    // [B,mid,h/4,w/4]
};

class UNetEncoderImpl : public torch::nn::Module {
public:
  UNetEncoderImpl(std::int64_t in_channels, const UNetOptions& opts);
  EncoderFeatures forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& c_t,
                          const torch::Tensor& mask);

  torch::nn::Conv2d conv_in{nullptr}, down1{nullptr}, down2{nullptr};
  ResBlock res1{nullptr}, res2{nullptr}, res_mid{nullptr};
  CrossAttentionBlock xattn1{nullptr}, xattn2{nullptr}, xattn_mid{nullptr};
};
TORCH_MODULE(UNetEncoder);

struct DenoiserOutput {
  torch::Tensor eps_hat;                   // latent-shaped
  nn::FeatureMap features;                 // F_p: final decoder feature, pre output projection
  std::vector<nn::AttentionMap> attention; // M_i: decoder cross-attention
};

// Additive residuals from the adapter, one per injection point.
struct ControlResiduals {
  torch::Tensor skip1, skip2, mid;
};

class DenoiserUNetImpl : public torch::nn::Module {
public:
  explicit DenoiserUNetImpl(const UNetOptions& opts = {});

  torch::Tensor time_embedding(std::int64_t t, std::int64_t batch, torch::ScalarType dtype);
  DenoiserOutput forward(const torch::Tensor& z_t, std::int64_t t, const torch::Tensor& c_t,
                         const torch::Tensor& mask = {}, const ControlResiduals* control = nullptr);
  // Same network with a per-sample timestep (pretraining).
  DenoiserOutput forward_batch(const torch::Tensor& z_t, const torch::Tensor& temb, const torch::Tensor& c_t,
                               const torch::Tensor& mask, const ControlResiduals* control);
  torch::Tensor embed_times(const torch::Tensor& t);  // t [B] integer steps -> [B,time_dim]

  const UNetOptions& options() const { return opts_; }

  torch::nn::Sequential time_mlp{nullptr};
  UNetEncoder encoder{nullptr};
  torch::nn::Conv2d up1{nullptr}, up2{nullptr};
  ResBlock res_up1{nullptr}, res_up2{nullptr};
  CrossAttentionBlock xattn_up1{nullptr}, xattn_up2{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
  torch::nn::Conv2d out_conv{nullptr};

private:
  UNetOptions opts_;
};
TORCH_MODULE(DenoiserUNet);

class ControlAdapterImpl : public torch::nn::Module {
public:
  ControlAdapterImpl(std::int64_t cond_channels, const UNetOptions& opts);

  // Copy every encoder weight except the input convolution, whose channel
  // count differs.
  void init_from(const UNetEncoder& source);
  ControlResiduals forward(const torch::Tensor& c_j, const torch::Tensor& temb, const torch::Tensor& c_t,
                           const torch::Tensor& mask);

  UNetEncoder encoder{nullptr};
  torch::nn::Conv2d zero1{nullptr}, zero2{nullptr}, zero_mid{nullptr};
};
TORCH_MODULE(ControlAdapter);

struct GenerativeOptions {
  AutoencoderOptions autoencoder;
  UNetOptions unet;
  cond::PromptOptions prompt;
  std::int64_t joints = 24;   // heatmap channels in c_j
  std::int64_t steps = 100;   // T_steps
  std::int64_t t_star = 0;    // 0: steps / 5
};

class GenerativePathwayImpl : public torch::nn::Module {
public:
  explicit GenerativePathwayImpl(const GenerativeOptions& opts = {});

  torch::Tensor encode_latent(const torch::Tensor& image);
  DenoiserOutput denoise_single_step(const torch::Tensor& z_t, const cond::ConditionSet& cond);
  // Frozen U-Net without the adapter.
  DenoiserOutput denoise_unconditioned(const torch::Tensor& z_t, const cond::ConditionSet& cond);

  void mark_pretrained();
  bool pretrained() const { return pretrained_flag.item<std::int64_t>() != 0; }
  // Autoencoder and U-Net parameters; immutable once pretrained.
  std::vector<torch::Tensor> frozen_parameters() const;
  std::vector<torch::Tensor> trainable_parameters() const;
  void reset_adapter();

  const GenerativeOptions& options() const { return opts_; }
  std::int64_t t_star() const { return opts_.t_star; }
  const NoiseSchedule& schedule() const { return schedule_; }

  LatentAutoencoder autoencoder{nullptr};
  DenoiserUNet unet{nullptr};
  ControlAdapter adapter{nullptr};
  cond::PromptLifter prompt{nullptr};
  torch::Tensor pretrained_flag;  // buffer so checkpoints carry it

private:
  GenerativeOptions opts_;
  NoiseSchedule schedule_;
};
TORCH_MODULE(GenerativePathway);

struct PretrainStats {
  std::vector<double> losses;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // mean over the last 10% of steps
};

struct PretrainOptions {
  std::int64_t autoencoder_steps = 600;
  std::int64_t denoiser_steps = 800;
  std::int64_t batch_size = 8;
  double autoencoder_lr = 2e-3;
  double denoiser_lr = 1e-3;
  std::uint64_t seed = 0;
};

// Reconstruction pretraining; also fits latent_scale. images [N,C,H,W].
PretrainStats pretrain_autoencoder(GenerativePathway& pathway, const torch::Tensor& images,
                                   const PretrainOptions& opts);

// Noise-prediction pretraining of the U-Net and prompt lifter with prompts
// from ground-truth joints; marks the pathway pretrained and freezes the core.
// prompt_joints [N,T,2], prompt_conf [N,T], prompt_mask [N,T].
PretrainStats pretrain_denoiser(GenerativePathway& pathway, const torch::Tensor& images,
                                const torch::Tensor& prompt_joints, const torch::Tensor& prompt_conf,
                                const torch::Tensor& prompt_mask, const PretrainOptions& opts,
                                const std::function<void(std::int64_t, double)>& on_step = {});

// Mean squared reconstruction error and pixel variance over images.
std::pair<double, double> reconstruction_error(GenerativePathway& pathway, const torch::Tensor& images);

// Deterministic N(0,1) noise from a seed.
torch::Tensor seeded_normal(torch::IntArrayRef sizes, std::uint64_t seed, torch::ScalarType dtype);

}  // namespace synmesh::gen
