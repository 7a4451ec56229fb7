#include <gtest/gtest.h>

#include <cmath>

#include "synmesh/errors.hpp"
#include "synmesh/gen_pathway.hpp"
#include "synmesh/nn.hpp"

using namespace synmesh;
using namespace synmesh::gen;

namespace {

GenerativeOptions small_options() {
  GenerativeOptions o;
  o.autoencoder.hidden = 8;
  o.unet.base = 8;
  o.unet.mid = 16;
  o.unet.time_dim = 16;
  o.unet.d_prompt = 16;
  o.unet.heads = 2;
  o.prompt.hidden = 16;
  o.prompt.d_prompt = 16;
  o.joints = 5;
  return o;
}

cond::ConditionSet random_condition(std::int64_t B, const GenerativeOptions& o, torch::ScalarType dt) {
  cond::ConditionSet c;
  c.c_j = torch::randn({B, o.unet.latent_channels + o.joints, 16, 16}, dt);
  c.c_t = torch::randn({B, 6, o.unet.d_prompt}, dt);
  c.c_t_mask = torch::ones({B, 6}, torch::kBool);
  return c;
}

}  // namespace

TEST(Schedule, AlphaBarIsProductOfAlphas) {
  const auto s = NoiseSchedule::linear(100);
  EXPECT_NO_THROW(s.validate());
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-3);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.2);
  double prod = 1.0;
  for (std::int64_t t = 1; t <= 100; ++t) {
    prod *= 1.0 - s.betas[t - 1];
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-15);
  }
  EXPECT_THROW(s.alpha_bar(0), DomainError);
  EXPECT_THROW(s.alpha_bar(101), DomainError);
  EXPECT_THROW(NoiseSchedule::linear(0), ConfigError);
}

TEST(Schedule, ThousandStepsUsesStandardRange) {
  const auto s = NoiseSchedule::linear(1000);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas.back(), 2e-2);
}

TEST(ForwardDiffuse, ZeroNoiseScalesLatent) {
  const auto s = NoiseSchedule::linear(100);
  const auto z0 = torch::randn({2, 4, 3, 3}, torch::kFloat64);
  const auto zt = forward_diffuse(z0, 30, torch::zeros_like(z0), s);
  EXPECT_TRUE(torch::allclose(zt, z0 * std::sqrt(s.alpha_bar(30)), 0, 1e-15));
  EXPECT_THROW(forward_diffuse(z0, 30, torch::zeros({3}), s), ShapeError);
}

TEST(ForwardDiffuse, TinyFirstBetaKeepsLatent) {
  const auto s = NoiseSchedule::linear(10, 1e-9, 1e-2);
  const auto z0 = torch::randn({10}, torch::kFloat64);
  const auto zt = forward_diffuse(z0, 1, torch::randn({10}, torch::kFloat64), s);
  EXPECT_LT((zt - z0).abs().max().item<double>(), 1e-3);
}

TEST(ForwardDiffuse, VarianceFromZeroLatent) {
  const auto s = NoiseSchedule::linear(100);
  const auto z0 = torch::zeros({10000}, torch::kFloat64);
  const auto zt = forward_diffuse(z0, 50, seeded_normal({10000}, 3, torch::kFloat64), s);
  const double var = zt.var().item<double>();
  EXPECT_NEAR(var / (1.0 - s.alpha_bar(50)), 1.0, 0.05);
}

TEST(SeededNormal, Deterministic) {
  EXPECT_TRUE(torch::equal(seeded_normal({4, 4}, 9, torch::kFloat32), seeded_normal({4, 4}, 9, torch::kFloat32)));
  EXPECT_FALSE(torch::equal(seeded_normal({4, 4}, 9, torch::kFloat32), seeded_normal({4, 4}, 10, torch::kFloat32)));
}

TEST(Autoencoder, ShapesAndZeroInput) {
  LatentAutoencoder ae;
  const auto z = ae->encode(torch::rand({2, 3, 64, 64}));
  EXPECT_EQ(z.sizes(), (torch::IntArrayRef{2, 4, 16, 16}));
  EXPECT_EQ(ae->decode(z).sizes(), (torch::IntArrayRef{2, 3, 64, 64}));
  {
    torch::NoGradGuard ng;
    for (auto& p : ae->encoder->named_parameters())
      if (p.key().find("bias") != std::string::npos) p.value().zero_();
  }
  EXPECT_EQ(ae->encode(torch::zeros({1, 3, 64, 64})).abs().max().item<double>(), 0.0);
}

TEST(Pathway, RequiresPretraining) {
  const auto o = small_options();
  GenerativePathway g(o);
  const auto c = random_condition(1, o, torch::kFloat32);
  EXPECT_THROW(g->denoise_single_step(torch::randn({1, 4, 16, 16}), c), StateError);
}

TEST(Pathway, FreshAdapterIsExactIdentity) {
  torch::manual_seed(4);
  const auto o = small_options();
  GenerativePathway g(o);
  g->to(torch::kFloat64);
  g->mark_pretrained();
  for (int i = 0; i < 3; ++i) {
    const auto c = random_condition(2, o, torch::kFloat64);
    const auto z = torch::randn({2, 4, 16, 16}, torch::kFloat64);
    const auto a = g->denoise_single_step(z, c);
    const auto b = g->denoise_unconditioned(z, c);
    EXPECT_TRUE(torch::equal(a.eps_hat, b.eps_hat));
    EXPECT_TRUE(torch::equal(a.features.tokens, b.features.tokens));
  }
}

TEST(Pathway, OutputShapesAndStochasticMaps) {
  const auto o = small_options();
  GenerativePathway g(o);
  g->mark_pretrained();
  const auto c = random_condition(2, o, torch::kFloat32);
  const auto r = g->denoise_single_step(torch::randn({2, 4, 16, 16}), c);
  EXPECT_EQ(r.eps_hat.sizes(), (torch::IntArrayRef{2, 4, 16, 16}));
  EXPECT_EQ(r.features.h, 16);
  EXPECT_EQ(r.features.tokens.sizes(), (torch::IntArrayRef{2, 256, o.unet.base}));
  ASSERT_FALSE(r.attention.empty());
  for (const auto& m : r.attention) EXPECT_LT((m.weights.sum(-1) - 1).abs().max().item<double>(), 1e-5);
}

TEST(Pathway, AdapterCopiesEncoderButInputConv) {
  const auto o = small_options();
  GenerativePathway g(o);
  const auto src = g->unet->encoder->named_parameters();
  for (const auto& p : g->adapter->encoder->named_parameters()) {
    if (p.key().rfind("conv_in", 0) == 0) continue;
    EXPECT_TRUE(torch::equal(p.value(), src[p.key()])) << p.key();
  }
  EXPECT_EQ(g->adapter->zero1->weight.abs().max().item<double>(), 0.0);
  EXPECT_EQ(g->adapter->zero_mid->bias.abs().max().item<double>(), 0.0);
}

TEST(Pathway, OneAdapterStepMakesFeaturesConditionSensitive) {
  torch::manual_seed(5);
  const auto o = small_options();
  GenerativePathway g(o);
  g->mark_pretrained();
  auto c = random_condition(1, o, torch::kFloat32);
  const auto z = torch::randn({1, 4, 16, 16});
  torch::optim::SGD opt(g->trainable_parameters(), torch::optim::SGDOptions(0.1));
  g->denoise_single_step(z, c).features.tokens.pow(2).mean().backward();
  opt.step();
  torch::NoGradGuard ng;
  const auto a = g->denoise_single_step(z, c).features.tokens;
  c.c_j = c.c_j + torch::randn_like(c.c_j);
  const auto b = g->denoise_single_step(z, c).features.tokens;
  EXPECT_GT((a - b).norm().item<double>(), 0.0);
}

TEST(Pathway, MarkPretrainedFreezesCore) {
  GenerativePathway g(small_options());
  g->mark_pretrained();
  EXPECT_TRUE(g->pretrained());
  for (const auto& p : g->frozen_parameters()) EXPECT_FALSE(p.requires_grad());
  for (const auto& p : g->trainable_parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Pretrain, ZeroStepsChangeNothingAndSeedsReproduce) {
  auto o = small_options();
  torch::manual_seed(1);
  const auto images = torch::rand({6, 3, 64, 64});
  const auto pj = torch::rand({6, 5, 2}) * 64;
  const auto pc = torch::rand({6, 5});
  const auto pm = torch::ones({6, 5}, torch::kBool);
  PretrainOptions po;
  po.autoencoder_steps = 0;
  po.denoiser_steps = 0;
  GenerativePathway g(o);
  const auto before = nn::tensor_hash(g->unet->parameters());
  pretrain_denoiser(g, images, pj, pc, pm, po);
  EXPECT_EQ(before, nn::tensor_hash(g->unet->parameters()));

  po.autoencoder_steps = 3;
  po.denoiser_steps = 3;
  po.batch_size = 2;
  auto run = [&] {
    torch::manual_seed(77);
    GenerativePathway h(o);
    pretrain_autoencoder(h, images, po);
    pretrain_denoiser(h, images, pj, pc, pm, po);
    return nn::tensor_hash(h->parameters());
  };
  EXPECT_EQ(run(), run());
}
