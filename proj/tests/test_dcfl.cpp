#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "synmesh/dcfl.hpp"
#include "synmesh/errors.hpp"

using namespace synmesh;
using namespace synmesh::dcfl;

namespace {

// Correlation written as nested loops over an [h, w, c] tensor.
double fcc_loop(const torch::Tensor& x, const torch::Tensor& y) {
  const auto H = x.size(0), W = x.size(1), C = x.size(2);
  const auto a = x.accessor<double, 3>();
  const auto b = y.accessor<double, 3>();
  double num = 0.0, sx = 0.0, sy = 0.0;
  for (std::int64_t c = 0; c < C; ++c) {
    double mx = 0.0, my = 0.0;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        mx += a[i][j][c];
        my += b[i][j][c];
      }
    mx /= double(H * W);
    my /= double(H * W);
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        const double u = a[i][j][c] - mx, v = b[i][j][c] - my;
        num += u * v;
        sx += u * u;
        sy += v * v;
      }
  }
  return num / std::sqrt(sx * sy);
}

}  // namespace

TEST(Fcc, SelfAndNegation) {
  const auto x = torch::randn({4, 5, 3}, torch::kFloat64);
  EXPECT_NEAR(fcc_value(x, x), 1.0, 1e-12);
  EXPECT_NEAR(fcc_value(x, -x), -1.0, 1e-12);
}

TEST(Fcc, HandExample) {
  const auto x = torch::tensor({1.0, 2.0, 3.0, 4.0}, torch::kFloat64).reshape({2, 2, 1});
  const auto y = torch::tensor({4.0, 3.0, 2.0, 1.0}, torch::kFloat64).reshape({2, 2, 1});
  EXPECT_NEAR(fcc_value(x, y), -1.0, 1e-12);
}

TEST(Fcc, MatchesLoopOracle) {
  torch::manual_seed(3);
  for (int i = 0; i < 20; ++i) {
    const auto x = torch::randn({2, 2, 2}, torch::kFloat64);
    const auto y = torch::randn({2, 2, 2}, torch::kFloat64);
    EXPECT_NEAR(fcc_value(x, y), fcc_loop(x, y), 1e-10);
  }
  const auto x = torch::randn({5, 3, 7}, torch::kFloat64);
  const auto y = torch::randn({5, 3, 7}, torch::kFloat64);
  EXPECT_NEAR(fcc_value(x, y), fcc_loop(x, y), 1e-10);
}

TEST(Fcc, BatchDimensionsGiveOneValueEach) {
  const auto x = torch::randn({3, 4, 4, 2}, torch::kFloat64);
  const auto y = torch::randn({3, 4, 4, 2}, torch::kFloat64);
  const auto r = fcc(x, y);
  ASSERT_EQ(r.sizes(), (torch::IntArrayRef{3}));
  for (int b = 0; b < 3; ++b) EXPECT_NEAR(r[b].item<double>(), fcc_loop(x[b], y[b]), 1e-12);
}

TEST(Fcc, ChannelConstantInputIsDegenerate) {
  auto x = torch::ones({3, 3, 2}, torch::kFloat64);
  x.select(2, 1).fill_(5.0);
  bool deg = false;
  EXPECT_EQ(fcc_value(x, torch::randn({3, 3, 2}, torch::kFloat64), &deg), 0.0);
  EXPECT_TRUE(deg);
  fcc_value(torch::randn({3, 3, 2}, torch::kFloat64), torch::randn({3, 3, 2}, torch::kFloat64), &deg);
  EXPECT_FALSE(deg);
  EXPECT_THROW(fcc(torch::zeros({2, 2, 2}), torch::zeros({2, 2, 3})), ShapeError);
}

TEST(Fcc, PerChannelScalingIsNotInvariant) {
  const auto x = torch::tensor({1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 3.0, 2.0}, torch::kFloat64).reshape({2, 2, 2});
  const auto y = torch::tensor({1.0, 1.0, 2.0, 0.0, 0.0, 3.0, 3.0, 1.0}, torch::kFloat64).reshape({2, 2, 2});
  const auto s = torch::tensor({1.0, 10.0}, torch::kFloat64);
  EXPECT_GT(std::abs(fcc_value(x * s, y) - fcc_value(x, y)), 1e-3);
  EXPECT_NEAR(fcc_value(x * 10.0, y), fcc_value(x, y), 1e-12);
}

TEST(AlignLoss, Extremes) {
  const auto u = torch::randn({2, 3, 3, 4}, torch::kFloat64);
  EXPECT_NEAR(align_loss(u, u, u).item<double>(), -2.0, 1e-12);
  EXPECT_NEAR(align_loss(-u, u, u).item<double>(), 0.0, 1e-12);
}

TEST(AlignLoss, ComposesFromFcc) {
  const auto g = torch::randn({3, 4, 4, 5}, torch::kFloat64);
  const auto v = torch::randn({3, 4, 4, 5}, torch::kFloat64);
  const auto u = torch::randn({3, 4, 4, 5}, torch::kFloat64);
  double expected = 0.0;
  for (int b = 0; b < 3; ++b) expected += -fcc_loop(g[b], u[b]) - fcc_loop(v[b], u[b]);
  expected /= 3.0;
  const double got = align_loss(g, v, u).item<double>();
  EXPECT_NEAR(got, expected, 1e-10);
  EXPECT_GE(got, -2.0);
  EXPECT_LE(got, 2.0);
}

TEST(AlignLoss, GradientOnTinyCase) {
  auto g = torch::randn({1, 2, 2, 2}, torch::kFloat64).requires_grad_(true);
  auto v = torch::randn({1, 2, 2, 2}, torch::kFloat64).requires_grad_(true);
  const auto u = torch::randn({1, 2, 2, 2}, torch::kFloat64);
  const auto r = testkit::grad_check([&] { return align_loss(g, v, u); }, {g, v});
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(AlignLoss, AnchorReceivesNoGradient) {
  auto u = torch::randn({1, 2, 2, 3}, torch::kFloat64).requires_grad_(true);
  auto g = torch::randn({1, 2, 2, 3}, torch::kFloat64).requires_grad_(true);
  align_loss(g, g, u).backward();
  EXPECT_FALSE(u.grad().defined() && u.grad().abs().sum().item<double>() != 0.0);
}

TEST(Guidance, UniformSalienceGivesMeanTokens) {
  const auto f = torch::randn({2, 9, 4}, torch::kFloat64);
  const auto g = pool_guidance(torch::full({2, 9}, 1.0 / 9, torch::kFloat64), f, 3);
  EXPECT_EQ(g.sizes(), (torch::IntArrayRef{2, 3, 4}));
  for (int k = 0; k < 3; ++k) EXPECT_LT((g.select(1, k) - f.mean(1)).abs().max().item<double>(), 1e-12);
}

TEST(Guidance, OneHotSalienceSelectsToken) {
  const auto f = torch::randn({1, 6, 4}, torch::kFloat64);
  auto s = torch::zeros({1, 6}, torch::kFloat64);
  s[0][4] = 1.0;
  const auto g = pool_guidance(s, f, 2);
  EXPECT_LT((g[0][0] - f[0][4]).abs().max().item<double>(), 1e-12);
}

TEST(Guidance, ZeroSalienceFallsBackToUniform) {
  const auto f = torch::randn({1, 4, 3}, torch::kFloat64);
  const auto g = pool_guidance(torch::zeros({1, 4}, torch::kFloat64), f, 2);
  EXPECT_TRUE(torch::isfinite(g).all().item<bool>());
  EXPECT_LT((g[0][1] - f[0].mean(0)).abs().max().item<double>(), 1e-12);
}

TEST(Guidance, SalienceSumsToOneAcrossMapKinds) {
  auto self = torch::softmax(torch::randn({2, 4, 16, 16}), -1);
  auto cross = torch::softmax(torch::randn({2, 2, 64, 7}), -1);
  const auto s = attention_salience({nn::AttentionMap{0, self, 4, 4}, nn::AttentionMap{1, cross, 8, 8}}, 4, 4);
  EXPECT_EQ(s.sizes(), (torch::IntArrayRef{2, 16}));
  EXPECT_LT((s.sum(1) - 1.0).abs().max().item<double>(), 1e-5);
  EXPECT_THROW(attention_salience({}, 4, 4), ShapeError);
}

TEST(Compensation, ZeroValueProjectionIsIdentity) {
  Compensation comp(6);
  comp->to(torch::kFloat64);
  {
    torch::NoGradGuard ng;
    comp->w_v->weight.zero_();
  }
  const auto f = torch::randn({2, 5, 6}, torch::kFloat64);
  const auto out = comp(f, torch::randn({3, 6}, torch::kFloat64), torch::randn({2, 2, 6}, torch::kFloat64));
  EXPECT_TRUE(torch::equal(out.output, f));
}

TEST(Compensation, SingleEntryAddsProjectedEntry) {
  Compensation comp(4);
  comp->to(torch::kFloat64);
  const auto f = torch::randn({1, 3, 4}, torch::kFloat64);
  const auto e = torch::randn({1, 4}, torch::kFloat64);
  const auto out = comp(f, e);
  const auto delta = comp->w_v(e)[0];
  for (int t = 0; t < 3; ++t) EXPECT_LT((out.output[0][t] - f[0][t] - delta).abs().max().item<double>(), 1e-12);
}

TEST(Compensation, MatchesAttentionLoop) {
  Compensation comp(3);
  comp->to(torch::kFloat64);
  const auto f = torch::randn({1, 3, 3}, torch::kFloat64);
  const auto e = torch::randn({2, 3}, torch::kFloat64);
  const auto out = comp(f, e).output;
  const auto Q = comp->w_q(f)[0], K = comp->w_k(e), V = comp->w_v(e);
  for (int t = 0; t < 3; ++t) {
    double s[2], z = 0.0;
    for (int j = 0; j < 2; ++j) {
      s[j] = std::exp((Q[t] * K[j]).sum().item<double>() / std::sqrt(3.0));
      z += s[j];
    }
    for (int c = 0; c < 3; ++c) {
      const double o = f[0][t][c].item<double>() + (s[0] * V[0][c].item<double>() + s[1] * V[1][c].item<double>()) / z;
      EXPECT_NEAR(out[0][t][c].item<double>(), o, 1e-6);
    }
  }
}

TEST(Dcfl, MapsOnlyMatterWhenEnabled) {
  DcflOptions o;
  o.vit_dim = 8;
  o.gen_dim = 4;
  o.dim = 8;
  o.entries = 5;
  o.guidance_tokens = 2;
  torch::manual_seed(1);
  Dcfl on(o);
  o.use_explicit_maps = o.use_implicit_maps = false;
  torch::manual_seed(1);
  Dcfl off(o);
  const nn::FeatureMap vit{torch::randn({2, 16, 8}), 4, 4};
  const nn::FeatureMap gen{torch::randn({2, 64, 4}), 8, 8};
  const std::vector<nn::AttentionMap> vm{{0, torch::softmax(torch::randn({2, 2, 16, 16}), -1), 4, 4}};
  const std::vector<nn::AttentionMap> gm{{0, torch::softmax(torch::randn({2, 2, 64, 5}), -1), 8, 8}};
  const std::vector<nn::AttentionMap> none;
  const auto a = off->forward(vit, vm, gen, gm);
  const auto b = off->forward(vit, none, gen, none);
  EXPECT_TRUE(torch::equal(a.vit_hat.tokens, b.vit_hat.tokens));
  EXPECT_TRUE(torch::equal(a.gen_hat.tokens, b.gen_hat.tokens));
  const auto c = on->forward(vit, vm, gen, gm);
  EXPECT_FALSE(torch::equal(c.vit_hat.tokens, a.vit_hat.tokens));
  EXPECT_FALSE(torch::equal(c.gen_hat.tokens, a.gen_hat.tokens));
  EXPECT_EQ(c.gen.h, 4);
  EXPECT_EQ(c.gen_hat.tokens.sizes(), (torch::IntArrayRef{2, 16, 8}));
}

TEST(Dcfl, AbsentGenerativePathwayIsZeros) {
  DcflOptions o;
  o.vit_dim = 8;
  o.gen_dim = 4;
  o.dim = 8;
  o.entries = 5;
  Dcfl m(o);
  const auto r = m->forward(nn::FeatureMap{torch::randn({1, 16, 8}), 4, 4}, {}, nn::FeatureMap{}, {});
  EXPECT_EQ(r.gen.tokens.abs().max().item<double>(), 0.0);
  EXPECT_TRUE(torch::isfinite(r.gen_hat.tokens).all().item<bool>());
}
