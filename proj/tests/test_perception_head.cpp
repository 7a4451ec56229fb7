#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "synmesh/errors.hpp"
#include "synmesh/perception_head.hpp"

using namespace synmesh;
using namespace synmesh::head;

namespace {

HeadOptions small_head() {
  HeadOptions o;
  o.dim = 8;
  o.heads = 2;
  o.blocks = 2;
  o.queries = 3;
  o.hidden = 16;
  o.dims = body::BodyDims{4, 2, 1, 1};
  return o;
}

double assignment_cost(const std::vector<std::vector<double>>& c, const std::vector<std::int64_t>& a) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) s += c[r][a[r]];
  return s;
}

double brute_force(const std::vector<std::vector<double>>& c) {
  const auto cols = c[0].size();
  std::vector<std::int64_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    best = std::min(best, assignment_cost(c, std::vector<std::int64_t>(perm.begin(), perm.begin() + c.size())));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<std::vector<double>> random_cost(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> c(rows, std::vector<double>(cols));
  for (auto& r : c)
    for (auto& x : r) x = u(rng);
  return c;
}

}  // namespace

TEST(Head, ZeroWeightHeadGivesBiases) {
  PerceptionHead h(small_head());
  {
    torch::NoGradGuard ng;
    for (auto* m : {&h->theta, &h->beta, &h->alpha, &h->root, &h->cam, &h->presence}) {
      (*m)->fc2->weight.zero_();
      (*m)->fc2->bias.zero_();
    }
    h->beta->fc2->bias.fill_(0.25);
  }
  const auto p = h->regress(torch::randn({2, 3, 8}));
  EXPECT_LT((p.presence - 0.5).abs().max().item<double>(), 1e-7);
  EXPECT_EQ(p.params.theta.abs().max().item<double>(), 0.0);
  EXPECT_LT((p.params.beta - 0.25).abs().max().item<double>(), 1e-7);
}

TEST(Head, OutputDimensionsFollowBodyPreset) {
  auto o = small_head();
  o.dims = body::toy_dims();
  PerceptionHead h(o);
  const auto p = h->regress(torch::randn({2, 3, 8}));
  EXPECT_EQ(p.params.theta.sizes(), (torch::IntArrayRef{6, 24, 3}));
  EXPECT_EQ(p.params.beta.sizes(), (torch::IntArrayRef{6, 10}));
  EXPECT_EQ(p.params.alpha.sizes(), (torch::IntArrayRef{6, 10}));
  EXPECT_EQ(p.cam.sizes(), (torch::IntArrayRef{2, 3, 3}));
  EXPECT_EQ(p.presence.sizes(), (torch::IntArrayRef{2, 3}));
}

TEST(Head, PresenceGradient) {
  PerceptionHead h(small_head());
  h->to(torch::kFloat64);
  auto q = torch::randn({1, 3, 8}, torch::kFloat64).requires_grad_(true);
  const auto r = testkit::grad_check([&] { return h->regress(q).presence.sum(); }, {q});
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(Head, AllTrueMaskIsNoOp) {
  PerceptionHead h(small_head());
  const nn::FeatureMap f{torch::randn({2, 6, 8}), 2, 3};
  const auto a = h->decode(f);
  const auto b = h->decode(f, torch::ones({2, 6}, torch::kBool));
  EXPECT_TRUE(torch::allclose(a.queries, b.queries, 0, 1e-6));
}

TEST(Head, SingleTokenMemory) {
  DecoderBlock blk(8, 2, 16);
  const auto mem = torch::randn({1, 1, 8});
  const auto q = torch::randn({1, 4, 8});
  const auto r = blk->forward(q, mem, {});
  EXPECT_LT((r.weights - 1.0).abs().max().item<double>(), 1e-6);
  // Every query receives the same cross-attention output: the single value.
  const auto v = blk->cross_attn->o(blk->cross_attn->v(mem));
  auto x = q + blk->self_attn(blk->ln_self(q), blk->ln_self(q)).output;
  const auto c = blk->cross_attn(blk->ln_cross(x), mem).output;
  for (int i = 0; i < 4; ++i) EXPECT_LT((c[0][i] - v[0][0]).abs().max().item<double>(), 1e-5);
}

TEST(Head, CrossAttentionMatchesLoop) {
  nn::MultiHeadAttention mha(nn::MultiHeadAttentionOptions{4, 1});
  mha->to(torch::kFloat64);
  const auto q = torch::randn({1, 2, 4}, torch::kFloat64);
  const auto m = torch::randn({1, 3, 4}, torch::kFloat64);
  const auto r = mha(q, m);
  const auto Q = mha->q(q)[0], K = mha->k(m)[0], V = mha->v(m)[0];
  for (int i = 0; i < 2; ++i) {
    double s[3], z = 0.0;
    for (int j = 0; j < 3; ++j) {
      s[j] = std::exp((Q[i] * K[j]).sum().item<double>() / 2.0);
      z += s[j];
    }
    auto mix = V[0] * (s[0] / z) + V[1] * (s[1] / z) + V[2] * (s[2] / z);
    const auto o = mha->o(mix.unsqueeze(0))[0];
    EXPECT_LT((r.output[0][i] - o).abs().max().item<double>(), 1e-6);
  }
}

TEST(Head, MaskedAttentionStaysInsideBox) {
  PerceptionHead h(small_head());
  const nn::FeatureMap f{torch::randn({1, 16, 8}) * 3, 4, 4};
  auto mask = torch::zeros({1, 16}, torch::kBool);
  for (int t : {5, 6, 9, 10}) mask[0][t] = true;
  const auto out = h->decode(f, mask);
  for (const auto& w : out.cross_attn) {
    const double total = w.sum().item<double>();
    const double outside = (w * (~mask).to(w.scalar_type()).view({1, 1, 1, 16})).sum().item<double>();
    EXPECT_LT(outside, 1e-3 * total);
  }
}

TEST(Camera, TranslationRoundTrip) {
  const auto cam = torch::tensor({{0.2, -0.4, 0.1}, {0.0, 0.0, 0.0}}, torch::kFloat64);
  const auto t = cam_to_translation(cam, 115.2, 64, 64);
  EXPECT_NEAR(t[1][2].item<double>(), kReferenceDepth, 1e-12);
  EXPECT_NEAR(t[0][2].item<double>(), kReferenceDepth * std::exp(-0.1), 1e-12);
  EXPECT_NEAR(t[0][0].item<double>(), 0.2 * t[0][2].item<double>() * 64 / (2 * 115.2), 1e-12);
  EXPECT_LT((translation_to_cam(t, 115.2, 64, 64) - cam).abs().max().item<double>(), 1e-12);
}

TEST(Matching, HungarianEqualsBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + trial % 4, cols = rows + trial % 3;
    const auto c = random_cost(rows, cols, rng);
    const auto a = hungarian(c);
    ASSERT_EQ(a.size(), rows);
    std::vector<std::int64_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
    EXPECT_NEAR(assignment_cost(c, a), brute_force(c), 1e-12);
  }
}

TEST(Matching, ThreeByThreeAssignmentIsTheBruteForceOne) {
  const std::vector<std::vector<double>> c{{4, 1, 3}, {2, 0, 5}, {3, 2, 2}};
  EXPECT_EQ(hungarian(c), (std::vector<std::int64_t>{1, 0, 2}));
}

TEST(Matching, TiesResolveToLowestIndex) {
  const std::vector<std::vector<double>> c{{1, 1, 1}};
  EXPECT_EQ(hungarian(c), (std::vector<std::int64_t>{0}));
  EXPECT_EQ(greedy_assignment(c), (std::vector<std::int64_t>{0}));
}

TEST(Matching, CapacityAndGreedy) {
  EXPECT_THROW(hungarian({{1.0}, {2.0}}), CapacityError);
  EXPECT_THROW(greedy_assignment({{1.0}, {2.0}}), CapacityError);
  const auto a = greedy_assignment({{0.1, 0.9}, {0.2, 0.3}});
  EXPECT_EQ(a, (std::vector<std::int64_t>{0, 1}));
}

TEST(Matching, PredictionOnGroundTruthIsChosen) {
  const auto gt = torch::rand({1, 5, 2}) * 64;
  auto pred = torch::rand({4, 5, 2}) * 64;
  pred[2] = gt[0];
  const auto pairs = match_instances(pred, torch::full({4}, 0.5), gt, 32.0);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].first, 0);
  EXPECT_EQ(pairs[0].second, 2);
}

TEST(Matching, GroundTruthOrderDoesNotChangeTotalCost) {
  torch::manual_seed(8);
  const auto pred = torch::rand({6, 5, 2}) * 64;
  const auto pres = torch::rand({6});
  const auto gt = torch::rand({4, 5, 2}) * 64;
  auto total = [&](const torch::Tensor& g) {
    double s = 0.0;
    for (auto [gi, k] : match_instances(pred, pres, g, 32.0))
      s += (pred[k] - g[gi]).norm(2, -1).mean().item<double>() / 32.0 + (1.0 - pres[k].item<double>());
    return s;
  };
  const auto perm = torch::tensor({2, 0, 3, 1});
  EXPECT_NEAR(total(gt), total(gt.index_select(0, perm)), 1e-9);
  EXPECT_THROW(match_instances(pred.narrow(0, 0, 2), pres.narrow(0, 0, 2), gt, 32.0), CapacityError);
}
