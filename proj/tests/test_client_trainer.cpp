#include <gtest/gtest.h>

#include <cmath>

#include "fedalign/client_trainer.hpp"
#include "fedalign/routing_regularizer.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

namespace fedalign {
namespace {

SampleTrace routed(std::vector<std::size_t> set, Vector topk, Vector full) {
  SampleTrace s;
  s.topk_set = std::move(set);
  s.topk_probs = std::move(topk);
  s.scores.resize(full.size());
  for (std::size_t e = 0; e < full.size(); ++e) s.scores[e] = std::log(full[e]);
  s.full_probs = std::move(full);
  return s;
}

SampleTrace with_full(Vector full) {
  SampleTrace s = routed({}, {}, std::move(full));
  s.topk_set = top_k_select(s.full_probs, 1);
  s.topk_probs = {1.0};
  return s;
}

ClientDataset shard_from(Batch b, std::size_t id = 0) {
  ClientDataset c;
  c.client_id = id;
  c.pool_indices.resize(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) c.pool_indices[i] = i;
  c.data = std::move(b);
  return c;
}

TEST(PBar, AllMassOnExpertZero) {
  std::vector<SampleTrace> t(3, routed({0, 1}, {1.0, 0.0}, {0.5, 0.3, 0.2}));
  EXPECT_EQ(compute_p_bar(t, 3), (Vector{1.0, 0.0, 0.0}));
}

TEST(PBar, FullTopKUniformGate) {
  std::vector<SampleTrace> t(4, routed({0, 1, 2, 3}, Vector(4, 0.25), Vector(4, 0.25)));
  for (double v : compute_p_bar(t, 4)) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(PBar, TwoSampleAverage) {
  const std::vector<SampleTrace> t{routed({0, 1}, {0.8, 0.2}, {0.7, 0.2, 0.1}),
                                   routed({0, 1}, {0.4, 0.6}, {0.3, 0.5, 0.2})};
  const auto ref = oracle::column_mean({{0.8L, 0.2L, 0.0L}, {0.4L, 0.6L, 0.0L}});
  const auto p = compute_p_bar(t, 3);
  ASSERT_NEAR(static_cast<double>(ref[0]), 0.6, 1e-15);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(p[e], static_cast<double>(ref[e]), 1e-9);
}

TEST(Margin, Cases) {
  std::vector<SampleTrace> t(3, with_full({0.7, 0.3}));
  const auto m = compute_margin(t, 2);
  EXPECT_NEAR(m[0], 0.4, 1e-15);
  EXPECT_EQ(m[1], 0.0);

  std::vector<SampleTrace> u(2, with_full({0.25, 0.25, 0.25, 0.25}));
  for (double v : compute_margin(u, 4)) EXPECT_EQ(v, 0.0);
}

TEST(Margin, TwoSampleAverage) {
  const std::vector<SampleTrace> t{with_full({0.6, 0.3, 0.1}), with_full({0.2, 0.5, 0.3})};
  const auto ref = oracle::margin({{0.6L, 0.3L, 0.1L}, {0.2L, 0.5L, 0.3L}});
  ASSERT_NEAR(static_cast<double>(ref[0]), 0.15, 1e-15);
  ASSERT_NEAR(static_cast<double>(ref[1]), 0.1, 1e-15);
  const auto m = compute_margin(t, 3);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(m[e], static_cast<double>(ref[e]), 1e-9);
}

TEST(Margin, PropertyMatchesBruteForce) {
  Rng rng(5);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<SampleTrace> t;
    std::vector<oracle::LVec> probs;
    for (int i = 0; i < 7; ++i) {
      Vector s(5);
      for (auto& v : s) v = n(rng);
      const auto p = softmax(s);
      t.push_back(with_full(p));
      probs.emplace_back(p.begin(), p.end());
    }
    const auto ref = oracle::margin(probs);
    const auto m = compute_margin(t, 5);
    for (std::size_t e = 0; e < 5; ++e) EXPECT_NEAR(m[e], static_cast<double>(ref[e]), 1e-12);
  }
}

TEST(InputAssignment, Cases) {
  auto sample = [](Vector scores, Vector h) {
    SampleTrace s;
    s.scores = std::move(scores);
    s.hidden = std::move(h);
    return s;
  };
  {
    const std::vector<SampleTrace> t{sample({3, 1, 0}, {1, 2}), sample({2, 1, 0}, {3, 4})};
    const auto a = compute_mu(t, 3, 2);
    EXPECT_EQ(a.mu(0, 0), 2.0);
    EXPECT_EQ(a.mu(0, 1), 3.0);
    EXPECT_EQ(a.empty, (std::vector<bool>{false, true, true}));
  }
  {
    const std::vector<SampleTrace> t{sample({1, 0}, {7, 8}), sample({0, 1}, {5, 6})};
    const auto a = compute_mu(t, 2, 2);
    EXPECT_EQ(a.mu(0, 0), 7.0);
    EXPECT_EQ(a.mu(1, 1), 6.0);
  }
  {
    const std::vector<SampleTrace> t{sample({0, 1}, {1, 0}), sample({0, 2}, {0, 1})};
    const auto a = compute_mu(t, 2, 2);
    EXPECT_EQ(a.mu(1, 0), 0.5);
    EXPECT_EQ(a.mu(1, 1), 0.5);
    EXPECT_TRUE(a.empty[0]);
  }
  {
    // Exact tie goes to the lower index.
    const std::vector<SampleTrace> t{sample({1, 1}, {1, 1})};
    EXPECT_EQ(compute_mu(t, 2, 2).empty, (std::vector<bool>{false, true}));
  }
}

TEST(Alpha, Cases) {
  const double eta = 0.1;
  EXPECT_DOUBLE_EQ(compute_alpha({eta}, eta)[0], 0.5);
  const long double ref = oracle::sigmoid(std::log(3.0L));
  ASSERT_NEAR(static_cast<double>(ref), 0.75, 1e-15);
  EXPECT_NEAR(compute_alpha({eta + std::log(3.0)}, eta)[0], static_cast<double>(ref), 1e-9);
  const auto a = compute_alpha({-1.0, 0.0, 0.2, 0.2, 3.0}, eta);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_GE(a[i], a[i - 1]);
}

RegContext two_expert_context(Vector alpha, MaskPolicy mask) {
  RegContext ctx;
  ctx.p_global = {0.5, 0.5};
  ctx.alpha = std::move(alpha);
  ctx.lambda = 1.0;
  ctx.mask = mask;
  ctx.top_k = 1;
  return ctx;
}

TEST(RegLoss, HandKl) {
  const auto s = with_full({0.9, 0.1});
  const auto ctx = two_expert_context({1.0, 1.0}, MaskPolicy::all_experts);
  const long double ref = oracle::kl({0.9L, 0.1L}, {0.5L, 0.5L}, {1.0L, 1.0L});
  ASSERT_NEAR(static_cast<double>(ref), 0.368, 5e-4);
  EXPECT_NEAR(reg_loss(s, ctx), static_cast<double>(ref), 1e-6);
}

TEST(RegLoss, ZeroCases) {
  const auto s = with_full({0.5, 0.5});
  EXPECT_NEAR(reg_loss(s, two_expert_context({1.0, 1.0}, MaskPolicy::all_experts)), 0.0, 1e-15);
  const auto t = with_full({0.9, 0.1});
  EXPECT_EQ(reg_loss(t, two_expert_context({0.0, 0.0}, MaskPolicy::all_experts)), 0.0);
}

TEST(RegLoss, MaskIsUnionOfLocalAndReferenceTopK) {
  RegContext ctx;
  ctx.p_global = {0.1, 0.1, 0.7, 0.1};
  ctx.alpha.assign(4, 1.0);
  ctx.top_k = 1;
  EXPECT_EQ(regularization_mask(Vector{0.6, 0.2, 0.1, 0.1}, ctx),
            (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(regularization_mask(Vector{0.1, 0.1, 0.7, 0.1}, ctx), (std::vector<std::size_t>{2}));
  ctx.mask = MaskPolicy::all_experts;
  EXPECT_EQ(regularization_mask(Vector{0.6, 0.2, 0.1, 0.1}, ctx).size(), 4u);
}

TEST(RegLoss, ScoreGradientMatchesFiniteDifferences) {
  Rng rng(3);
  std::normal_distribution<double> n;
  MoEConfig c{2, 2, 5, 2, 2, 2};
  for (int trial = 0; trial < 20; ++trial) {
    auto ctx = testing_util::reg_context(c, 1.0, 100 + trial);
    ctx.mask = trial % 2 == 0 ? MaskPolicy::topk_union : MaskPolicy::all_experts;
    Vector scores(5);
    for (auto& v : scores) v = n(rng);
    auto loss = [&ctx](std::span<const double> s) {
      SampleTrace t;
      t.scores.assign(s.begin(), s.end());
      t.full_probs = softmax(s);
      return reg_loss(t, ctx);
    };
    SampleTrace t;
    t.scores = scores;
    t.full_probs = softmax(scores);
    const auto g = reg_loss_score_grad(t, ctx);
    // The mask is piecewise constant in the scores, so small steps stay inside one piece.
    const auto r = grad_check(loss, scores, g, 1e-6);
    EXPECT_LT(r.max_rel, 1e-6);
  }
}

TEST(RegContext, Validation) {
  auto ctx = two_expert_context({1.0, 1.0}, MaskPolicy::topk_union);
  EXPECT_NO_THROW(ctx.validate(2));
  EXPECT_THROW(ctx.validate(3), std::invalid_argument);
  ctx.p_global = {0.6, 0.6};
  EXPECT_THROW(ctx.validate(2), std::invalid_argument);
}

Batch separable_two_class(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  Batch b{Matrix(n, 2), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % 2;
    b.labels[i] = y;
    b.features(i, 0) = (y == 0 ? -2.0 : 2.0) + noise(rng);
    b.features(i, 1) = noise(rng);
  }
  return b;
}

TEST(LocalRound, ZeroLearningRateIsEvaluationOnly) {
  MoEConfig c{4, 6, 4, 2, 3, 5};
  const auto p = testing_util::random_params(c, 1);
  const auto shard = shard_from(testing_util::random_batch(c, 20, 2), 3);
  const ServerBroadcast bc{Vector(4, 0.25), Vector(4, 0.25)};
  LocalTrainingOptions o;
  o.lr = 0.0;
  o.lambda = 0.1;
  const auto r = local_round(p, shard, bc, o);
  for (const auto& d : r.upload.delta.delta) {
    for (double v : d) EXPECT_EQ(v, 0.0);
  }
  const auto eval = compute_routing_stats(p, shard, bc.prior_consensus);
  EXPECT_EQ(r.upload.stats.p_bar, eval.p_bar);
  EXPECT_EQ(r.upload.stats.margin, eval.margin);
  EXPECT_EQ(r.upload.stats.mu, eval.mu);
  EXPECT_EQ(r.upload.stats.client_id, 3u);
  EXPECT_EQ(r.upload.stats.dataset_size, 20u);
}

TEST(LocalRound, ZeroLambdaIgnoresReference) {
  MoEConfig c{4, 6, 4, 2, 3, 5};
  const auto p = testing_util::random_params(c, 1);
  const auto shard = shard_from(testing_util::random_batch(c, 20, 2));
  LocalTrainingOptions o;
  o.lambda = 0.0;
  o.shuffle_seed = 9;
  const auto a = local_round(p, shard, {Vector(4, 0.25), Vector(4, 0.25)}, o);
  const auto b = local_round(p, shard, {Vector{0.7, 0.1, 0.1, 0.1}, Vector{0.1, 0.1, 0.1, 0.7}}, o);
  EXPECT_EQ(a.upload.params, b.upload.params);
  EXPECT_EQ(a.mean_reg_loss, 0.0);
}

TEST(LocalRound, LearnsSeparableTask) {
  MoEConfig c{2, 4, 2, 1, 2, 4};
  const auto p = testing_util::random_params(c, 8);
  const auto shard = shard_from(separable_two_class(100, 4));
  LocalTrainingOptions o;
  o.epochs = 20;
  o.batch_size = 10;
  o.lr = 0.1;
  const auto r = local_round(p, shard, {Vector(2, 0.5), Vector(2, 0.5)}, o);
  const auto t = forward(r.upload.params, shard.data);
  std::size_t correct = 0;
  for (const auto& s : t.samples) correct += predict(s) == s.label ? 1 : 0;
  EXPECT_GE(static_cast<double>(correct) / 100.0, 0.95);
}

TEST(LocalRound, DeltaIsParameterChangeAndActivationTracked) {
  MoEConfig c{4, 6, 4, 1, 3, 5};
  const auto p = testing_util::random_params(c, 1);
  const auto shard = shard_from(testing_util::random_batch(c, 30, 2));
  LocalTrainingOptions o;
  o.lambda = 0.1;
  const auto r = local_round(p, shard, {Vector(4, 0.25), Vector(4, 0.25)}, o);
  for (std::size_t e = 0; e < 4; ++e) {
    const auto before = p.experts[e].flatten();
    const auto after = r.upload.params.experts[e].flatten();
    const auto& d = r.upload.delta.delta[e];
    bool moved = false;
    for (std::size_t k = 0; k < d.size(); ++k) {
      EXPECT_EQ(d[k], after[k] - before[k]);
      moved = moved || d[k] != 0.0;
    }
    if (!r.upload.delta.activated[e]) EXPECT_FALSE(moved);
  }
}

TEST(LocalRound, AlignmentReducesRoutingDisagreement) {
  MoEConfig c{4, 6, 4, 2, 3, 5};
  auto p = testing_util::random_params(c, 12);
  const auto shard = shard_from(testing_util::random_batch(c, 32, 13));
  const Vector reference{0.55, 0.15, 0.15, 0.15};
  const ServerBroadcast bc{reference, Vector(4, 0.25)};
  LocalTrainingOptions o;
  o.lambda = 5.0;
  // Small steps: larger ones can swap a sample's top-k set, which makes p_bar jump.
  o.lr = 0.005;
  o.batch_size = 32;  // one full-batch step per call
  o.adaptive_alpha = false;
  double previous = total_variation(compute_routing_stats(p, shard, reference).p_bar, reference);
  const double start = previous;
  for (int step = 0; step < 10; ++step) {
    p = local_round(p, shard, bc, o).upload.params;
    const double tv = total_variation(compute_routing_stats(p, shard, reference).p_bar, reference);
    EXPECT_LE(tv, previous + 1e-12) << "step " << step;
    previous = tv;
  }
  EXPECT_LT(previous, start);
}

TEST(LocalRound, RejectsBadOptions) {
  MoEConfig c{4, 6, 4, 2, 3, 5};
  const auto p = testing_util::random_params(c, 1);
  const auto shard = shard_from(testing_util::random_batch(c, 5, 2));
  const ServerBroadcast bc{Vector(4, 0.25), Vector(4, 0.25)};
  LocalTrainingOptions o;
  o.batch_size = 0;
  EXPECT_THROW(local_round(p, shard, bc, o), std::invalid_argument);
  o = {};
  o.lr = -1.0;
  EXPECT_THROW(local_round(p, shard, bc, o), std::invalid_argument);
  o = {};
  o.lambda = 0.1;
  EXPECT_THROW(local_round(p, shard, {Vector(3, 1.0 / 3), Vector(4, 0.25)}, o),
               std::invalid_argument);
}

TEST(Upload, RoundTripAndMismatchDetection) {
  MoEConfig c{4, 6, 4, 2, 3, 5};
  const auto p = testing_util::random_params(c, 1);
  const auto shard = shard_from(testing_util::random_batch(c, 20, 2), 6);
  LocalTrainingOptions o;
  o.lambda = 0.1;
  const auto r = local_round(p, shard, {Vector(4, 0.25), Vector(4, 0.25)}, o);
  const auto bin = testing_util::temp_path("up.bin");
  const auto side = testing_util::temp_path("up.json");
  write_upload(r.upload.stats, r.upload.delta, bin, side);
  RoutingStats st;
  ExpertDelta d;
  read_upload(bin, side, st, d);
  EXPECT_EQ(st.client_id, 6u);
  EXPECT_EQ(st.p_bar, r.upload.stats.p_bar);
  EXPECT_EQ(st.margin, r.upload.stats.margin);
  EXPECT_EQ(st.overlap, r.upload.stats.overlap);
  EXPECT_EQ(st.mu, r.upload.stats.mu);
  EXPECT_EQ(st.mu_empty, r.upload.stats.mu_empty);
  EXPECT_EQ(st.dataset_size, 20u);
  EXPECT_EQ(d.delta, r.upload.delta.delta);
  EXPECT_EQ(d.activated, r.upload.delta.activated);

  auto other = r.upload.stats;
  other.client_id = 7;
  write_upload(other, r.upload.delta, testing_util::temp_path("up7.bin"),
               testing_util::temp_path("up7.json"));
  EXPECT_THROW(read_upload(bin, testing_util::temp_path("up7.json"), st, d), std::runtime_error);
}

}  // namespace
}  // namespace fedalign
