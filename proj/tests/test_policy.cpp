#include <gtest/gtest.h>

#include <cmath>

#include "common/micro_grpo.hpp"
#include "raidx/grpo.hpp"
#include "raidx/policy/policy.hpp"

using namespace raidx;

namespace {

PolicyConfig small_config(std::uint64_t seed = 3) {
  PolicyConfig c;
  c.image_height = c.image_width = 16;
  c.patch = 4;
  c.embed_dim = 8;
  c.layers = 2;
  c.hidden = 12;
  c.prompt_dim = 6;
  c.lora_rank = 2;
  c.max_len = 12;
  c.pretrain_iters = 200;
  c.seed = seed;
  return c;
}

Image random_image(Rng& rng, std::size_t h, std::size_t w) {
  Image img{h, w, std::vector<double>(h * w)};
  for (double& p : img.pixels) p = rng.uniform();
  return img;
}

std::size_t expected_trainable(const PolicyConfig& c, std::size_t vocab) {
  const std::size_t d = c.embed_dim, h = c.hidden, e = c.prompt_dim, r = c.lora_rank;
  const std::size_t encoder =
      c.patch_feature_dim() * d + d + (c.num_patches() + 1) * d + c.layers * 4 * d * d;
  const std::size_t adapters = d * r + r * h + e * r + r * h + h * r + r * vocab;
  return encoder + adapters;
}

}  // namespace

TEST(Encoder, ZeroImageRowsStochastic) {
  const auto p = Policy::create(small_config());
  const Image img{16, 16, std::vector<double>(256, 0.0)};
  const auto enc = encode_image(p, img);
  ASSERT_EQ(enc.attention.size(), 2u);
  EXPECT_TRUE(kernels::all_finite(enc.features));
  for (const auto& a : enc.attention) {
    ASSERT_EQ(a.rows(), 17u);
    ASSERT_EQ(a.cols(), 17u);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Encoder, RowStochasticOnRandomInputsWithHeads) {
  Rng rng(9);
  auto cfg = small_config();
  cfg.heads = 2;
  const auto p = Policy::create(cfg);
  for (int t = 0; t < 10; ++t) {
    const auto enc = encode_image(p, random_image(rng, 16, 16));
    for (const auto& a : enc.attention)
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Encoder, DeterministicAndSensitive) {
  Rng rng(10);
  const auto p = Policy::create(small_config());
  const Image img = random_image(rng, 16, 16);
  const auto a = encode_image(p, img), b = encode_image(p, img);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.cls_embedding, b.cls_embedding);
  double n = 0.0;
  for (double x : a.cls_embedding) n += x * x;
  EXPECT_NEAR(n, 1.0, 1e-12);

  Image other = img;
  for (std::size_t r = 4; r < 8; ++r)
    for (std::size_t c = 8; c < 12; ++c) other.at(r, c) = rng.uniform();
  EXPECT_NE(encode_image(p, other).cls_embedding, a.cls_embedding);
}

TEST(Encoder, RejectsWrongImageSize) {
  const auto p = Policy::create(small_config());
  const Image img{8, 8, std::vector<double>(64, 0.5)};
  EXPECT_THROW(p.context(img, {}), ShapeError);
  const Image bad{16, 16, std::vector<double>(256, 1.5)};
  EXPECT_THROW(encode_image(p, bad), ImageError);
}

TEST(Prompt, Assembly) {
  const auto p = Policy::create(small_config());
  const auto& tok = p.prompt_tokenizer();
  const std::string instr = "Is this image real or fake?";
  const auto none = build_prompt(tok, instr, std::nullopt);
  EXPECT_EQ(none, tok.encode(instr));
  RetrievalResult r;
  r.neighbors.resize(10);
  r.n_real = 3;
  r.n_fake = 7;
  const auto s = summarize(r);
  const auto with = build_prompt(tok, instr, s);
  auto expect = tok.encode(instr);
  const auto extra = tok.encode(s.text);
  expect.insert(expect.end(), extra.begin(), extra.end());
  EXPECT_EQ(with, expect);
  EXPECT_EQ(with, build_prompt(tok, instr, s));
  EXPECT_NE(p.prompt_feature(with), p.prompt_feature(none));
}

TEST(Prompt, CountsAreDistinctTokens) {
  const PromptTokenizer tok;
  for (int n = 0; n <= PromptTokenizer::kMaxNumber; ++n) {
    const auto id = tok.number_id(n);
    ASSERT_TRUE(id);
    EXPECT_EQ(tok.number_value(*id), n);
  }
}

TEST(Sampling, GreedyGroupIsIdentical) {
  Rng rng(12);
  const auto p = Policy::create(small_config());
  const auto ctx = p.context(random_image(rng, 16, 16), {1, 2, 3});
  const auto g = sample_group(p, SnapshotTag::kCurrent, ctx, 5, 0.0, 1);
  for (const auto& s : g) EXPECT_EQ(s.tokens, g.front().tokens);
}

TEST(Sampling, SeedsControlTheDraw) {
  Rng rng(13);
  auto cfg = small_config();
  cfg.pretrain_format = false;
  const auto p = Policy::create(cfg);
  const auto ctx = p.context(random_image(rng, 16, 16), {4, 5});
  auto tokens = [&](std::uint64_t seed) {
    std::vector<std::vector<int>> out;
    for (const auto& s : sample_group(p, SnapshotTag::kCurrent, ctx, 8, 1.0, seed))
      out.push_back(s.tokens);
    return out;
  };
  EXPECT_EQ(tokens(5), tokens(5));
  EXPECT_NE(tokens(5), tokens(6));
}

TEST(Sampling, RecordedLogprobsMatchRecomputation) {
  Rng rng(14);
  const auto p = Policy::create(small_config());
  for (int t = 0; t < 5; ++t) {
    const auto ctx = p.context(random_image(rng, 16, 16), {1, 7, 9});
    for (const auto& s : sample_group(p, SnapshotTag::kOld, ctx, 8, 1.0, rng.next_u64())) {
      double sum = 0.0;
      for (double lp : s.token_logprobs) sum += lp;
      EXPECT_NEAR(s.total_logprob, sum, 1e-12);
      EXPECT_LE(s.total_logprob, 0.0);
      EXPECT_NEAR(sequence_logprob(p, ctx, s.tokens), s.total_logprob, 1e-12);
      EXPECT_EQ(s.snapshot, SnapshotTag::kOld);
      EXPECT_LE(s.tokens.size(), p.config().max_len);
    }
  }
}

TEST(Sampling, UniformLogitsGiveLogOneOverV) {
  auto cfg = small_config();
  cfg.vocab_size = 16;
  cfg.pretrain_format = false;
  auto p = Policy::create(cfg);
  for (std::size_t slot : {Policy::kDecOut, Policy::kDecOutBias, Policy::kOutUp})
    for (double& x : p.parameter(slot).value.data()) x = 0.0;
  Rng rng(15);
  const auto ctx = p.context(random_image(rng, 16, 16), {});
  EXPECT_NEAR(sequence_logprob(p, ctx, {3}), -2.772589, 1e-6);
  EXPECT_NEAR(sequence_logprob(p, ctx, {3, 8}), 2.0 * std::log(1.0 / 16.0), 1e-12);
  EXPECT_THROW(sequence_logprob(p, ctx, {}), VocabularyError);
  EXPECT_THROW(sequence_logprob(p, ctx, {16}), VocabularyError);
}

TEST(Sampling, AdapterGradientMatchesFiniteDifferences) {
  auto cfg = raidx::testing::micro_policy_config(6, 4);
  auto p = Policy::create(cfg);
  Rng rng(16);
  raidx::testing::jitter_trainable(p, rng, 0.3);
  Image img{4, 4, std::vector<double>(16)};
  for (double& x : img.pixels) x = rng.uniform();
  const auto ctx = p.context(img, {1, 2});
  const std::vector<int> seq{2, 0, 5};
  for (std::size_t slot : {Policy::kImgUp, Policy::kPromptDown, Policy::kOutUp}) {
    Graph g;
    const auto w = p.bind(g, true);
    const Var lp = score_sequences(g, p, w, ctx, {seq});
    const auto grads = g.backward(g.sum(lp));
    auto f = [&](const Tensor& t) {
      Policy q = p;
      q.parameter(slot).value = t;
      return sequence_logprob(q, ctx, seq);
    };
    const Tensor fd = finite_diff_grad(f, p.parameter(slot).value, 1e-5);
    double diff = 0.0, n = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      diff += std::pow(grads[w[slot]][i] - fd[i], 2);
      n += fd[i] * fd[i];
    }
    EXPECT_LE(std::sqrt(diff / std::max(n, 1e-300)), 1e-5) << p.parameter(slot).name;
  }
}

TEST(Parameters, AdapterUpFactorsStartAtZero) {
  const auto p = Policy::create(small_config());
  for (std::size_t slot : {Policy::kImgUp, Policy::kPromptUp, Policy::kOutUp})
    for (double x : p.parameter(slot).value.data()) EXPECT_EQ(x, 0.0);
}

TEST(Parameters, ZeroInitAdaptersLeaveOutputsBitIdentical) {
  Rng rng(17);
  const auto p = Policy::create(small_config());
  auto base = p;
  for (std::size_t slot : {Policy::kImgDown, Policy::kPromptDown, Policy::kOutDown})
    for (double& x : base.parameter(slot).value.data()) x = 0.0;
  const auto ctx = p.context(random_image(rng, 16, 16), {3, 4, 5});
  auto lg = [&](const Policy& q) {
    Graph g;
    const auto w = q.bind(g, false);
    const auto enc = q.encode(g, w, ctx.patches);
    return q.logits(g, w, enc.cls, ctx.prompt, {q.bos(), 0, 1, 2}).value();
  };
  EXPECT_EQ(lg(p), lg(base));
}

TEST(Parameters, CountMatchesFormula) {
  for (std::size_t layers : {1u, 2u, 3u}) {
    auto cfg = small_config();
    cfg.layers = layers;
    cfg.lora_rank = layers + 1;
    const auto p = Policy::create(cfg);
    EXPECT_EQ(p.trainable_scalar_count(), expected_trainable(cfg, p.vocab().size()));
  }
  const auto p = Policy::create(small_config());
  const auto names = p.trainable_parameters();
  for (const auto& n : names)
    EXPECT_TRUE(n.rfind("encoder.", 0) == 0 || n.rfind("adapter.", 0) == 0) << n;
  for (const auto& prm : p.parameters())
    if (prm.name.rfind("decoder.", 0) == 0) EXPECT_FALSE(prm.trainable) << prm.name;
}

TEST(Parameters, FrozenWeightsSurviveAnUpdate) {
  auto p = Policy::create(small_config());
  const auto frozen = p.frozen_hash();
  const auto full = p.full_hash();
  GrpoConfig gc;
  gc.group = 4;
  GrpoTrainer trainer(p, gc);
  Rng rng(18);
  std::vector<TrainQuery> batch;
  for (int i = 0; i < 4; ++i)
    batch.push_back({static_cast<std::size_t>(i), p.context(random_image(rng, 16, 16), {1}),
                     i % 2 ? Label::kFake : Label::kReal});
  double grad = 0.0;
  for (int s = 0; s < 5; ++s) grad += trainer.train_step(batch, rng).grad_norm;
  ASSERT_GT(grad, 0.0);
  EXPECT_EQ(p.frozen_hash(), frozen);
  EXPECT_NE(p.full_hash(), full);
}

TEST(Snapshot, IsolatedFromLaterUpdates) {
  auto p = Policy::create(small_config());
  Rng rng(19);
  const auto ctx = p.context(random_image(rng, 16, 16), {2});
  const auto ref = snapshot(p, SnapshotTag::kRef);
  const auto old = snapshot(p, SnapshotTag::kOld);
  EXPECT_EQ(ref.policy->full_hash(), old.policy->full_hash());
  const std::vector<int> seq = sample_group(p, SnapshotTag::kCurrent, ctx, 1, 1.0, 3).front().tokens;
  EXPECT_EQ(sequence_logprob(p, ctx, seq) - sequence_logprob(*ref.policy, ctx, seq), 0.0);

  const double before = sequence_logprob(*ref.policy, ctx, seq);
  raidx::testing::jitter_trainable(p, rng, 0.2);
  EXPECT_EQ(sequence_logprob(*ref.policy, ctx, seq), before);
  EXPECT_NE(sequence_logprob(p, ctx, seq), before);
}

TEST(PolicyConfig, Validation) {
  auto c = small_config();
  c.patch = 5;
  EXPECT_THROW(c.validate(), ShapeError);
  c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ShapeError);
  c = small_config();
  c.lora_rank = 0;
  EXPECT_THROW(c.validate(), ShapeError);
}

TEST(Pretraining, BaseEmitsWellFormedOutputs) {
  Rng rng(20);
  const auto p = Policy::create(small_config());
  std::size_t ok = 0, n = 0;
  for (int t = 0; t < 10; ++t) {
    const auto ctx = p.context(random_image(rng, 16, 16), {1, 2});
    for (const auto& s : sample_group(p, SnapshotTag::kCurrent, ctx, 8, 1.0, rng.next_u64())) {
      ok += format_reward(p.vocab().render(s.tokens));
      ++n;
    }
  }
  EXPECT_GE(static_cast<double>(ok) / static_cast<double>(n), 0.5);
}
