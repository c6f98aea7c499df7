#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "raidx/harness/pipeline.hpp"

using namespace raidx;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "raidx_test_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig small_run(std::uint64_t seed = 4) {
  RunConfig c;
  c.data.height = c.data.width = 16;
  c.data.n_train = 40;
  c.data.n_test = 20;
  c.data.box_min = 4;
  c.data.box_max = 6;
  c.policy.patch = 4;
  c.policy.embed_dim = 8;
  c.policy.hidden = 16;
  c.policy.prompt_dim = 8;
  c.policy.pretrain_iters = 200;
  c.grpo.group = 4;
  c.grpo.batch_size = 2;
  c.k = 5;
  c.steps = 6;
  c.eval_every = 3;
  c.seed = seed;
  c.finalize().validate();
  return c;
}

std::string slurp(const fs::path& p) { return read_file_bytes(p); }

}  // namespace

TEST(Dataset, ByteIdenticalPerSeed) {
  const auto spec = small_run().data;
  const auto a = fresh_dir("ds_a"), b = fresh_dir("ds_b"), c = fresh_dir("ds_c");
  save_dataset(generate_dataset(spec, 9), a);
  save_dataset(generate_dataset(spec, 9), b);
  save_dataset(generate_dataset(spec, 10), c);
  EXPECT_EQ(slurp(a / "images.f32"), slurp(b / "images.f32"));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  EXPECT_NE(slurp(a / "images.f32"), slurp(c / "images.f32"));
}

TEST(Dataset, ArtifactOnlyInsideBox) {
  const auto spec = small_run().data;
  const auto sources = recirculated_sources(spec, 3);
  for (std::size_t id = 0; id < 60; ++id) {
    const RecirculatedSource* src = id % 5 == 0 ? &sources[id % sources.size()] : nullptr;
    const Label label = id % 2 || src ? Label::kFake : Label::kReal;
    const auto d = draw_item(spec, 3, id, label, src);
    if (label == Label::kReal) {
      EXPECT_FALSE(d.box);
      EXPECT_EQ(d.image, d.base);
      continue;
    }
    ASSERT_TRUE(d.box);
    bool any_inside = false;
    for (std::size_t r = 0; r < spec.height; ++r)
      for (std::size_t c = 0; c < spec.width; ++c) {
        const bool differs = d.image.at(r, c) != d.base.at(r, c);
        if (!d.box->contains(r, c)) EXPECT_FALSE(differs) << id << " @" << r << "," << c;
        any_inside = any_inside || differs;
      }
    EXPECT_TRUE(any_inside) << id;
    EXPECT_LE(d.box->area() * 4, spec.height * spec.width);
  }
}

TEST(Dataset, ExactBalanceAndValidPixels) {
  SyntheticSpec spec;
  spec.n_train = 200;
  spec.n_test = 200;
  const auto ds = generate_dataset(spec, 1);
  for (Split s : {Split::kTrain, Split::kTest}) {
    std::size_t fake = 0, copies = 0;
    for (const Sample* it : ds.split(s)) {
      fake += it->label == Label::kFake;
      copies += it->source.has_value();
      EXPECT_NO_THROW(it->image.validate());
      EXPECT_EQ(it->box.has_value(), it->label == Label::kFake);
    }
    EXPECT_EQ(fake, 100u);
    EXPECT_EQ(copies, 20u);
  }
}

TEST(Dataset, SaveLoadRoundTripAndHashCheck) {
  const auto ds = generate_dataset(small_run().data, 5);
  const auto dir = fresh_dir("ds_rt");
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.items.size(), ds.items.size());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    EXPECT_EQ(back.items[i].image, ds.items[i].image);
    EXPECT_EQ(back.items[i].label, ds.items[i].label);
    EXPECT_EQ(back.items[i].box, ds.items[i].box);
    EXPECT_EQ(back.items[i].source, ds.items[i].source);
  }
  {
    std::fstream f(dir / "images.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x7f');
  }
  EXPECT_THROW(load_dataset(dir), DataError);
  EXPECT_THROW(load_dataset(fresh_dir("ds_empty")), DataError);
}

TEST(Index, MatchesDatasetAndRebuildsIdentically) {
  const auto cfg = small_run();
  const auto ds = generate_dataset(cfg.data, cfg.seed);
  const auto enc = retrieval_encoder(cfg);
  const auto idx = build_index(enc, ds);
  const auto train = ds.split(Split::kTrain);
  ASSERT_EQ(idx.size(), cfg.data.n_train);
  for (std::size_t i = 0; i < train.size(); ++i) EXPECT_EQ(idx.label(i), train[i]->label);
  const auto dir = fresh_dir("idx");
  idx.save((dir / "a.rdxi").string());
  build_index(retrieval_encoder(cfg), ds).save((dir / "b.rdxi").string());
  EXPECT_EQ(slurp(dir / "a.rdxi"), slurp(dir / "b.rdxi"));
}

TEST(Prompts, ArmsDifferOnlyInReference) {
  auto cfg = small_run();
  const auto ds = generate_dataset(cfg.data, cfg.seed);
  const auto enc = retrieval_encoder(cfg);
  const auto idx = build_index(enc, ds);
  const Image& img = ds.split(Split::kTest).front()->image;

  cfg.arm = Arm::kNoRag;
  EXPECT_FALSE(PromptBuilder(cfg, enc, &idx, std::nullopt).summary(img, std::nullopt));

  cfg.arm = Arm::kStatic;
  const auto fixed = dataset_static_summary(ds, cfg.k);
  const PromptBuilder st(cfg, enc, nullptr, fixed);
  const auto s1 = st.summary(img, std::nullopt);
  const auto s2 = st.summary(ds.split(Split::kTest).back()->image, std::nullopt);
  ASSERT_TRUE(s1);
  EXPECT_EQ(s1->text, s2->text);
  EXPECT_EQ(s1->n_real + s1->n_fake, cfg.k);

  cfg.arm = Arm::kFullRag;
  const auto full = PromptBuilder(cfg, enc, &idx, std::nullopt).summary(img, std::nullopt);
  ASSERT_TRUE(full);
  EXPECT_EQ(full->k, cfg.k);
  EXPECT_THROW(PromptBuilder(cfg, enc, nullptr, std::nullopt), DataError);
}

TEST(Prompts, StaticCountsFollowTrainingSplit) {
  RunConfig cfg = small_run();
  const auto ds = generate_dataset(cfg.data, cfg.seed);
  const auto s = dataset_static_summary(ds, 10);
  EXPECT_EQ(s.n_real, 5u);
  EXPECT_EQ(s.n_fake, 5u);
}

TEST(Metrics, F1HandExample) {
  const Confusion c{8, 1, 2, 9};
  const auto f = fake_scores(c);
  EXPECT_NEAR(f.precision, 0.8889, 1e-4);
  EXPECT_NEAR(f.recall, 0.8, 1e-12);
  EXPECT_NEAR(f.f1, 0.8421, 1e-4);
  EXPECT_NEAR(f1_score(8, 1, 2), 16.0 / 19.0, 1e-12);
}

TEST(Metrics, AllCorrectAndFormatRate) {
  EvalAccumulator acc;
  const auto fake = parse_output("<think>a</think><answer>FAKE</answer>");
  const auto real = parse_output("<think>a</think><answer>REAL</answer>");
  for (int i = 0; i < 5; ++i) {
    acc.add(Label::kFake, fake, 0.7);
    acc.add(Label::kReal, real, std::nullopt);
  }
  auto r = acc.finish("full-rag", 3);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.real.f1, 1.0);
  EXPECT_EQ(r.fake.f1, 1.0);
  EXPECT_EQ(r.format_rate, 1.0);
  EXPECT_EQ(r.localized_fraction, 1.0);

  acc.add(Label::kFake, parse_output("junk"), 0.2);
  acc.add(Label::kReal, parse_output("<answer>REAL</answer>"), std::nullopt);
  r = acc.finish("full-rag", 3);
  EXPECT_EQ(r.malformed, 2u);
  EXPECT_NEAR(r.format_rate, 10.0 / 12.0, 1e-12);
  EXPECT_EQ(r.confusion.fn, 1u);
  EXPECT_EQ(r.confusion.fp, 1u);
  EXPECT_NEAR(r.localized_fraction, 5.0 / 6.0, 1e-12);
}

TEST(Config, ParsesKeysAndComments) {
  const auto c = parse_config(
      "# comment\n"
      "seed = 17\n"
      "arm = static   # trailing comment\n"
      "data.n_train = 50\n"
      "grpo.beta = 0.5\n"
      "policy.highpass_prior = false\n"
      "instruction = Look closely.\n");
  EXPECT_EQ(c.seed, 17u);
  EXPECT_EQ(c.policy.seed, 17u);
  EXPECT_EQ(c.grpo.seed, 17u);
  EXPECT_EQ(c.arm, Arm::kStatic);
  EXPECT_EQ(c.data.n_train, 50u);
  EXPECT_EQ(c.grpo.beta, 0.5);
  EXPECT_FALSE(c.policy.highpass_prior);
  EXPECT_EQ(c.instruction, "Look closely.");
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("nonsense"), ConfigError);
  EXPECT_THROW(parse_config("unknown.key = 1"), ConfigError);
  EXPECT_THROW(parse_config("seed = abc"), ConfigError);
  EXPECT_THROW(parse_config("seed = -3"), ConfigError);
  EXPECT_THROW(parse_config("grpo.beta = 1x"), ConfigError);
  EXPECT_THROW(parse_config("arm = sometimes"), ConfigError);
  EXPECT_THROW(parse_config("grpo.group = 1"), ConfigError);
  EXPECT_THROW(parse_config("data.n_train = 5\nk = 10"), ConfigError);
  EXPECT_THROW(parse_config("policy.patch = 5"), ConfigError);
  EXPECT_THROW(parse_config("data.fake_fraction = 2"), ConfigError);
  EXPECT_THROW(parse_config("policy.pretrain_format = maybe"), ConfigError);
  EXPECT_THROW(load_config(fresh_dir("cfg") / "missing.cfg"), ConfigError);
}

TEST(Checkpoint, RoundTripAndMismatch) {
  const auto cfg = small_run();
  const auto p = Policy::create(cfg.policy);
  const auto bytes = serialize_checkpoint(p);
  const auto back = deserialize_checkpoint(bytes, cfg.policy);
  EXPECT_EQ(back.full_hash(), p.full_hash());
  EXPECT_EQ(checkpoint_hash(back), checkpoint_hash(p));

  auto other = cfg.policy;
  other.embed_dim = 16;
  EXPECT_THROW(deserialize_checkpoint(bytes, other), ConfigError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1), cfg.policy),
               CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "z", cfg.policy), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint("XXXX" + bytes.substr(4), cfg.policy), CheckpointError);
}

TEST(Runlog, FixedKeyOrder) {
  StepMetrics m;
  m.step = 3;
  m.loss = 0.5;
  const auto line = runlog_line(m);
  EXPECT_EQ(line.find("{\"step\":3,\"mean_reward\":"), 0u);
  EXPECT_NE(line.find("\"aborted\":false"), std::string::npos);
}

TEST(Pipeline, CommandsEndToEndAndDeterministic) {
  auto run = [](const std::string& name) {
    const auto cfg = small_run();
    const Workspace ws{fresh_dir(name)};
    cmd_gen_data(cfg, ws);
    cmd_build_index(cfg, ws);
    const auto result = cmd_train(cfg, ws);
    EXPECT_EQ(result.trace.size(), cfg.steps);
    EXPECT_EQ(result.history.size(), 2u);
    EXPECT_TRUE(fs::exists(ws.report_path()));
    return std::pair{slurp(ws.runlog_path()), slurp(ws.checkpoint_path())};
  };
  const auto a = run("pipe_a"), b = run("pipe_b");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_FALSE(a.first.empty());
}

TEST(Pipeline, EvalDoesNotMutateCheckpoint) {
  const auto cfg = small_run(6);
  const Workspace ws{fresh_dir("eval")};
  cmd_gen_data(cfg, ws);
  cmd_build_index(cfg, ws);
  cmd_train(cfg, ws);
  const auto before = slurp(ws.checkpoint_path());
  const auto r1 = cmd_eval(cfg, ws);
  const auto r2 = cmd_eval(cfg, ws);
  EXPECT_EQ(slurp(ws.checkpoint_path()), before);
  EXPECT_EQ(r1.accuracy, r2.accuracy);
  EXPECT_EQ(r1.n, cfg.data.n_test);
}

TEST(Pipeline, MissingInputsAreDataErrors) {
  const auto cfg = small_run();
  const Workspace ws{fresh_dir("missing")};
  EXPECT_THROW(cmd_build_index(cfg, ws), DataError);
  EXPECT_THROW(cmd_train(cfg, ws), DataError);
  EXPECT_THROW(cmd_eval(cfg, ws), DataError);
  cmd_gen_data(cfg, ws);
  EXPECT_THROW(cmd_train(cfg, ws), DataError);  // full-rag needs the index
}

TEST(Pipeline, InferIsRepeatableAndWritesOverlay) {
  const auto cfg = small_run(7);
  const Workspace ws{fresh_dir("infer")};
  const auto ds = cmd_gen_data(cfg, ws);
  cmd_build_index(cfg, ws);
  cmd_train(cfg, ws);
  const auto img_path = ws.root / "x.f32";
  {
    std::ofstream out(img_path, std::ios::binary);
    for (double p : ds.items.back().image.pixels) {
      const float f = static_cast<float>(p);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  const auto a = cmd_infer(cfg, ws, img_path, ws.root / "sal.ppm");
  const auto b = cmd_infer(cfg, ws, img_path, std::nullopt);
  EXPECT_EQ(a.prediction.text, b.prediction.text);
  ASSERT_TRUE(a.reference);
  const auto ov = read_ppm((ws.root / "sal.ppm").string());
  EXPECT_EQ(ov.height, 16u);
  EXPECT_EQ(ov.width, 16u);

  std::ofstream(ws.root / "short.f32") << "abc";
  EXPECT_THROW(cmd_infer(cfg, ws, ws.root / "short.f32", std::nullopt), DataError);
}

TEST(Pipeline, BaseIsTheUntrainedPolicy) {
  auto cfg = small_run();
  cfg.arm = Arm::kNoRag;
  const auto ds = generate_dataset(cfg.data, cfg.seed);
  const auto enc = retrieval_encoder(cfg);
  const auto data = prepare(cfg, ds, enc, nullptr);
  const auto base = evaluate_base(cfg, data);
  const auto direct = evaluate(Policy::create(cfg.policy), data.test, data.test_ctx, "no-rag", 0);
  EXPECT_EQ(base.accuracy, direct.accuracy);
  EXPECT_EQ(base.n, cfg.data.n_test);
  EXPECT_GE(base.format_rate, 0.5);
}

// Smoothed median group reward should not fall over a short run on the real task.
TEST(Pipeline, RewardTrendsUpward) {
  RunConfig cfg;
  cfg.steps = 300;
  cfg.eval_every = 0;
  cfg.data.n_test = 20;
  cfg.seed = 2;
  cfg.finalize().validate();
  const auto ds = generate_dataset(cfg.data, cfg.seed);
  const auto enc = retrieval_encoder(cfg);
  const auto idx = build_index(enc, ds);
  const auto result = train(cfg, prepare(cfg, ds, enc, &idx));
  auto window_mean = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += result.trace[i].mean_reward;
    return s / static_cast<double>(to - from);
  };
  EXPECT_GE(window_mean(200, 300), window_mean(0, 100));
}
