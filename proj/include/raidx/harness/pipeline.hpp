#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raidx/format.hpp"
#include "raidx/grpo.hpp"
#include "raidx/harness/checkpoint.hpp"
#include "raidx/harness/config.hpp"
#include "raidx/harness/dataset.hpp"
#include "raidx/harness/metrics.hpp"
#include "raidx/harness/runlog.hpp"
#include "raidx/image.hpp"
#include "raidx/policy/policy.hpp"
#include "raidx/retrieval.hpp"
#include "raidx/saliency.hpp"

namespace raidx {

namespace fs = std::filesystem;

/// Artifact locations under an output directory.
struct Workspace {
  fs::path root;

  fs::path dataset_dir() const { return root / "dataset"; }
  fs::path index_path() const { return root / "index.rdxi"; }
  fs::path checkpoint_dir() const { return root / "ckpt"; }
  fs::path checkpoint_path() const { return checkpoint_dir() / "policy.rdxc"; }
  fs::path runlog_path() const { return root / "runlog.jsonl"; }
  fs::path report_path() const { return root / "report.json"; }
};

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// The retrieval encoder is the policy as initialised: its [CLS] embeddings
/// build the index once and embed every later query, so training never
/// invalidates the index.
inline Policy retrieval_encoder(const RunConfig& cfg) { return Policy::create(cfg.policy); }

inline std::vector<const Sample*> require_split(const Dataset& ds, Split s) {
  auto items = ds.split(s);
  if (items.empty())
    throw DataError(std::string("dataset has no ") + (s == Split::kTrain ? "train" : "test") +
                    " items");
  return items;
}

inline void check_dataset_matches(const Dataset& ds, const RunConfig& cfg) {
  if (ds.height != cfg.policy.image_height || ds.width != cfg.policy.image_width)
    throw ConfigError("dataset images are " + std::to_string(ds.height) + "x" +
                      std::to_string(ds.width) + " but the config expects " +
                      std::to_string(cfg.policy.image_height) + "x" +
                      std::to_string(cfg.policy.image_width));
}

/// Index over the training split, in split order (index id i = i-th train item).
inline EmbeddingIndex build_index(const Policy& encoder, const Dataset& ds) {
  std::vector<std::vector<double>> emb;
  std::vector<Label> labels;
  for (const Sample* s : require_split(ds, Split::kTrain)) {
    emb.push_back(encode_image(encoder, s->image).cls_embedding);
    labels.push_back(s->label);
  }
  return EmbeddingIndex::build(emb, labels);
}

/// Static-arm counts: the training split's label proportions scaled to k.
inline RetrievalSummary dataset_static_summary(const Dataset& ds, std::size_t k) {
  const auto train = require_split(ds, Split::kTrain);
  std::size_t real = 0;
  for (const Sample* s : train) real += s->label == Label::kReal;
  const auto r = static_cast<std::size_t>(
      std::llround(static_cast<double>(k * real) / static_cast<double>(train.size())));
  return static_summary(k, r, k - r);
}

/// Builds prompts for one arm. Only the reference sentence differs between arms.
class PromptBuilder {
 public:
  PromptBuilder(const RunConfig& cfg, const Policy& encoder, const EmbeddingIndex* index,
                std::optional<RetrievalSummary> static_summary)
      : cfg_(cfg), encoder_(encoder), index_(index), static_(std::move(static_summary)) {
    if (cfg.arm == Arm::kFullRag && !index_)
      throw DataError("the full-rag arm needs an index (run build-index first)");
    if (cfg.arm == Arm::kStatic && !static_)
      throw DataError("the static arm needs dataset label counts");
    if (index_ && index_->dim() != cfg.policy.embed_dim)
      throw ConfigError("index dim " + std::to_string(index_->dim()) +
                        " does not match embed_dim " + std::to_string(cfg.policy.embed_dim));
  }

  /// `exclude` is the item's own index id when the image is itself indexed.
  std::optional<RetrievalSummary> summary(const Image& img,
                                          std::optional<std::size_t> exclude) const {
    switch (cfg_.arm) {
      case Arm::kNoRag: return std::nullopt;
      case Arm::kStatic: return static_;
      case Arm::kFullRag: {
        const auto q = encode_image(encoder_, img).cls_embedding;
        return summarize(exclude ? index_->top_k_excluding(q, cfg_.k, *exclude)
                                 : index_->top_k(q, cfg_.k));
      }
    }
    return std::nullopt;
  }

  std::vector<int> tokens(const Image& img, std::optional<std::size_t> exclude) const {
    return build_prompt(encoder_.prompt_tokenizer(), cfg_.instruction, summary(img, exclude));
  }

 private:
  const RunConfig& cfg_;
  const Policy& encoder_;
  const EmbeddingIndex* index_;
  std::optional<RetrievalSummary> static_;
};

struct Prediction {
  std::vector<int> tokens;
  std::string text;
  FormatVerdict verdict;
};

inline Prediction predict(const Policy& policy, const QueryContext& ctx) {
  Prediction p;
  p.tokens = sample_group(policy, SnapshotTag::kCurrent, ctx, 1, 0.0, 0).front().tokens;
  p.text = policy.vocab().render(p.tokens);
  p.verdict = parse_output(p.text);
  return p;
}

inline SaliencyMap saliency_map(const Policy& policy, const Image& img, bool residual = false) {
  const auto enc = encode_image(policy, img);
  const auto& c = policy.config();
  if (c.grid_h() != c.grid_w())
    throw SaliencyError("saliency needs a square patch grid");
  return upsample_bilinear(cls_to_patch(rollout(enc.attention, residual)), c.grid_h(),
                           img.height, img.width);
}

/// Greedy decoding over prepared test contexts; saliency mass on every FAKE item.
inline EvalReport evaluate(const Policy& policy, const std::vector<const Sample*>& items,
                           const std::vector<QueryContext>& contexts, std::string arm,
                           std::size_t step) {
  EvalAccumulator acc;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Sample& s = *items[i];
    const auto pred = predict(policy, contexts[i]);
    std::optional<double> mass;
    if (s.label == Label::kFake && s.box) {
      const auto map = saliency_map(policy, s.image);
      mass = top_decile_mass_in_box(map, s.box->row0, s.box->col0, s.box->row1, s.box->col1);
    }
    acc.add(s.label, pred.verdict, mass);
  }
  return acc.finish(std::move(arm), step);
}

/// Prompt contexts for both splits, fixed for the whole run.
struct PreparedData {
  std::vector<const Sample*> train, test;
  std::vector<QueryContext> train_ctx, test_ctx;
};

inline PreparedData prepare(const RunConfig& cfg, const Dataset& ds, const Policy& encoder,
                            const EmbeddingIndex* index) {
  check_dataset_matches(ds, cfg);
  std::optional<RetrievalSummary> fixed;
  if (cfg.arm == Arm::kStatic) fixed = dataset_static_summary(ds, cfg.k);
  const PromptBuilder prompts(cfg, encoder, index, fixed);
  PreparedData p;
  p.train = require_split(ds, Split::kTrain);
  p.test = require_split(ds, Split::kTest);
  if (index && index->size() != p.train.size())
    throw DataError("index holds " + std::to_string(index->size()) + " vectors but the dataset has " +
                    std::to_string(p.train.size()) + " training items");
  for (std::size_t i = 0; i < p.train.size(); ++i)
    p.train_ctx.push_back(encoder.context(p.train[i]->image, prompts.tokens(p.train[i]->image, i)));
  for (const Sample* s : p.test)
    p.test_ctx.push_back(encoder.context(s->image, prompts.tokens(s->image, std::nullopt)));
  return p;
}

struct TrainResult {
  Policy policy;
  std::vector<StepMetrics> trace;
  std::vector<EvalReport> history;  // periodic evaluations, last one at the final step
};

using EvalCallback = std::function<void(const EvalReport&)>;

/// The GRPO loop. Batches are drawn uniformly with replacement from the
/// training split; every random choice descends from cfg.seed.
inline TrainResult train(const RunConfig& cfg, const PreparedData& data, RunLog* log = nullptr,
                         const EvalCallback& on_eval = {}) {
  TrainResult out{Policy::create(cfg.policy), {}, {}};
  GrpoTrainer trainer(out.policy, cfg.grpo);
  Rng rng(Rng::mix(cfg.seed, 0x7472));
  const std::string arm(to_string(cfg.arm));
  auto eval_now = [&](std::size_t step) {
    out.history.push_back(evaluate(out.policy, data.test, data.test_ctx, arm, step));
    if (on_eval) on_eval(out.history.back());
  };
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<TrainQuery> batch;
    for (std::size_t b = 0; b < cfg.grpo.batch_size; ++b) {
      const std::size_t i = rng.below(data.train.size());
      batch.push_back({data.train[i]->id, data.train_ctx[i], data.train[i]->label});
    }
    out.trace.push_back(trainer.train_step(batch, rng));
    if (log) log->write(out.trace.back());
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps)
      eval_now(step + 1);
  }
  eval_now(cfg.steps);
  return out;
}

inline EvalReport evaluate_base(const RunConfig& cfg, const PreparedData& data) {
  return evaluate(Policy::create(cfg.policy), data.test, data.test_ctx,
                  std::string(to_string(cfg.arm)), 0);
}

// ---------------------------------------------------------------------------
// Commands. Each reads and writes only files under the workspace.

inline Dataset cmd_gen_data(const RunConfig& cfg, const Workspace& ws) {
  Dataset ds = generate_dataset(cfg.data, cfg.seed);
  save_dataset(ds, ws.dataset_dir());
  return ds;
}

inline Dataset load_workspace_dataset(const Workspace& ws) {
  if (!fs::exists(ws.dataset_dir() / "manifest.json"))
    throw DataError("no dataset in " + ws.dataset_dir().string() + " (run gen-data first)");
  return load_dataset(ws.dataset_dir());
}

inline EmbeddingIndex load_workspace_index(const Workspace& ws) {
  if (!fs::exists(ws.index_path()))
    throw DataError("no index at " + ws.index_path().string() + " (run build-index first)");
  try {
    return EmbeddingIndex::load(ws.index_path().string());
  } catch (const IndexFormatError& e) {
    throw DataError(e.what());
  }
}

inline EmbeddingIndex cmd_build_index(const RunConfig& cfg, const Workspace& ws) {
  const Dataset ds = load_workspace_dataset(ws);
  check_dataset_matches(ds, cfg);
  const auto index = build_index(retrieval_encoder(cfg), ds);
  index.save(ws.index_path().string());
  return index;
}

inline nlohmann::ordered_json history_json(const std::vector<EvalReport>& h) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : h) arr.push_back(to_json(r));
  return arr;
}

inline TrainResult cmd_train(const RunConfig& cfg, const Workspace& ws,
                             const EvalCallback& on_eval = {}) {
  const Dataset ds = load_workspace_dataset(ws);
  std::optional<EmbeddingIndex> index;
  if (cfg.arm == Arm::kFullRag) index = load_workspace_index(ws);
  const Policy encoder = retrieval_encoder(cfg);
  const auto data = prepare(cfg, ds, encoder, index ? &*index : nullptr);
  RunLog log(ws.runlog_path());
  auto result = train(cfg, data, &log, on_eval);
  log.flush();
  save_checkpoint(result.policy, ws.checkpoint_path());
  nlohmann::ordered_json report;
  report["command"] = "train";
  report["checkpoint_hash"] = checkpoint_hash(result.policy);
  report["final"] = to_json(result.history.back());
  report["history"] = history_json(result.history);
  write_json(ws.report_path(), report);
  return result;
}

inline EvalReport cmd_eval(const RunConfig& cfg, const Workspace& ws) {
  const Dataset ds = load_workspace_dataset(ws);
  if (!fs::exists(ws.checkpoint_path()))
    throw DataError("no checkpoint at " + ws.checkpoint_path().string() + " (run train first)");
  const Policy policy = load_checkpoint(ws.checkpoint_path(), cfg.policy);
  std::optional<EmbeddingIndex> index;
  if (cfg.arm == Arm::kFullRag) index = load_workspace_index(ws);
  const Policy encoder = retrieval_encoder(cfg);
  const auto data = prepare(cfg, ds, encoder, index ? &*index : nullptr);
  const auto report = evaluate(policy, data.test, data.test_ctx, std::string(to_string(cfg.arm)),
                               cfg.steps);
  nlohmann::ordered_json j;
  j["command"] = "eval";
  j["checkpoint_hash"] = checkpoint_hash(policy);
  j["final"] = to_json(report);
  write_json(ws.report_path(), j);
  return report;
}

/// Reads a binary PGM (P5, maxval <= 255) or a raw little-endian float32 grid
/// of exactly height×width values (any other extension).
inline Image read_image_file(const fs::path& path, std::size_t height, std::size_t width) {
  const std::string bytes = read_file_bytes(path);
  Image img;
  if (path.extension() == ".pgm") {
    std::istringstream in(bytes);
    std::string magic;
    std::size_t w = 0, h = 0;
    int maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P5" || maxval <= 0 || maxval > 255)
      throw DataError("unsupported PGM header in " + path.string());
    in.get();
    const auto off = static_cast<std::size_t>(in.tellg());
    if (bytes.size() != off + w * h) throw DataError("PGM pixel data truncated: " + path.string());
    img = {h, w, std::vector<double>(w * h)};
    for (std::size_t i = 0; i < w * h; ++i)
      img.pixels[i] = static_cast<unsigned char>(bytes[off + i]) / static_cast<double>(maxval);
  } else {
    if (bytes.size() != height * width * 4)
      throw DataError(path.string() + ": expected " + std::to_string(height * width * 4) +
                      " bytes of float32 pixels, found " + std::to_string(bytes.size()));
    img = {height, width, std::vector<double>(height * width)};
    for (std::size_t i = 0; i < height * width; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
      img.pixels[i] = std::bit_cast<float>(bits);
    }
  }
  try {
    img.validate();
  } catch (const ImageError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (img.height != height || img.width != width)
    throw DataError(path.string() + " is " + std::to_string(img.height) + "x" +
                    std::to_string(img.width) + ", expected " + std::to_string(height) + "x" +
                    std::to_string(width));
  return img;
}

struct InferResult {
  Prediction prediction;
  std::optional<RetrievalSummary> reference;
  std::optional<fs::path> overlay;
};

inline InferResult cmd_infer(const RunConfig& cfg, const Workspace& ws, const fs::path& image,
                             const std::optional<fs::path>& saliency_out) {
  if (!fs::exists(ws.checkpoint_path()))
    throw DataError("no checkpoint at " + ws.checkpoint_path().string() + " (run train first)");
  const Policy policy = load_checkpoint(ws.checkpoint_path(), cfg.policy);
  const Image img = read_image_file(image, cfg.policy.image_height, cfg.policy.image_width);
  std::optional<EmbeddingIndex> index;
  std::optional<RetrievalSummary> fixed;
  if (cfg.arm == Arm::kFullRag) index = load_workspace_index(ws);
  if (cfg.arm == Arm::kStatic) fixed = dataset_static_summary(load_workspace_dataset(ws), cfg.k);
  const Policy encoder = retrieval_encoder(cfg);
  const PromptBuilder prompts(cfg, encoder, index ? &*index : nullptr, fixed);
  InferResult r;
  r.reference = prompts.summary(img, std::nullopt);
  r.prediction = predict(policy, policy.context(img, build_prompt(policy.prompt_tokenizer(),
                                                                 cfg.instruction, r.reference)));
  if (saliency_out) {
    const auto map = saliency_map(policy, img);
    write_ppm(jet_overlay(img.pixels, img.height, img.width, map, 0.5), saliency_out->string());
    r.overlay = saliency_out;
  }
  return r;
}

struct AblationRow {
  Arm arm = Arm::kNoRag;
  bool grpo = false;
  EvalReport report;
};

/// Trains every arm on the same dataset and seed with the same budget, and
/// evaluates the untrained policy under each arm's prompts.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const Workspace& ws,
                                           const EvalCallback& on_eval = {}) {
  Dataset ds;
  if (fs::exists(ws.dataset_dir() / "manifest.json"))
    ds = load_workspace_dataset(ws);
  else
    ds = cmd_gen_data(cfg, ws);
  check_dataset_matches(ds, cfg);
  const Policy encoder = retrieval_encoder(cfg);
  EmbeddingIndex index = fs::exists(ws.index_path()) ? load_workspace_index(ws)
                                                     : build_index(encoder, ds);
  if (!fs::exists(ws.index_path())) index.save(ws.index_path().string());

  std::vector<AblationRow> rows;
  auto table = nlohmann::ordered_json::array();
  for (Arm arm : {Arm::kNoRag, Arm::kStatic, Arm::kFullRag}) {
    RunConfig c = cfg;
    c.arm = arm;
    const auto data = prepare(c, ds, encoder, &index);
    rows.push_back({arm, false, evaluate_base(c, data)});
    const Workspace sub{ws.root / "ablate" / std::string(to_string(arm))};
    fs::create_directories(sub.root);
    RunLog log(sub.runlog_path());
    auto result = train(c, data, &log, on_eval);
    save_checkpoint(result.policy, sub.checkpoint_path());
    rows.push_back({arm, true, result.history.back()});
  }
  for (const auto& r : rows) {
    auto j = to_json(r.report);
    j["grpo"] = r.grpo;
    table.push_back(std::move(j));
  }
  nlohmann::ordered_json report;
  report["command"] = "ablate";
  report["rows"] = std::move(table);
  write_json(ws.root / "ablation.json", report);
  return rows;
}

}  // namespace raidx
