#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "raidx/image.hpp"
#include "raidx/numerics/graph.hpp"
#include "raidx/policy/vocabulary.hpp"
#include "raidx/retrieval.hpp"
#include "raidx/rng.hpp"
#include "raidx/saliency.hpp"

namespace raidx {

struct PolicyConfig {
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t patch = 8;
  std::size_t embed_dim = 16;
  std::size_t layers = 2;
  std::size_t heads = 1;  // >1 splits embed_dim; rollout sees the head average
  std::size_t hidden = 32;
  std::size_t prompt_dim = 16;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::size_t max_len = 24;
  std::size_t max_prompt_len = 64;
  std::size_t vocab_size = 0;  // 0: standard vocabulary; n: synthetic t0..t{n-2},<eos>
  bool pretrain_format = true;
  bool highpass_prior = true;  // see Policy::apply_highpass_prior
  std::size_t pretrain_iters = 600;
  double pretrain_lr = 2.0;
  double format_noise = 0.02;  // uniform mass mixed into the pretraining targets
  std::uint64_t seed = 0;

  std::size_t grid_h() const { return image_height / patch; }
  std::size_t grid_w() const { return image_width / patch; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t patch_feature_dim() const { return patch * patch + kPatchStatFeatures; }

  /// Canonical key=value rendering of every field; stored in checkpoints.
  std::string echo() const {
    std::ostringstream o;
    o.precision(17);
    o << "image_height=" << image_height << ";image_width=" << image_width
      << ";patch=" << patch << ";embed_dim=" << embed_dim << ";layers=" << layers
      << ";heads=" << heads << ";hidden=" << hidden << ";prompt_dim=" << prompt_dim
      << ";lora_rank=" << lora_rank << ";lora_alpha=" << lora_alpha << ";max_len=" << max_len
      << ";max_prompt_len=" << max_prompt_len << ";vocab_size=" << vocab_size
      << ";pretrain_format=" << pretrain_format << ";highpass_prior=" << highpass_prior << ";pretrain_iters=" << pretrain_iters
      << ";pretrain_lr=" << pretrain_lr << ";format_noise=" << format_noise
      << ";seed=" << seed;
    return o.str();
  }

  void validate() const {
    if (patch == 0 || image_height % patch || image_width % patch)
      throw ShapeError("policy config: image size not divisible by patch size");
    if (heads == 0 || embed_dim % heads)
      throw ShapeError("policy config: embed_dim not divisible by heads");
    if (layers == 0 || hidden == 0 || prompt_dim == 0 || lora_rank == 0 || max_len == 0)
      throw ShapeError("policy config: zero-sized dimension");
    if (highpass_prior && embed_dim < 2)
      throw ShapeError("policy config: highpass_prior needs embed_dim >= 2");
  }
};

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = false;
};

enum class SnapshotTag { kCurrent, kOld, kRef };

inline std::string_view to_string(SnapshotTag t) {
  switch (t) {
    case SnapshotTag::kCurrent: return "theta";
    case SnapshotTag::kOld: return "old";
    case SnapshotTag::kRef: return "ref";
  }
  return "?";
}

struct PolicySample {
  std::vector<int> tokens;
  std::vector<double> token_logprobs;
  double total_logprob = 0.0;
  SnapshotTag snapshot = SnapshotTag::kCurrent;
};

/// Per-query constant inputs: stem features of the image and the pooled prompt
/// embedding.
struct QueryContext {
  Tensor patches;
  Tensor prompt;
};

struct EncoderPass {
  Var tokens;  // (T+1)×d final token states
  Var cls;     // 1×d
  AttentionStack attention;
};

struct EncodedImage {
  Tensor features;
  std::vector<double> cls_embedding;  // unit length
  AttentionStack attention;
};

/// Toy vision-language policy: patch-attention encoder with a [CLS] token, and
/// a one-layer conditional token head (previous token + [CLS] state + prompt
/// embedding → next-token logits). Decoder weights are frozen; low-rank
/// adapters on its image, prompt and output projections are trainable, as is
/// the whole encoder.
class Policy {
 public:
  /// Parameter slots, in storage order.
  enum Slot : std::size_t {
    kPatchProj,
    kCls,
    kPos,
    kDecTokEmbed,
    kDecImg,
    kDecPrompt,
    kDecBias,
    kDecOut,
    kDecOutBias,
    kImgDown,
    kImgUp,
    kPromptDown,
    kPromptUp,
    kOutDown,
    kOutUp,
    kPromptEmbed,
    kPromptPos,
    kFirstLayer,  // then 4 per layer: wq, wk, wv, wo
  };

  static Policy create(const PolicyConfig& cfg) {
    cfg.validate();
    Policy p(cfg);
    p.initialize();
    if (cfg.pretrain_format && cfg.vocab_size == 0) p.pretrain_format_prior();
    return p;
  }

  /// Empty policy with the right parameter names and shapes (for checkpoint loading).
  static Policy skeleton(const PolicyConfig& cfg) {
    cfg.validate();
    Policy p(cfg);
    p.allocate();
    return p;
  }

  const PolicyConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const PromptTokenizer& prompt_tokenizer() const { return ptok_; }
  int bos() const { return static_cast<int>(vocab_.size()); }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::size_t slot) { return params_.at(slot); }
  const Parameter& parameter(std::size_t slot) const { return params_.at(slot); }
  static std::size_t layer_slot(std::size_t layer, std::size_t which) {
    return kFirstLayer + 4 * layer + which;
  }

  /// Names of the trainable set: every encoder weight and every adapter factor.
  std::vector<std::string> trainable_parameters() const {
    std::vector<std::string> names;
    for (const auto& p : params_)
      if (p.trainable) names.push_back(p.name);
    return names;
  }

  std::size_t trainable_scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  /// FNV-1a over the frozen parameters' bytes.
  std::uint64_t frozen_hash() const { return hash_params(false); }
  std::uint64_t full_hash() const {
    return hash_params(true) ^ (hash_params(false) * 0x100000001B3ULL);
  }

  double adapter_scale() const {
    return cfg_.lora_alpha / static_cast<double>(cfg_.lora_rank);
  }

  /// Pooled prompt embedding: Σ_j embed[t_j] ⊙ pos[j] / √n.
  Tensor prompt_feature(const std::vector<int>& prompt_tokens) const {
    Tensor p(1, cfg_.prompt_dim);
    if (prompt_tokens.empty()) return p;
    const Tensor& emb = params_[kPromptEmbed].value;
    const Tensor& pos = params_[kPromptPos].value;
    for (std::size_t j = 0; j < prompt_tokens.size(); ++j) {
      const auto t = static_cast<std::size_t>(prompt_tokens[j]);
      if (t >= emb.rows()) throw VocabularyError("prompt token id out of range");
      const std::size_t pj = std::min(j, cfg_.max_prompt_len - 1);
      for (std::size_t c = 0; c < cfg_.prompt_dim; ++c) p(0, c) += emb(t, c) * pos(pj, c);
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(prompt_tokens.size()));
    for (double& v : p.data()) v *= s;
    return p;
  }

  QueryContext context(const Image& img, const std::vector<int>& prompt_tokens) const {
    if (img.height != cfg_.image_height || img.width != cfg_.image_width)
      throw ShapeError("image is " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + ", policy expects " +
                       std::to_string(cfg_.image_height) + "x" +
                       std::to_string(cfg_.image_width));
    return {patch_features(img, cfg_.patch), prompt_feature(prompt_tokens)};
  }

  /// Places every parameter on `g` as a leaf. Trainable parameters require
  /// gradients when `track` is set; frozen ones never do.
  std::vector<Var> bind(Graph& g, bool track) const {
    std::vector<Var> v;
    v.reserve(params_.size());
    for (const auto& p : params_) v.push_back(g.leaf(p.value, track && p.trainable));
    return v;
  }

  EncoderPass encode(Graph& g, const std::vector<Var>& w, const Tensor& patches) const {
    const std::size_t t = cfg_.num_patches();
    if (patches.rows() != t || patches.cols() != cfg_.patch_feature_dim())
      throw ShapeError("encode: patch features " + patches.shape_string());
    const std::size_t n = t + 1, d = cfg_.embed_dim;

    Tensor put_cls(n, 1), put_patches(n, t);
    put_cls(0, 0) = 1.0;
    for (std::size_t i = 0; i < t; ++i) put_patches(i + 1, i) = 1.0;
    Var x = g.constant(patches);
    Var z = g.matmul(g.constant(put_cls), w[kCls]) +
            g.matmul(g.constant(put_patches), g.matmul(x, w[kPatchProj]));
    z = z + w[kPos];

    EncoderPass out;
    const std::size_t h = cfg_.heads, dh = d / h;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      Var q = g.matmul(z, w[layer_slot(l, 0)]);
      Var k = g.matmul(z, w[layer_slot(l, 1)]);
      Var v = g.matmul(z, w[layer_slot(l, 2)]);
      Var mixed;
      Tensor avg(n, n);
      for (std::size_t head = 0; head < h; ++head) {
        Var qh = q, kh = k, vh = v;
        std::optional<Var> sel;
        if (h > 1) {
          Tensor s(d, dh);
          for (std::size_t c = 0; c < dh; ++c) s(head * dh + c, c) = 1.0;
          sel = g.constant(std::move(s));
          qh = g.matmul(q, *sel);
          kh = g.matmul(k, *sel);
          vh = g.matmul(v, *sel);
        }
        Var a = g.softmax_rows(g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt));
        for (std::size_t i = 0; i < n * n; ++i) avg[i] += a.value()[i] / static_cast<double>(h);
        Var o = g.matmul(a, vh);
        if (sel) o = g.matmul(o, g.transpose(*sel));
        mixed = head == 0 ? o : mixed + o;
      }
      out.attention.push_back(std::move(avg));
      z = z + g.tanh(g.matmul(mixed, w[layer_slot(l, 3)]));
    }
    Tensor pick(1, n);
    pick(0, 0) = 1.0;
    out.tokens = z;
    out.cls = g.matmul(g.constant(std::move(pick)), z);
    return out;
  }

  /// Next-token logits for each row of `prev` (BOS is id vocab().size()).
  Var logits(Graph& g, const std::vector<Var>& w, Var cls, const Tensor& prompt,
             const std::vector<int>& prev) const {
    const std::size_t rows = prev.size();
    const double s = adapter_scale();
    Tensor onehot(rows, vocab_.size() + 1);
    for (std::size_t i = 0; i < rows; ++i) {
      if (prev[i] < 0 || static_cast<std::size_t>(prev[i]) > vocab_.size())
        throw VocabularyError("previous token id out of range");
      onehot(i, static_cast<std::size_t>(prev[i])) = 1.0;
    }
    Var ones = g.constant(Tensor(rows, 1, 1.0));
    Var p = g.constant(prompt);

    Var img = g.matmul(cls, w[kDecImg]) +
              s * g.matmul(g.matmul(cls, w[kImgDown]), w[kImgUp]);
    Var pr = g.matmul(p, w[kDecPrompt]) +
             s * g.matmul(g.matmul(p, w[kPromptDown]), w[kPromptUp]);
    Var pre = g.matmul(g.constant(std::move(onehot)), w[kDecTokEmbed]) + g.matmul(ones, img);
    pre = pre + g.matmul(ones, pr);
    pre = pre + g.matmul(ones, w[kDecBias]);
    Var hid = g.tanh(pre);
    Var out = g.matmul(hid, w[kDecOut]) + s * g.matmul(g.matmul(hid, w[kOutDown]), w[kOutUp]);
    return out + g.matmul(ones, w[kDecOutBias]);
  }

 private:
  explicit Policy(const PolicyConfig& cfg)
      : cfg_(cfg),
        vocab_(cfg.vocab_size == 0 ? Vocabulary::standard()
                                   : Vocabulary::synthetic(cfg.vocab_size)) {}

  void add(std::string name, std::size_t r, std::size_t c, bool trainable) {
    params_.push_back({std::move(name), Tensor(r, c), trainable});
  }

  void allocate() {
    const std::size_t d = cfg_.embed_dim, hdim = cfg_.hidden, e = cfg_.prompt_dim;
    const std::size_t r = cfg_.lora_rank, v = vocab_.size();
    params_.clear();
    add("encoder.patch_proj", cfg_.patch_feature_dim(), d, true);
    add("encoder.cls", 1, d, true);
    add("encoder.pos", cfg_.num_patches() + 1, d, true);
    add("decoder.tok_embed", v + 1, hdim, false);
    add("decoder.w_img", d, hdim, false);
    add("decoder.w_prompt", e, hdim, false);
    add("decoder.b_hidden", 1, hdim, false);
    add("decoder.w_out", hdim, v, false);
    add("decoder.b_out", 1, v, false);
    add("adapter.img.down", d, r, true);
    add("adapter.img.up", r, hdim, true);
    add("adapter.prompt.down", e, r, true);
    add("adapter.prompt.up", r, hdim, true);
    add("adapter.out.down", hdim, r, true);
    add("adapter.out.up", r, v, true);
    add("prompt.embed", ptok_.size(), e, false);
    add("prompt.pos", cfg_.max_prompt_len, e, false);
    for (std::size_t l = 0; l < cfg_.layers; ++l)
      for (const char* nm : {"wq", "wk", "wv", "wo"})
        add("encoder.layer" + std::to_string(l) + "." + nm, d, d, true);
  }

  void initialize() {
    allocate();
    Rng rng(Rng::mix(cfg_.seed, 0x504f4c));
    auto fill = [&](std::size_t slot, double sd) {
      for (double& x : params_[slot].value.data()) x = sd * rng.normal();
    };
    const double d = static_cast<double>(cfg_.embed_dim);
    const double f = static_cast<double>(cfg_.patch_feature_dim());
    fill(kPatchProj, 1.0 / std::sqrt(f));
    // The two stem statistics get unit-scale weights so they are not drowned
    // out by the many pixel inputs.
    for (std::size_t row = cfg_.patch * cfg_.patch; row < cfg_.patch_feature_dim(); ++row)
      for (std::size_t c = 0; c < cfg_.embed_dim; ++c)
        params_[kPatchProj].value(row, c) = rng.normal();
    fill(kCls, 0.5);
    fill(kPos, 0.1);
    for (std::size_t l = 0; l < cfg_.layers; ++l)
      for (std::size_t k = 0; k < 4; ++k) fill(layer_slot(l, k), 1.0 / std::sqrt(d));
    if (cfg_.highpass_prior) apply_highpass_prior();

    fill(kDecTokEmbed, 1.0);
    fill(kDecImg, 0.1 / std::sqrt(d));
    fill(kDecPrompt, 0.1 / std::sqrt(static_cast<double>(cfg_.prompt_dim)));
    fill(kDecOut, 1.0 / std::sqrt(static_cast<double>(cfg_.hidden)));

    fill(kImgDown, 1.0 / std::sqrt(d));
    fill(kPromptDown, 1.0 / std::sqrt(static_cast<double>(cfg_.prompt_dim)));
    fill(kOutDown, 1.0 / std::sqrt(static_cast<double>(cfg_.hidden)));
    // adapter up-factors stay zero: the adapted policy starts equal to the base

    // Frozen prompt embeddings. Integer tokens share a magnitude direction so
    // counts are comparable; words are plain random vectors.
    fill(kPromptEmbed, 1.0);
    fill(kPromptPos, 1.0);
    std::vector<double> magnitude(cfg_.prompt_dim);
    for (double& m : magnitude) m = rng.normal();
    for (int n = 0; n <= PromptTokenizer::kMaxNumber; ++n) {
      const auto id = static_cast<std::size_t>(*ptok_.number_id(n));
      for (std::size_t c = 0; c < cfg_.prompt_dim; ++c)
        params_[kPromptEmbed].value(id, c) =
            (static_cast<double>(n) / 10.0) * magnitude[c] + 0.1 * rng.normal();
    }
  }

  // Channel 0 of every token carries the patch's high-frequency energy and
  // channel 1 is constant. In the last layer the query reads channel 1 and the
  // key reads channel 0, so that layer starts out attending to high-energy
  // patches; earlier layers stay generic and mix in global context. Output
  // projections leave both channels alone. All of it stays trainable.
  static constexpr double kEnergyGain = 3.0;
  static constexpr double kQueryGain = 3.5;
  static constexpr double kKeyGain = 3.5;

  void apply_highpass_prior() {
    const std::size_t d = cfg_.embed_dim;
    Tensor& proj = params_[kPatchProj].value;
    for (std::size_t row = 0; row < proj.rows(); ++row) proj(row, 0) = proj(row, 1) = 0.0;
    proj(cfg_.patch * cfg_.patch + 1, 0) = kEnergyGain;
    params_[kCls].value(0, 0) = params_[kCls].value(0, 1) = 0.0;
    Tensor& pos = params_[kPos].value;
    for (std::size_t row = 0; row < pos.rows(); ++row) {
      pos(row, 0) = 0.0;
      pos(row, 1) = 1.0;
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      Tensor& wo = params_[layer_slot(l, 3)].value;
      for (std::size_t row = 0; row < d; ++row) wo(row, 0) = wo(row, 1) = 0.0;
    }
    Tensor& wq = params_[layer_slot(cfg_.layers - 1, 0)].value;
    Tensor& wk = params_[layer_slot(cfg_.layers - 1, 1)].value;
    for (std::size_t row = 0; row < d; ++row) wq(row, 0) = wk(row, 0) = 0.0;
    wq(1, 0) = kQueryGain;
    wk(0, 0) = kKeyGain;
  }

  // Fits the frozen decoder (token embedding, hidden bias, output layer) to a
  // next-token distribution that follows the <think>/<answer> grammar with a
  // 50/50 verdict, so the base emits well-formed but uninformed outputs.
  void pretrain_format_prior() {
    const auto& vb = vocab_;
    const std::size_t v = vb.size();
    const int think = vb.require("<think>"), think_end = vb.require("</think>");
    const int answer = vb.require("<answer>"), answer_end = vb.require("</answer>");
    const int real = vb.require("REAL"), fake = vb.require("FAKE");
    std::vector<int> words;
    for (std::size_t i = 0; i < v; ++i) {
      const auto& s = vb.token(static_cast<int>(i));
      if (!Vocabulary::is_tag(s) && s != "REAL" && s != "FAKE") words.push_back(static_cast<int>(i));
    }

    std::vector<int> contexts = {bos(), think, think_end, answer, real, fake, answer_end};
    contexts.insert(contexts.end(), words.begin(), words.end());
    Tensor target(contexts.size(), v);
    auto row_for = [&](std::size_t r, int prev) {
      auto put = [&](int tok, double p) { target(r, static_cast<std::size_t>(tok)) += p; };
      if (prev == bos()) {
        put(think, 1.0);
      } else if (prev == think) {
        for (int w : words) put(w, 1.0 / static_cast<double>(words.size()));
      } else if (prev == think_end) {
        put(answer, 1.0);
      } else if (prev == answer) {
        put(real, 0.5);
        put(fake, 0.5);
      } else if (prev == real || prev == fake) {
        put(answer_end, 1.0);
      } else if (prev == answer_end) {
        put(vb.eos(), 1.0);
      } else {  // a reasoning word
        put(think_end, 0.5);
        for (int w : words) put(w, 0.5 / static_cast<double>(words.size()));
      }
    };
    for (std::size_t r = 0; r < contexts.size(); ++r) row_for(r, contexts[r]);
    const double eps = cfg_.format_noise;
    for (double& t : target.data()) t = (1.0 - eps) * t + eps / static_cast<double>(v);

    const std::size_t fit[] = {kDecTokEmbed, kDecBias, kDecOut, kDecOutBias};
    const Tensor zero_cls(1, cfg_.embed_dim);
    const Tensor zero_prompt(1, cfg_.prompt_dim);
    const double inv_rows = 1.0 / static_cast<double>(contexts.size());
    for (std::size_t it = 0; it < cfg_.pretrain_iters; ++it) {
      Graph g;
      std::vector<Var> w;
      for (std::size_t i = 0; i < params_.size(); ++i) {
        bool on = false;
        for (std::size_t s : fit) on = on || s == i;
        w.push_back(g.leaf(params_[i].value, on));
      }
      Var lg = logits(g, w, g.constant(zero_cls), zero_prompt, contexts);
      Var ce = g.scale(g.sum(g.mul(g.constant(target), g.log(g.softmax_rows(lg)))), -inv_rows);
      const auto grads = g.backward(ce);
      for (std::size_t s : fit) {
        const Tensor& gr = grads[w[s]];
        auto& val = params_[s].value.data();
        for (std::size_t i = 0; i < val.size(); ++i) val[i] -= cfg_.pretrain_lr * gr[i];
      }
    }
  }

  std::uint64_t hash_params(bool trainable) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) {
      if (p.trainable != trainable) continue;
      for (char c : p.name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001B3ULL;
      for (double x : p.value.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int b = 0; b < 8; ++b)
          h = (h ^ ((bits >> (8 * b)) & 0xFF)) * 0x100000001B3ULL;
      }
    }
    return h;
  }

  PolicyConfig cfg_;
  Vocabulary vocab_;
  PromptTokenizer ptok_;
  std::vector<Parameter> params_;
};

/// Immutable copy of a policy used as π_old or π_ref.
struct PolicySnapshot {
  std::shared_ptr<const Policy> policy;
  SnapshotTag tag = SnapshotTag::kOld;
};

inline PolicySnapshot snapshot(const Policy& p, SnapshotTag tag) {
  return {std::make_shared<const Policy>(p), tag};
}

/// Instruction tokens, then the reference sentence when one is given.
inline std::vector<int> build_prompt(const PromptTokenizer& tok, std::string_view instruction,
                                     const std::optional<RetrievalSummary>& summary) {
  std::vector<int> ids = tok.encode(instruction);
  if (summary) {
    const auto extra = tok.encode(summary->text);
    ids.insert(ids.end(), extra.begin(), extra.end());
  }
  return ids;
}

inline EncodedImage encode_image(const Policy& policy, const Image& img) {
  img.validate();
  const auto ctx = policy.context(img, {});
  Graph g;
  const auto w = policy.bind(g, false);
  auto pass = policy.encode(g, w, ctx.patches);
  EncodedImage out;
  out.features = pass.tokens.value();
  out.attention = std::move(pass.attention);
  const Tensor& c = pass.cls.value();
  const double n = kernels::l2_norm(c);
  out.cls_embedding.resize(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out.cls_embedding[i] = n > 0.0 ? c[i] / n : 0.0;
  return out;
}

/// Per-row log-probabilities of `targets` under logits (rows×V), as rows×1.
inline Var target_logprobs(Graph& g, Var logits, const std::vector<int>& targets) {
  Tensor pick(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < targets.size(); ++i)
    pick(i, static_cast<std::size_t>(targets[i])) = 1.0;
  Var logp = g.log(g.softmax_rows(logits));
  return g.matmul(g.mul(logp, g.constant(std::move(pick))),
                  g.constant(Tensor(logits.cols(), 1, 1.0)));
}

/// Differentiable log π(o|q) for each sequence, as a (#seqs)×1 node.
inline Var score_sequences(Graph& g, const Policy& policy, const std::vector<Var>& w,
                           const QueryContext& ctx,
                           const std::vector<std::vector<int>>& seqs) {
  const auto& vb = policy.vocab();
  std::vector<int> prev, target;
  std::vector<std::size_t> owner;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    if (seqs[s].empty()) throw VocabularyError("sequence_logprob: empty token sequence");
    for (std::size_t t = 0; t < seqs[s].size(); ++t) {
      const int tok = seqs[s][t];
      if (tok < 0 || static_cast<std::size_t>(tok) >= vb.size())
        throw VocabularyError("sequence_logprob: token id " + std::to_string(tok) +
                              " not in vocabulary");
      prev.push_back(t == 0 ? policy.bos() : seqs[s][t - 1]);
      target.push_back(tok);
      owner.push_back(s);
    }
  }
  const auto enc = policy.encode(g, w, ctx.patches);
  Var lp = target_logprobs(g, policy.logits(g, w, enc.cls, ctx.prompt, prev), target);
  Tensor seg(seqs.size(), owner.size());
  for (std::size_t r = 0; r < owner.size(); ++r) seg(owner[r], r) = 1.0;
  return g.matmul(g.constant(std::move(seg)), lp);
}

inline double sequence_logprob(const Policy& policy, const QueryContext& ctx,
                               const std::vector<int>& tokens) {
  Graph g;
  const auto w = policy.bind(g, false);
  return score_sequences(g, policy, w, ctx, {tokens}).value()[0];
}

/// Draws G sequences in lock-step. Recorded log-probabilities are under the
/// sampling policy at temperature 1; `temperature` only shapes the draw
/// (0 means greedy, ties to the lowest id).
inline std::vector<PolicySample> sample_group(const Policy& policy, SnapshotTag tag,
                                              const QueryContext& ctx, std::size_t group,
                                              double temperature, std::uint64_t seed) {
  if (group == 0) throw ContractError("sample_group: empty group");
  if (temperature < 0.0) throw ContractError("sample_group: negative temperature");
  Rng rng(seed);
  Graph g;
  const auto w = policy.bind(g, false);
  const auto enc = policy.encode(g, w, ctx.patches);
  const int eos = policy.vocab().eos();
  const std::size_t v = policy.vocab().size();

  std::vector<PolicySample> out(group);
  for (auto& s : out) s.snapshot = tag;
  std::vector<int> prev(group, policy.bos());
  std::vector<bool> done(group, false);
  for (std::size_t step = 0; step < policy.config().max_len; ++step) {
    Var lg = policy.logits(g, w, enc.cls, ctx.prompt, prev);
    Var logp = g.log(g.softmax_rows(lg));
    bool any = false;
    for (std::size_t i = 0; i < group; ++i) {
      if (done[i]) continue;
      std::size_t pick = 0;
      if (temperature == 0.0) {
        for (std::size_t j = 1; j < v; ++j)
          if (lg.value()(i, j) > lg.value()(i, pick)) pick = j;
      } else {
        double mx = lg.value()(i, 0);
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lg.value()(i, j));
        std::vector<double> p(v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += (p[j] = std::exp((lg.value()(i, j) - mx) / temperature));
        double u = rng.uniform() * z;
        pick = v - 1;
        for (std::size_t j = 0; j < v; ++j) {
          if (u < p[j]) {
            pick = j;
            break;
          }
          u -= p[j];
        }
      }
      const double lp = logp.value()(i, pick);
      auto& s = out[i];
      s.tokens.push_back(static_cast<int>(pick));
      s.token_logprobs.push_back(lp);
      s.total_logprob += lp;
      prev[i] = static_cast<int>(pick);
      if (static_cast<int>(pick) == eos) done[i] = true;
      any = any || !done[i];
    }
    if (!any) break;
  }
  return out;
}

}  // namespace raidx
