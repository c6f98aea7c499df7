#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "raidx/format.hpp"
#include "raidx/numerics/graph.hpp"
#include "raidx/policy/policy.hpp"
#include "raidx/rng.hpp"

namespace raidx {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GrpoConfig {
  std::size_t group = 8;
  double epsilon = 0.2;
  double beta = 0.04;
  double learning_rate = 1e-2;
  double sigma_floor = 1e-6;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double max_grad_norm = 1.0;
  std::size_t steps_per_old_refresh = 1;
  double temperature = 1.0;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (group < 2) throw ConfigError("grpo: group size must be >= 2");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("grpo: epsilon must be in (0, 1)");
    if (!(beta >= 0.0)) throw ConfigError("grpo: beta must be >= 0");
    if (!(sigma_floor > 0.0)) throw ConfigError("grpo: sigma_floor must be > 0");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("grpo: max_grad_norm must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("grpo: learning_rate must be >= 0");
    if (steps_per_old_refresh == 0) throw ConfigError("grpo: steps_per_old_refresh must be >= 1");
    if (batch_size == 0) throw ConfigError("grpo: batch_size must be >= 1");
    if (temperature < 0.0) throw ConfigError("grpo: temperature must be >= 0");
  }
};

struct RewardBreakdown {
  std::vector<int> accuracy;
  std::vector<int> format;
  std::vector<double> total;
};

inline RewardBreakdown compute_rewards(const Vocabulary& vocab,
                                       const std::vector<PolicySample>& samples, Label gold) {
  RewardBreakdown r;
  for (const auto& s : samples) {
    const auto verdict = parse_output(vocab.render(s.tokens));
    const int fmt = verdict.well_formed() ? 1 : 0;
    const int acc = accuracy_reward(verdict, gold);
    r.format.push_back(fmt);
    r.accuracy.push_back(acc);
    r.total.push_back(static_cast<double>(acc + fmt));
  }
  return r;
}

/// (r_i − mean) / population-std; all zeros when the std is at or below the floor.
inline std::vector<double> normalize_advantages(const std::vector<double>& rewards,
                                                double sigma_floor) {
  if (rewards.size() < 2) throw ContractError("normalize_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sigma = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (!(sigma > sigma_floor)) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / sigma;
  return a;
}

inline constexpr double kKlRatioMin = 1e-8;
inline constexpr double kKlRatioMax = 1e8;

/// ρ − log ρ − 1 with ρ = π_ref/π_θ, computed from log-probabilities with ρ
/// clamped to [1e-8, 1e8].
inline double kl_penalty(double logprob_theta, double logprob_ref) {
  const double log_rho =
      std::clamp(logprob_ref - logprob_theta, std::log(kKlRatioMin), std::log(kKlRatioMax));
  return std::exp(log_rho) - log_rho - 1.0;
}

/// min(ρ'·A, clip(ρ', 1−ε, 1+ε)·A) with the sequence-level ratio ρ' = π_θ/π_old.
inline double clipped_term(double logprob_theta, double logprob_old, double advantage,
                           double epsilon) {
  const double ratio = std::exp(logprob_theta - logprob_old);
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

/// Graph form of kl_penalty; differentiable in `logprob_theta`.
inline Var kl_penalty(Graph& g, Var logprob_theta, double logprob_ref) {
  Var log_rho = g.clip(g.constant(Tensor::scalar(logprob_ref)) - logprob_theta,
                       std::log(kKlRatioMin), std::log(kKlRatioMax));
  return g.exp(log_rho) - log_rho - g.constant(Tensor::scalar(1.0));
}

/// Graph form of clipped_term. For A ≥ 0 the min reduces to min(ρ', 1+ε)·A and
/// for A < 0 to max(ρ', 1−ε)·A, so one clip with sign-dependent bounds suffices.
inline Var clipped_term(Graph& g, Var logprob_theta, double logprob_old, double advantage,
                        double epsilon) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  Var ratio = g.exp(logprob_theta - g.constant(Tensor::scalar(logprob_old)));
  Var bounded = advantage >= 0.0 ? g.clip(ratio, -inf, 1.0 + epsilon)
                                 : g.clip(ratio, 1.0 - epsilon, inf);
  return g.scale(bounded, advantage);
}

/// One query's group: samples drawn from π_old with their rewards and advantages.
struct GroupRollout {
  std::size_t image_id = 0;
  std::vector<PolicySample> samples;
  RewardBreakdown rewards;
  std::vector<double> advantages;
  std::vector<double> ref_logprobs;
};

struct ObjectiveStats {
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
};

/// Negated GRPO objective for one group:
///   −(1/G) Σ_i [ clipped_term_i − β · kl_i ].
inline Var grpo_objective(Graph& g, const Policy& policy, const std::vector<Var>& w,
                          const QueryContext& ctx, const GroupRollout& group,
                          const GrpoConfig& cfg, ObjectiveStats* stats = nullptr) {
  const std::size_t n = group.samples.size();
  if (n == 0 || group.advantages.size() != n || group.ref_logprobs.size() != n)
    throw ContractError("grpo_objective: incomplete group");
  std::vector<std::vector<int>> seqs;
  for (const auto& s : group.samples) seqs.push_back(s.tokens);
  Var lp = score_sequences(g, policy, w, ctx, seqs);

  std::optional<Var> acc;
  std::size_t clipped = 0;
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor pick(1, n);
    pick(0, i) = 1.0;
    Var lp_i = g.matmul(g.constant(std::move(pick)), lp);
    const double a = group.advantages[i];
    const double old = group.samples[i].total_logprob;
    Var surrogate = clipped_term(g, lp_i, old, a, cfg.epsilon);
    Var kl = kl_penalty(g, lp_i, group.ref_logprobs[i]);
    Var term = surrogate - g.scale(kl, cfg.beta);
    acc = acc ? *acc + term : term;

    const double ratio = std::exp(lp_i.value()[0] - old);
    if ((a > 0.0 && ratio > 1.0 + cfg.epsilon) || (a < 0.0 && ratio < 1.0 - cfg.epsilon))
      ++clipped;
    kl_sum += kl.value()[0];
  }
  if (stats) {
    stats->clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
    stats->mean_kl = kl_sum / static_cast<double>(n);
  }
  return g.scale(*acc, -1.0 / static_cast<double>(n));
}

struct TrainQuery {
  std::size_t image_id = 0;
  QueryContext ctx;
  Label gold = Label::kReal;
};

struct StepMetrics {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_abs_adv = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double update_norm = 0.0;
  double format_rate = 0.0;
  double accuracy_rate = 0.0;
  bool aborted = false;
};

/// Owns the GRPO loop state: the reference snapshot (fixed at construction),
/// the π_old snapshot (refreshed on a cadence) and the step counter.
class GrpoTrainer {
 public:
  GrpoTrainer(Policy& policy, GrpoConfig cfg)
      : policy_(policy), cfg_(std::move(cfg)), ref_(snapshot(policy, SnapshotTag::kRef)) {
    cfg_.validate();
  }

  const GrpoConfig& config() const { return cfg_; }
  const PolicySnapshot& reference() const { return ref_; }
  std::size_t steps_done() const { return step_; }

  /// Samples groups under π_old, scores them, and returns the rollouts.
  GroupRollout rollout(const TrainQuery& q, std::uint64_t seed) {
    refresh_old_if_due();
    GroupRollout r;
    r.image_id = q.image_id;
    r.samples = sample_group(*old_.policy, SnapshotTag::kOld, q.ctx, cfg_.group,
                             cfg_.temperature, seed);
    r.rewards = compute_rewards(policy_.vocab(), r.samples, q.gold);
    r.advantages = normalize_advantages(r.rewards.total, cfg_.sigma_floor);
    std::vector<std::vector<int>> seqs;
    for (const auto& s : r.samples) seqs.push_back(s.tokens);
    Graph g;
    const auto w = ref_.policy->bind(g, false);
    const Var lp = score_sequences(g, *ref_.policy, w, q.ctx, seqs);
    r.ref_logprobs = lp.value().data();
    return r;
  }

  StepMetrics train_step(const std::vector<TrainQuery>& batch, Rng& rng) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    refresh_old_if_due();
    StepMetrics m;
    m.step = step_;

    Graph g;
    const auto w = policy_.bind(g, true);
    std::optional<Var> total;
    double reward_sum = 0.0, abs_adv = 0.0, fmt = 0.0, acc = 0.0;
    for (const auto& q : batch) {
      const auto group = rollout(q, rng.next_u64());
      ObjectiveStats st;
      Var loss = grpo_objective(g, policy_, w, q.ctx, group, cfg_, &st);
      total = total ? *total + loss : loss;
      for (std::size_t i = 0; i < group.samples.size(); ++i) {
        reward_sum += group.rewards.total[i];
        abs_adv += std::abs(group.advantages[i]);
        fmt += group.rewards.format[i];
        acc += group.rewards.accuracy[i];
      }
      m.clip_fraction += st.clip_fraction;
      m.mean_kl += st.mean_kl;
    }
    const double nb = static_cast<double>(batch.size());
    const double ns = nb * static_cast<double>(cfg_.group);
    Var loss = g.scale(*total, 1.0 / nb);
    m.loss = loss.value()[0];
    m.mean_reward = reward_sum / ns;
    m.mean_abs_adv = abs_adv / ns;
    m.format_rate = fmt / ns;
    m.accuracy_rate = acc / ns;
    m.clip_fraction /= nb;
    m.mean_kl /= nb;

    const auto grads = g.backward(loss);
    double sq = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (policy_.parameters()[i].trainable)
        for (double x : grads[w[i]].data()) sq += x * x;
    m.grad_norm = std::sqrt(sq);
    if (!std::isfinite(m.grad_norm) || !std::isfinite(m.loss)) {
      m.aborted = true;
      ++step_;
      return m;
    }
    double step = cfg_.learning_rate;
    if (cfg_.max_grad_norm > 0.0 && m.grad_norm > cfg_.max_grad_norm)
      step *= cfg_.max_grad_norm / m.grad_norm;
    for (std::size_t i = 0; i < w.size(); ++i) {
      auto& p = policy_.parameters()[i];
      if (!p.trainable) continue;
      const Tensor& gr = grads[w[i]];
      for (std::size_t j = 0; j < p.value.size(); ++j) p.value[j] -= step * gr[j];
    }
    m.update_norm = step * m.grad_norm;
    ++step_;
    return m;
  }

 private:
  void refresh_old_if_due() {
    if (old_step_ == step_ && old_.policy) return;
    if (!old_.policy || step_ % cfg_.steps_per_old_refresh == 0) {
      old_ = snapshot(policy_, SnapshotTag::kOld);
      old_step_ = step_;
    }
  }

  Policy& policy_;
  GrpoConfig cfg_;
  PolicySnapshot ref_;
  PolicySnapshot old_;
  std::size_t step_ = 0;
  std::size_t old_step_ = 0;
};

}  // namespace raidx
