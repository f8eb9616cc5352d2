#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "redguard/backends.hpp"
#include "redguard/domain.hpp"
#include "redguard/mock_backends.hpp"
#include "redguard/reward.hpp"

namespace redguard {

enum class BaselineKind { BatchMean, MovingAverage };

struct PPOConfig {
  double clip_epsilon = 0.2;
  double kl_lambda = 0.05;
  double learning_rate = 0.1;
  // Triples drawn per iteration (cycling through the training set).
  int batch_size = 8;
  int samples_per_triple = 4;
  int iterations = 100;
  // Gradient passes over each rollout buffer.
  int epochs = 4;
  // Gradient L2 norm cap per step; 0 disables.
  double max_grad_norm = 1.0;
  BaselineKind baseline = BaselineKind::BatchMean;
  double baseline_decay = 0.9;
  bool normalize_advantages = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  // Acceptance thresholds for emitted samples.
  double accept_safety = 0.5;
  double accept_semantic = 0.3;

  Violations check() const;
};

Json ppo_config_to_json(const PPOConfig& c);
PPOConfig ppo_config_from_json(const Json& j, PPOConfig defaults = {});

struct RolloutEntry {
  std::string triple_id;
  RewriteCandidate candidate;
  RewardBreakdown reward;
  double ref_logprob = 0.0;
  // Log-probability of the sampled action under the policy that produced it.
  double old_action_logprob = 0.0;

  bool operator==(const RolloutEntry&) const = default;
};

struct RolloutBuffer {
  int iteration = 0;
  std::vector<RolloutEntry> entries;
  std::size_t skipped = 0;

  bool operator==(const RolloutBuffer&) const = default;
};

Json rollout_buffer_to_json(const RolloutBuffer& b);
RolloutBuffer rollout_buffer_from_json(const Json& j);

struct TrainingMetrics {
  int iteration = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double policy_loss = 0.0;
  double accept_rate = 0.0;

  bool operator==(const TrainingMetrics&) const = default;
};

std::string metrics_to_csv(const std::vector<TrainingMetrics>& series);

// Per-sample estimator log pi(x) - log pi_ref(x). Its batch mean estimates
// KL(pi || pi_ref); single terms can be negative. Throws KLUndefined when the
// reference gives the sample no probability.
double kl_log_ratio(double logprob, double ref_logprob);
double kl_term(const JointTriple& context, const PolicySample& sample, const Policy& ref_policy);

// Non-negative per-sample estimator (r - 1) - log r with r = pi_ref / pi.
// Same expectation as kl_log_ratio under samples from pi; this is the value
// stored in RewardBreakdown::kl and penalized in the objective.
double kl_nonnegative(double logprob, double ref_logprob);

// min(r * A, clip(r, 1 - eps, 1 + eps) * A)
double clipped_surrogate(double ratio, double advantage, double clip_epsilon);

RolloutBuffer rollout(std::span<const JointTriple> triples, const Policy& policy,
                      const Policy& ref_policy, const Scorer& scorer, int n_per_triple,
                      double kl_lambda, int iteration, Rng& rng);

struct BaselineState {
  bool initialized = false;
  double value = 0.0;
};

TrainingMetrics ppo_update(const RolloutBuffer& buffer, std::span<const JointTriple> triples,
                           TrainablePolicy& policy, const PPOConfig& config,
                           BaselineState& baseline);

bool accepted(const RewardBreakdown& reward, const PPOConfig& config);

struct TrainOptions {
  // Empty disables checkpointing.
  std::filesystem::path checkpoint_dir;
  std::optional<std::filesystem::path> resume_from;
  // Stop after this many completed iterations (interruption hook); -1 runs to the end.
  int stop_after = -1;
  // Fingerprint of everything that must match on resume.
  std::string config_hash;
};

struct TrainResult {
  std::vector<TrainingMetrics> metrics;
  // Accepted candidates across all iterations, first occurrence per (triple, text).
  std::vector<ScoredRewrite> samples;
  int completed_iterations = 0;
  std::optional<std::filesystem::path> last_checkpoint;
};

TrainResult train(std::span<const JointTriple> triples, TrainablePolicy& policy,
                  const Policy& ref_policy, const Scorer& scorer, const PPOConfig& config,
                  const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Baseline rewrite strategies for ablations.

enum class RewriteStrategy { Ppo, InContext, Sft };

std::string_view to_string(RewriteStrategy s);
RewriteStrategy parse_rewrite_strategy(std::string_view s);

struct Demonstration {
  JointTriple context;
  std::string rewritten_text;
};

struct StrategyBackends {
  const Policy* ppo_policy = nullptr;
  const Policy* sft_policy = nullptr;
  const TextGenerator* rewriter = nullptr;
  const std::vector<Demonstration>* demonstrations = nullptr;
  std::size_t k_demonstrations = 3;
};

// Prompt carrying min(k, pool size) demonstrations followed by the target triple.
std::string build_in_context_prompt(const JointTriple& triple, std::span<const Demonstration> pool,
                                    std::size_t k);

RewriteCandidate rewrite_with_strategy(const JointTriple& triple, RewriteStrategy strategy,
                                       const StrategyBackends& backends, Rng& rng);

// Maximum-likelihood template weights from demonstrations (add-`smoothing` counts).
CategoricalPolicy fit_sft_policy(const CategoricalPolicy& base, std::span<const Demonstration> demos,
                                 double smoothing = 1.0);

}  // namespace redguard
