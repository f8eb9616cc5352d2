#pragma once

#include <array>
#include <span>
#include <string>

#include "redguard/backends.hpp"
#include "redguard/domain.hpp"

namespace redguard {

struct RewardConfig {
  double tau = 0.2;
  std::array<double, 3> weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  // Joins the image caption and the rewritten text into one textual input.
  std::string separator = " [SEP] ";

  Violations check() const;
};

// Probability the guard assigns to "safe" for the rewritten text alone.
double safety_reward(const RewriteCandidate& rewrite, const GuardBackend& guard);

// Cosine between embed(caption + separator + rewrite) and embed(original query).
double semantic_reward(const JointTriple& triple, const RewriteCandidate& rewrite,
                       const Embedder& embedder, const RewardConfig& config);

// 1 - mean over cosines of max(0, cos - tau). Exposed separately so the
// arithmetic can be checked without an embedder.
double overlap_from_cosines(std::span<const double> token_image_cosines, double tau);

// Overlap reward over the rewrite's token set against the triple's image.
double overlap_reward(const RewriteCandidate& rewrite, const JointTriple& triple,
                      const Embedder& embedder, const RewardConfig& config);

// Convex weighted sum. Throws InvalidReward on out-of-range components.
double combine(double r_safety, double r_sim, double r_overlap, const RewardConfig& config);

struct RewardBackends {
  const GuardBackend& guard;
  const Embedder& embedder;
};

// Anything that turns a candidate into a reward breakdown. The optimizer
// only sees this interface.
class Scorer {
 public:
  virtual ~Scorer() = default;
  // kl and objective are left for the optimizer (kl = 0, objective = r_combined).
  virtual RewardBreakdown score(const JointTriple& triple, const RewriteCandidate& rewrite) const = 0;
};

// All three components plus their combination. Any component failure is
// reported as ScoreIncomplete naming the component; nothing is zero-filled.
RewardBreakdown score(const JointTriple& triple, const RewriteCandidate& rewrite,
                      const RewardBackends& backends, const RewardConfig& config);

class RewardEngine final : public Scorer {
 public:
  RewardEngine(RewardBackends backends, RewardConfig config);
  RewardBreakdown score(const JointTriple& triple, const RewriteCandidate& rewrite) const override;
  const RewardConfig& config() const { return config_; }

 private:
  RewardBackends backends_;
  RewardConfig config_;
};

}  // namespace redguard
