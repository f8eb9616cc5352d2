#include "redguard/reward.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "redguard/error.hpp"
#include "redguard/text.hpp"

namespace redguard {

Violations RewardConfig::check() const {
  Violations v;
  if (!(tau >= 0.0 && tau < 1.0)) v.emplace_back("reward.tau must lie in [0, 1)");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) v.emplace_back("reward.weights must be non-negative");
    sum += w;
  }
  if (std::fabs(sum - 1.0) > 1e-9) v.emplace_back("reward.weights must sum to 1");
  return v;
}

double safety_reward(const RewriteCandidate& rewrite, const GuardBackend& guard) {
  if (rewrite.rewritten_text.empty()) throw Error(ErrorKind::InvalidInput, "empty rewrite");
  try {
    return std::clamp(guard.guard_score(rewrite.rewritten_text).p_safe, 0.0, 1.0);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::BackendUnavailable) throw Error(ErrorKind::RewardUnavailable, e.what());
    throw;
  }
}

double semantic_reward(const JointTriple& triple, const RewriteCandidate& rewrite,
                       const Embedder& embedder, const RewardConfig& config) {
  std::string surrogate = triple.image.caption;
  if (surrogate.empty()) {
    spdlog::warn("triple {} has no caption; using keyword \"{}\" as image surrogate", triple.id,
                 triple.keyword.lemma);
    surrogate = triple.keyword.lemma;
  }
  try {
    const auto joint = embedder.embed_text(surrogate + config.separator + rewrite.rewritten_text);
    const auto original = embedder.embed_text(triple.text.text);
    return cosine(joint.values, original.values);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::BackendUnavailable) throw Error(ErrorKind::RewardUnavailable, e.what());
    throw;
  }
}

double overlap_from_cosines(std::span<const double> cosines, double tau) {
  if (cosines.empty()) throw Error(ErrorKind::RewardUnavailable, "overlap over an empty token set");
  double total = 0.0;
  for (double c : cosines) total += std::max(0.0, c - tau);
  const double r = 1.0 - total / static_cast<double>(cosines.size());
  // cos <= 1 bounds each term by 1 - tau; clamp absorbs rounding.
  return std::clamp(r, tau, 1.0);
}

double overlap_reward(const RewriteCandidate& rewrite, const JointTriple& triple,
                      const Embedder& embedder, const RewardConfig& config) {
  std::vector<std::string> tokens;
  try {
    tokens = tokenize(rewrite.rewritten_text);
  } catch (const Error& e) {
    throw Error(ErrorKind::RewardUnavailable, e.what());
  }
  try {
    const auto image = embedder.embed_image(triple.image);
    std::vector<double> cosines;
    cosines.reserve(tokens.size());
    for (const auto& t : tokens) cosines.push_back(cosine(embedder.embed_text(t).values, image.values));
    return overlap_from_cosines(cosines, config.tau);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::BackendUnavailable || e.kind() == ErrorKind::AssetNotFound) {
      throw Error(ErrorKind::RewardUnavailable, e.what());
    }
    throw;
  }
}

double combine(double r_safety, double r_sim, double r_overlap, const RewardConfig& config) {
  auto bad = [](double v, double lo, double hi) { return !std::isfinite(v) || v < lo || v > hi; };
  if (bad(r_safety, 0.0, 1.0)) throw Error(ErrorKind::InvalidReward, fmt::format("r_safety {} out of [0,1]", r_safety));
  if (bad(r_sim, -1.0, 1.0)) throw Error(ErrorKind::InvalidReward, fmt::format("r_sim {} out of [-1,1]", r_sim));
  if (bad(r_overlap, config.tau, 1.0)) {
    throw Error(ErrorKind::InvalidReward, fmt::format("r_overlap {} out of [tau,1]", r_overlap));
  }
  const auto& w = config.weights;
  return w[0] * r_safety + w[1] * r_sim + w[2] * r_overlap;
}

RewardBreakdown score(const JointTriple& triple, const RewriteCandidate& rewrite,
                      const RewardBackends& backends, const RewardConfig& config) {
  RewardBreakdown b;
  b.tau = config.tau;
  b.weights = config.weights;
  auto component = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::RewardUnavailable || e.kind() == ErrorKind::BackendUnavailable) {
        throw ScoreIncomplete(name, e.what());
      }
      throw;
    }
  };
  b.r_safety = component("safety", [&] { return safety_reward(rewrite, backends.guard); });
  b.r_sim = component("semantic", [&] { return semantic_reward(triple, rewrite, backends.embedder, config); });
  b.r_overlap = component("overlap", [&] { return overlap_reward(rewrite, triple, backends.embedder, config); });
  b.r_combined = combine(b.r_safety, b.r_sim, b.r_overlap, config);
  b.kl = 0.0;
  b.kl_lambda = 0.0;
  b.objective = b.r_combined;
  return b;
}

RewardEngine::RewardEngine(RewardBackends backends, RewardConfig config)
    : backends_(backends), config_(std::move(config)) {
  if (auto v = config_.check(); !v.empty()) throw Error(ErrorKind::ConfigError, v.front());
}

RewardBreakdown RewardEngine::score(const JointTriple& triple, const RewriteCandidate& rewrite) const {
  return redguard::score(triple, rewrite, backends_, config_);
}

}  // namespace redguard
