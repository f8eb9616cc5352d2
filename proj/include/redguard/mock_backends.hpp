#pragma once

#include <map>
#include <string>
#include <vector>

#include "redguard/backends.hpp"

namespace redguard {

// Deterministic stand-in for a sentence / cross-modal encoder. Every word
// token seeds its own Gaussian vector; a text embeds to the mean of its
// token vectors, renormalized. Images embed through their captions.
class HashEmbedder final : public Embedder {
 public:
  explicit HashEmbedder(std::size_t dimension = 64, std::uint64_t seed = 0);

  std::size_t dimension() const override { return dimension_; }
  EmbeddingVector embed_text(std::string_view text) const override;
  EmbeddingVector embed_image(const ImageAsset& asset) const override;
  std::string id() const override;

  // Unnormalized Gaussian vector for a single token.
  std::vector<double> token_vector(std::string_view token) const;

 private:
  std::size_t dimension_;
  std::uint64_t seed_;
};

class MockGuard final : public GuardBackend {
 public:
  struct Rule {
    // Lowercase substring that selects this rule; first match wins.
    std::string contains;
    double logit_safe = 0.0;
    double logit_unsafe = 0.0;
  };

  MockGuard(double default_logit_safe, double default_logit_unsafe, std::vector<Rule> rules = {},
            std::map<std::string, double> lexicon = {});

  static MockGuard constant(double logit_safe, double logit_unsafe) {
    return MockGuard(logit_safe, logit_unsafe);
  }

  // Logits before the softmax: a matching rule, otherwise the defaults with
  // each distinct lexicon word adding its weight to the unsafe logit.
  std::pair<double, double> logits(std::string_view text) const;
  GuardScore guard_score(std::string_view text) const override;
  std::string id() const override { return "mock-guard"; }

 private:
  double default_safe_;
  double default_unsafe_;
  std::vector<Rule> rules_;
  std::map<std::string, double> lexicon_;
};

// Categorical distribution over rewrite templates with trainable logits.
// Placeholders: {text}, {keyword}, {caption}, {masked} (the query with the
// keyword replaced by "this").
class CategoricalPolicy final : public TrainablePolicy {
 public:
  CategoricalPolicy(std::vector<std::string> templates, std::vector<double> logits);
  // Zero weights map to kLogProbSentinel logits (outside the support).
  static CategoricalPolicy from_weights(std::vector<std::string> templates,
                                        const std::vector<double>& weights);

  const std::vector<std::string>& templates() const { return templates_; }
  std::vector<double> probabilities() const;
  std::string render(const JointTriple& context, int action) const;

  std::vector<PolicySample> sample(const JointTriple& context, int n, Rng& rng) const override;
  double logprob(const JointTriple& context, std::string_view text) const override;
  std::string id() const override { return "categorical-policy"; }

  std::vector<double> parameters() const override { return logits_; }
  void set_parameters(std::vector<double> params) override;
  double action_logprob(const JointTriple& context, int action) const override;
  std::vector<double> action_logprob_grad(const JointTriple& context, int action) const override;
  std::unique_ptr<TrainablePolicy> clone() const override;

 private:
  std::vector<std::string> templates_;
  std::vector<double> logits_;
};

// Closed-form KL(p || q) between the distributions of two categorical policies.
double categorical_kl(const CategoricalPolicy& p, const CategoricalPolicy& q);

class BlocklistJudge final : public ImageJudge {
 public:
  explicit BlocklistJudge(std::vector<std::string> blocklist = {});
  JudgeResult judge_image_benign(const ImageAsset& asset) const override;
  std::string id() const override { return "mock-blocklist-judge"; }

 private:
  std::vector<std::vector<std::string>> blocked_;  // each term as a word sequence
  std::vector<std::string> terms_;
};

inline constexpr std::string_view kRefusalText = "I'm sorry, but I can't help with that request.";

class EchoVictim final : public Victim {
 public:
  std::string respond(const ImageAsset* image, std::string_view text) const override;
  std::string id() const override { return "mock-echo"; }
};

class RefusalVictim final : public Victim {
 public:
  std::string respond(const ImageAsset* image, std::string_view text) const override;
  std::string id() const override { return "mock-refusal"; }
};

// Refuses exactly when the wrapped guard scores the text alone as unsafe,
// otherwise echoes. Models a text-only safety filter that cannot see the
// joint image-text intent.
class GuardedVictim final : public Victim {
 public:
  GuardedVictim(const GuardBackend& guard, std::string name);
  std::string respond(const ImageAsset* image, std::string_view text) const override;
  std::string id() const override { return name_; }

 private:
  const GuardBackend& guard_;
  std::string name_;
};

// Treats any response carrying a refusal marker as a refusal.
class RefusalMarkerJudge final : public ResponseJudge {
 public:
  ResponseJudgement judge_response(std::string_view response) const override;
  std::string id() const override { return "mock-refusal-marker-judge"; }
};

// Answers an in-context rewriting prompt by taking the final "Query:" and
// "Keyword:" lines and replacing the keyword with a pointer to the image.
class MockRewriter final : public TextGenerator {
 public:
  std::string generate(std::string_view prompt) const override;
  std::string id() const override { return "mock-rewriter"; }
};

}  // namespace redguard
