#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "redguard/domain.hpp"
#include "redguard/util.hpp"

namespace redguard {

struct EmbeddingVector {
  std::vector<double> values;
  bool normalized = false;
};

struct GuardScore {
  double p_safe = 0.0;
  double logit_safe = 0.0;
  double logit_unsafe = 0.0;
};

struct PolicySample {
  std::string text;
  double logprob = 0.0;
  // Template index for policies with a discrete action space, -1 otherwise.
  int action = -1;
};

struct JudgeResult {
  bool benign = false;
  std::string rationale;
};

struct ResponseJudgement {
  // True when the victim went along with the request instead of refusing.
  bool complied = false;
  std::string rationale;
};

enum class BackendKind { Mock, Remote };

struct BackendConfig {
  BackendKind kind = BackendKind::Mock;
  std::optional<std::string> endpoint;
  std::chrono::milliseconds timeout{10000};
  int max_concurrent = 4;
  int max_retries = 2;
  std::optional<std::uint64_t> seed = 0;
  // Bearer token for remote endpoints. Never written to run metadata.
  std::optional<std::string> token;

  // Empty when the invariants hold.
  Violations check() const;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::size_t dimension() const = 0;
  virtual EmbeddingVector embed_text(std::string_view text) const = 0;
  virtual EmbeddingVector embed_image(const ImageAsset& asset) const = 0;
  virtual std::string id() const = 0;
};

class GuardBackend {
 public:
  virtual ~GuardBackend() = default;
  virtual GuardScore guard_score(std::string_view text) const = 0;
  virtual std::string id() const = 0;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::vector<PolicySample> sample(const JointTriple& context, int n, Rng& rng) const = 0;
  // Out-of-support text yields kLogProbSentinel.
  virtual double logprob(const JointTriple& context, std::string_view text) const = 0;
  virtual std::string id() const = 0;
};

// A policy whose parameters the optimizer can move. Actions are discrete.
class TrainablePolicy : public Policy {
 public:
  virtual std::vector<double> parameters() const = 0;
  virtual void set_parameters(std::vector<double> params) = 0;
  virtual double action_logprob(const JointTriple& context, int action) const = 0;
  // Gradient of action_logprob with respect to parameters().
  virtual std::vector<double> action_logprob_grad(const JointTriple& context, int action) const = 0;
  virtual std::unique_ptr<TrainablePolicy> clone() const = 0;
};

class ImageJudge {
 public:
  virtual ~ImageJudge() = default;
  virtual JudgeResult judge_image_benign(const ImageAsset& asset) const = 0;
  virtual std::string id() const = 0;
};

class Victim {
 public:
  virtual ~Victim() = default;
  virtual std::string respond(const ImageAsset* image, std::string_view text) const = 0;
  virtual std::string id() const = 0;
};

class ResponseJudge {
 public:
  virtual ~ResponseJudge() = default;
  virtual ResponseJudgement judge_response(std::string_view response) const = 0;
  virtual std::string id() const = 0;
};

// Free-form rewriter used by the in-context baseline.
class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual std::string generate(std::string_view prompt) const = 0;
  virtual std::string id() const = 0;
};

// Two-way softmax over (safe, unsafe) logits.
GuardScore guard_score_from_logits(double logit_safe, double logit_unsafe);

}  // namespace redguard
