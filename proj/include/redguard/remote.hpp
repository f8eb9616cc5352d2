#pragma once

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <string>

#include "redguard/backends.hpp"
#include "redguard/domain.hpp"

namespace redguard {

// JSON-over-HTTP client shared by every remote backend. One POST per
// operation; see docs/API.md for the wire format.
//
// At most max_concurrent requests are in flight per client. Transport
// failures and 5xx responses are retried with the same request id up to
// max_retries times, then surface as BackendUnavailable.
class RemoteClient {
 public:
  RemoteClient(BackendConfig config, std::string role);

  Json call(std::string_view operation, const Json& payload) const;

  const std::string& role() const { return role_; }
  const BackendConfig& config() const { return config_; }

 private:
  class Slot;

  BackendConfig config_;
  std::string role_;
  std::string scheme_host_port_;
  std::string path_;
  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  mutable int in_flight_ = 0;
  mutable std::atomic<std::uint64_t> counter_{0};
};

class RemoteEmbedder final : public Embedder {
 public:
  RemoteEmbedder(BackendConfig config, std::size_t dimension);
  std::size_t dimension() const override { return dimension_; }
  EmbeddingVector embed_text(std::string_view text) const override;
  EmbeddingVector embed_image(const ImageAsset& asset) const override;
  std::string id() const override;

 private:
  EmbeddingVector finish(const Json& result) const;
  RemoteClient client_;
  std::size_t dimension_;
};

class RemoteGuard final : public GuardBackend {
 public:
  explicit RemoteGuard(BackendConfig config);
  GuardScore guard_score(std::string_view text) const override;
  std::string id() const override;

 private:
  RemoteClient client_;
};

// Sampling-only policy behind an endpoint; it cannot be trained locally.
class RemotePolicy final : public Policy {
 public:
  explicit RemotePolicy(BackendConfig config);
  std::vector<PolicySample> sample(const JointTriple& context, int n, Rng& rng) const override;
  double logprob(const JointTriple& context, std::string_view text) const override;
  std::string id() const override;

 private:
  RemoteClient client_;
};

class RemoteImageJudge final : public ImageJudge {
 public:
  explicit RemoteImageJudge(BackendConfig config);
  JudgeResult judge_image_benign(const ImageAsset& asset) const override;
  std::string id() const override;

 private:
  RemoteClient client_;
};

class RemoteVictim final : public Victim {
 public:
  explicit RemoteVictim(BackendConfig config);
  std::string respond(const ImageAsset* image, std::string_view text) const override;
  std::string id() const override;

 private:
  RemoteClient client_;
};

class RemoteResponseJudge final : public ResponseJudge {
 public:
  explicit RemoteResponseJudge(BackendConfig config);
  ResponseJudgement judge_response(std::string_view response) const override;
  std::string id() const override;

 private:
  RemoteClient client_;
};

class RemoteGenerator final : public TextGenerator {
 public:
  explicit RemoteGenerator(BackendConfig config);
  std::string generate(std::string_view prompt) const override;
  std::string id() const override;

 private:
  RemoteClient client_;
};

// Asset payload without the embedding (images travel by reference).
Json asset_reference_json(const ImageAsset& asset);

}  // namespace redguard
