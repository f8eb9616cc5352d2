#include "redguard/remote.hpp"

#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "httplib.h"
#include "redguard/error.hpp"

namespace redguard {

namespace {

ErrorKind remote_error_kind(std::string_view kind) {
  if (kind == "InvalidInput") return ErrorKind::InvalidInput;
  if (kind == "AssetNotFound") return ErrorKind::AssetNotFound;
  return ErrorKind::BackendUnavailable;
}

}  // namespace

class RemoteClient::Slot {
 public:
  explicit Slot(const RemoteClient& c) : c_(c) {
    std::unique_lock lock(c_.mutex_);
    c_.cv_.wait(lock, [&] { return c_.in_flight_ < c_.config_.max_concurrent; });
    ++c_.in_flight_;
  }
  ~Slot() {
    {
      std::lock_guard lock(c_.mutex_);
      --c_.in_flight_;
    }
    c_.cv_.notify_one();
  }
  Slot(const Slot&) = delete;
  Slot& operator=(const Slot&) = delete;

 private:
  const RemoteClient& c_;
};

RemoteClient::RemoteClient(BackendConfig config, std::string role)
    : config_(std::move(config)), role_(std::move(role)) {
  config_.kind = BackendKind::Remote;
  if (auto v = config_.check(); !v.empty()) {
    throw Error(ErrorKind::ConfigError, role_ + ": " + v.front());
  }
  const std::string& ep = *config_.endpoint;
  const auto scheme_end = ep.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorKind::ConfigError, role_ + ": endpoint needs a scheme: " + ep);
  }
  const auto path_start = ep.find('/', scheme_end + 3);
  scheme_host_port_ = ep.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : ep.substr(path_start);
}

Json RemoteClient::call(std::string_view operation, const Json& payload) const {
  const auto request_id = fmt::format("{}-{}", role_, counter_.fetch_add(1));
  Json body;
  body["request_id"] = request_id;
  body["operation"] = operation;
  body["payload"] = payload;
  const auto body_text = body.dump();

  Slot slot(*this);
  httplib::Client http(scheme_host_port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  http.set_connection_timeout(secs.count(), usecs.count());
  http.set_read_timeout(secs.count(), usecs.count());
  http.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (config_.token) headers.emplace("Authorization", "Bearer " + *config_.token);

  std::string last_failure;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    auto res = http.Post(path_, headers, body_text, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
    } else if (res->status >= 500) {
      last_failure = fmt::format("HTTP {}", res->status);
    } else if (res->status != 200) {
      throw Error(ErrorKind::BackendUnavailable,
                  fmt::format("{} {}: HTTP {}", role_, operation, res->status));
    } else {
      Json reply;
      try {
        reply = Json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::BackendUnavailable, fmt::format("{} {}: bad JSON: {}", role_, operation, e.what()));
      }
      if (reply.value("request_id", std::string{}) != request_id) {
        throw Error(ErrorKind::BackendUnavailable, fmt::format("{} {}: response id mismatch", role_, operation));
      }
      if (!reply.value("ok", false)) {
        const auto& err = reply.contains("error") ? reply["error"] : Json::object();
        const auto kind = err.is_object() ? err.value("kind", std::string{}) : std::string{};
        const auto message = err.is_object() ? err.value("message", std::string{}) : err.dump();
        throw Error(remote_error_kind(kind), fmt::format("{} {}: {}", role_, operation, message));
      }
      return reply.contains("result") ? reply["result"] : Json::object();
    }
    spdlog::debug("{} {} attempt {} failed: {}", role_, operation, attempt + 1, last_failure);
  }
  throw Error(ErrorKind::BackendUnavailable,
              fmt::format("{} {}: {} after {} attempts", role_, operation, last_failure, config_.max_retries + 1));
}

Json asset_reference_json(const ImageAsset& asset) {
  Json j;
  j["id"] = asset.id;
  j["location"] = asset.location;
  j["caption"] = asset.caption;
  return j;
}

namespace {

template <class T>
T field(const Json& j, const char* name, std::string_view op) {
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::BackendUnavailable, fmt::format("{}: malformed result, missing \"{}\"", op, name));
  }
}

}  // namespace

RemoteEmbedder::RemoteEmbedder(BackendConfig config, std::size_t dimension)
    : client_(std::move(config), "embedder"), dimension_(dimension) {}

std::string RemoteEmbedder::id() const { return "remote-embedder:" + *client_.config().endpoint; }

EmbeddingVector RemoteEmbedder::finish(const Json& result) const {
  auto v = field<std::vector<double>>(result, "vector", "embed");
  if (v.size() != dimension_) {
    throw Error(ErrorKind::BackendUnavailable,
                fmt::format("embedder returned dimension {} (expected {})", v.size(), dimension_));
  }
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorKind::BackendUnavailable, "embedder returned non-finite value");
  }
  normalize_in_place(v);
  return {std::move(v), true};
}

EmbeddingVector RemoteEmbedder::embed_text(std::string_view text) const {
  if (text.empty()) throw Error(ErrorKind::InvalidInput, "embed_text on empty text");
  return finish(client_.call("embed_text", Json{{"text", text}}));
}

EmbeddingVector RemoteEmbedder::embed_image(const ImageAsset& asset) const {
  return finish(client_.call("embed_image", Json{{"asset", asset_reference_json(asset)}}));
}

RemoteGuard::RemoteGuard(BackendConfig config) : client_(std::move(config), "guard") {}

std::string RemoteGuard::id() const { return "remote-guard:" + *client_.config().endpoint; }

GuardScore RemoteGuard::guard_score(std::string_view text) const {
  if (text.empty()) throw Error(ErrorKind::InvalidInput, "guard_score on empty text");
  const auto r = client_.call("guard_score", Json{{"text", text}});
  return guard_score_from_logits(field<double>(r, "logit_safe", "guard_score"),
                                 field<double>(r, "logit_unsafe", "guard_score"));
}

RemotePolicy::RemotePolicy(BackendConfig config) : client_(std::move(config), "policy") {}

std::string RemotePolicy::id() const { return "remote-policy:" + *client_.config().endpoint; }

std::vector<PolicySample> RemotePolicy::sample(const JointTriple& context, int n, Rng& rng) const {
  if (n <= 0) throw Error(ErrorKind::InvalidInput, "policy_sample needs n >= 1");
  Json payload;
  payload["context"] = context;
  payload["n"] = n;
  // The remote sampler is seeded from the local stream so runs stay reproducible.
  payload["seed"] = rng();
  const auto r = client_.call("policy_sample", payload);
  std::vector<PolicySample> out;
  for (const auto& s : field<Json>(r, "samples", "policy_sample")) {
    out.push_back({field<std::string>(s, "text", "policy_sample"),
                   std::min(0.0, field<double>(s, "logprob", "policy_sample")), -1});
  }
  if (out.size() != static_cast<std::size_t>(n)) {
    throw Error(ErrorKind::BackendUnavailable, "policy_sample returned the wrong number of samples");
  }
  return out;
}

double RemotePolicy::logprob(const JointTriple& context, std::string_view text) const {
  Json payload;
  payload["context"] = context;
  payload["text"] = text;
  const auto lp = field<double>(client_.call("policy_logprob", payload), "logprob", "policy_logprob");
  return lp <= kLogProbSentinel ? kLogProbSentinel : std::min(0.0, lp);
}

RemoteImageJudge::RemoteImageJudge(BackendConfig config) : client_(std::move(config), "image_judge") {}

std::string RemoteImageJudge::id() const { return "remote-image-judge:" + *client_.config().endpoint; }

JudgeResult RemoteImageJudge::judge_image_benign(const ImageAsset& asset) const {
  const auto r = client_.call("judge_image_benign", Json{{"asset", asset_reference_json(asset)}});
  return {field<bool>(r, "benign", "judge_image_benign"), r.value("rationale", std::string{})};
}

RemoteVictim::RemoteVictim(BackendConfig config) : client_(std::move(config), "victim") {}

std::string RemoteVictim::id() const { return "remote-victim:" + *client_.config().endpoint; }

std::string RemoteVictim::respond(const ImageAsset* image, std::string_view text) const {
  Json payload;
  payload["image"] = image ? asset_reference_json(*image) : Json(nullptr);
  payload["text"] = text;
  return field<std::string>(client_.call("victim_respond", payload), "response", "victim_respond");
}

RemoteResponseJudge::RemoteResponseJudge(BackendConfig config)
    : client_(std::move(config), "response_judge") {}

std::string RemoteResponseJudge::id() const { return "remote-response-judge:" + *client_.config().endpoint; }

ResponseJudgement RemoteResponseJudge::judge_response(std::string_view response) const {
  const auto r = client_.call("judge_response", Json{{"response", response}});
  return {field<bool>(r, "complied", "judge_response"), r.value("rationale", std::string{})};
}

RemoteGenerator::RemoteGenerator(BackendConfig config) : client_(std::move(config), "rewriter") {}

std::string RemoteGenerator::id() const { return "remote-rewriter:" + *client_.config().endpoint; }

std::string RemoteGenerator::generate(std::string_view prompt) const {
  return field<std::string>(client_.call("generate", Json{{"prompt", prompt}}), "text", "generate");
}

}  // namespace redguard
