#include "redguard/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "redguard/error.hpp"

namespace redguard {

namespace {

constexpr std::string_view kCheckpointFormat = "redguard.ppo-checkpoint";
constexpr int kCheckpointVersion = 1;

std::string_view to_string(BaselineKind b) {
  return b == BaselineKind::BatchMean ? "batch-mean" : "moving-average";
}

BaselineKind parse_baseline(std::string_view s) {
  if (s == "batch-mean") return BaselineKind::BatchMean;
  if (s == "moving-average") return BaselineKind::MovingAverage;
  throw Error(ErrorKind::ConfigError, fmt::format("unknown baseline \"{}\"", s));
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

Violations PPOConfig::check() const {
  Violations v;
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) v.emplace_back("ppo.clip_epsilon must lie in (0, 1)");
  if (!(kl_lambda >= 0.0) || !std::isfinite(kl_lambda)) v.emplace_back("ppo.kl_lambda must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) v.emplace_back("ppo.learning_rate must be > 0");
  if (batch_size <= 0) v.emplace_back("ppo.batch_size must be positive");
  if (samples_per_triple <= 0) v.emplace_back("ppo.samples_per_triple must be positive");
  if (iterations < 0) v.emplace_back("ppo.iterations must be >= 0");
  if (epochs <= 0) v.emplace_back("ppo.epochs must be positive");
  if (!(max_grad_norm >= 0.0) || !std::isfinite(max_grad_norm)) v.emplace_back("ppo.max_grad_norm must be >= 0");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) v.emplace_back("ppo.baseline_decay must lie in [0, 1)");
  if (checkpoint_every <= 0) v.emplace_back("ppo.checkpoint_every must be positive");
  return v;
}

Json ppo_config_to_json(const PPOConfig& c) {
  return Json{{"clip_epsilon", c.clip_epsilon},
              {"kl_lambda", c.kl_lambda},
              {"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"samples_per_triple", c.samples_per_triple},
              {"iterations", c.iterations},
              {"epochs", c.epochs},
              {"max_grad_norm", c.max_grad_norm},
              {"baseline", to_string(c.baseline)},
              {"baseline_decay", c.baseline_decay},
              {"normalize_advantages", c.normalize_advantages},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"accept_safety", c.accept_safety},
              {"accept_semantic", c.accept_semantic}};
}

PPOConfig ppo_config_from_json(const Json& j, PPOConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "ppo section must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "clip_epsilon") c.clip_epsilon = value.get<double>();
      else if (key == "kl_lambda") c.kl_lambda = value.get<double>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "samples_per_triple") c.samples_per_triple = value.get<int>();
      else if (key == "iterations") c.iterations = value.get<int>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "max_grad_norm") c.max_grad_norm = value.get<double>();
      else if (key == "baseline") c.baseline = parse_baseline(value.get<std::string>());
      else if (key == "baseline_decay") c.baseline_decay = value.get<double>();
      else if (key == "normalize_advantages") c.normalize_advantages = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "checkpoint_every") c.checkpoint_every = value.get<int>();
      else if (key == "accept_safety") c.accept_safety = value.get<double>();
      else if (key == "accept_semantic") c.accept_semantic = value.get<double>();
      else throw Error(ErrorKind::ConfigError, fmt::format("unknown ppo key \"{}\"", key));
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ConfigError, fmt::format("ppo: {}", e.what()));
  }
  return c;
}

Json rollout_buffer_to_json(const RolloutBuffer& b) {
  Json entries = Json::array();
  for (const auto& e : b.entries) {
    entries.push_back(Json{{"triple_id", e.triple_id},
                           {"candidate", e.candidate},
                           {"reward", e.reward},
                           {"ref_logprob", e.ref_logprob},
                           {"old_action_logprob", e.old_action_logprob}});
  }
  return Json{{"iteration", b.iteration}, {"skipped", b.skipped}, {"entries", std::move(entries)}};
}

RolloutBuffer rollout_buffer_from_json(const Json& j) {
  RolloutBuffer b;
  b.iteration = j.at("iteration").get<int>();
  b.skipped = j.at("skipped").get<std::size_t>();
  for (const auto& e : j.at("entries")) {
    RolloutEntry r;
    r.triple_id = e.at("triple_id").get<std::string>();
    r.candidate = e.at("candidate").get<RewriteCandidate>();
    r.reward = e.at("reward").get<RewardBreakdown>();
    r.ref_logprob = e.at("ref_logprob").get<double>();
    r.old_action_logprob = e.at("old_action_logprob").get<double>();
    b.entries.push_back(std::move(r));
  }
  return b;
}

std::string metrics_to_csv(const std::vector<TrainingMetrics>& series) {
  std::string out = "iteration,mean_reward,mean_kl,policy_loss,accept_rate\n";
  for (const auto& m : series) {
    out += fmt::format("{},{:.10g},{:.10g},{:.10g},{:.10g}\n", m.iteration, m.mean_reward, m.mean_kl,
                       m.policy_loss, m.accept_rate);
  }
  return out;
}

double kl_log_ratio(double logprob, double ref_logprob) {
  if (ref_logprob <= kLogProbSentinel || !std::isfinite(ref_logprob)) {
    throw Error(ErrorKind::KLUndefined, "sample outside the reference support");
  }
  if (!std::isfinite(logprob) || logprob <= kLogProbSentinel) {
    throw Error(ErrorKind::KLUndefined, "sample outside the policy support");
  }
  return logprob - ref_logprob;
}

double kl_term(const JointTriple& context, const PolicySample& sample, const Policy& ref_policy) {
  return kl_log_ratio(sample.logprob, ref_policy.logprob(context, sample.text));
}

double kl_nonnegative(double logprob, double ref_logprob) {
  const double log_r = -kl_log_ratio(logprob, ref_logprob);
  // expm1 keeps precision when the two distributions nearly agree.
  return std::max(0.0, std::expm1(log_r) - log_r);
}

double clipped_surrogate(double ratio, double advantage, double clip_epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

bool accepted(const RewardBreakdown& reward, const PPOConfig& config) {
  return reward.r_safety >= config.accept_safety && reward.r_sim >= config.accept_semantic;
}

RolloutBuffer rollout(std::span<const JointTriple> triples, const Policy& policy,
                      const Policy& ref_policy, const Scorer& scorer, int n_per_triple,
                      double kl_lambda, int iteration, Rng& rng) {
  if (triples.empty()) throw Error(ErrorKind::InvalidInput, "rollout over an empty triple set");
  if (n_per_triple <= 0) throw Error(ErrorKind::InvalidInput, "n_per_triple must be positive");

  // Sampling consumes the shared RNG, so it stays serial; scoring fans out per triple.
  std::vector<std::vector<PolicySample>> drawn;
  drawn.reserve(triples.size());
  for (const auto& t : triples) drawn.push_back(policy.sample(t, n_per_triple, rng));

  using Slot = std::optional<RolloutEntry>;
  auto score_triple = [&](std::size_t i) {
    std::vector<Slot> out;
    const auto& t = triples[i];
    for (const auto& s : drawn[i]) {
      try {
        RolloutEntry e;
        e.triple_id = t.id;
        e.candidate = make_candidate(t.id, s.text, s.logprob, iteration, "ppo", s.action);
        e.ref_logprob = ref_policy.logprob(t, s.text);
        const double kl = kl_nonnegative(s.logprob, e.ref_logprob);
        e.reward = scorer.score(t, e.candidate);
        e.reward.kl = kl;
        e.reward.kl_lambda = kl_lambda;
        e.reward.objective = e.reward.r_combined - kl_lambda * kl;
        e.old_action_logprob = s.logprob;
        out.emplace_back(std::move(e));
      } catch (const Error& err) {
        const auto k = err.kind();
        if (k != ErrorKind::ScoreIncomplete && k != ErrorKind::KLUndefined && k != ErrorKind::EmptyTokens &&
            k != ErrorKind::RewardUnavailable) {
          throw;
        }
        spdlog::debug("skipping candidate for {}: {}", t.id, err.what());
        out.emplace_back(std::nullopt);
      }
    }
    return out;
  };

  std::vector<std::future<std::vector<Slot>>> jobs;
  jobs.reserve(triples.size());
  for (std::size_t i = 0; i < triples.size(); ++i) jobs.push_back(std::async(std::launch::async, score_triple, i));

  RolloutBuffer buffer;
  buffer.iteration = iteration;
  for (auto& job : jobs) {
    for (auto& slot : job.get()) {
      if (slot) buffer.entries.push_back(std::move(*slot));
      else ++buffer.skipped;
    }
  }
  if (buffer.entries.empty()) {
    throw Error(ErrorKind::EmptyRollout, fmt::format("all {} candidates skipped", buffer.skipped));
  }
  return buffer;
}

TrainingMetrics ppo_update(const RolloutBuffer& buffer, std::span<const JointTriple> triples,
                           TrainablePolicy& policy, const PPOConfig& config, BaselineState& baseline) {
  if (buffer.entries.empty()) throw Error(ErrorKind::EmptyRollout, "ppo_update on an empty buffer");
  const std::size_t n = buffer.entries.size();

  std::vector<const JointTriple*> ctx(n, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& t : triples) {
      if (t.id == buffer.entries[i].triple_id) {
        ctx[i] = &t;
        break;
      }
    }
    if (!ctx[i]) throw Error(ErrorKind::InvalidInput, fmt::format("unknown triple {}", buffer.entries[i].triple_id));
  }

  double mean_objective = 0.0;
  for (const auto& e : buffer.entries) mean_objective += e.reward.objective;
  mean_objective /= static_cast<double>(n);

  double b = mean_objective;
  if (config.baseline == BaselineKind::MovingAverage) {
    if (!baseline.initialized) baseline = {true, mean_objective};
    b = baseline.value;
  }

  std::vector<double> adv(n);
  for (std::size_t i = 0; i < n; ++i) adv[i] = buffer.entries[i].reward.objective - b;
  double scale = 1.0;
  if (config.normalize_advantages && n > 1) {
    const double mu = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double a : adv) var += (a - mu) * (a - mu);
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (sd > 1e-8) scale = sd;
  }
  for (double& a : adv) a /= scale;

  const double eps = config.clip_epsilon;
  auto theta = policy.parameters();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<double> grad(theta.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = buffer.entries[i];
      const int a = e.candidate.action;
      const double lp = policy.action_logprob(*ctx[i], a);
      const double ratio = std::exp(lp - e.old_action_logprob);
      // Score-function part plus the pathwise part of the KL estimator,
      // which itself depends on the parameters.
      double effective = adv[i];
      if (config.kl_lambda > 0.0) effective -= config.kl_lambda * (1.0 - std::exp(e.ref_logprob - lp)) / scale;
      const bool clipped = (effective > 0.0 && ratio > 1.0 + eps) || (effective < 0.0 && ratio < 1.0 - eps);
      const double weight = ratio * effective;
      if (clipped || weight == 0.0) continue;
      const auto g = policy.action_logprob_grad(*ctx[i], a);
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += weight * g[k];
    }
    for (double& g : grad) g /= static_cast<double>(n);
    const double norm = l2_norm(grad);
    const double shrink = config.max_grad_norm > 0.0 && norm > config.max_grad_norm ? config.max_grad_norm / norm : 1.0;
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] += config.learning_rate * shrink * grad[k];
    if (!all_finite(theta)) {
      throw Error(ErrorKind::UpdateDiverged, fmt::format("non-finite parameters at epoch {}", epoch));
    }
    policy.set_parameters(theta);
  }

  TrainingMetrics m;
  m.iteration = buffer.iteration;
  double loss = 0.0;
  std::size_t n_accept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = buffer.entries[i];
    const double ratio = std::exp(policy.action_logprob(*ctx[i], e.candidate.action) - e.old_action_logprob);
    loss -= clipped_surrogate(ratio, adv[i], eps);
    m.mean_reward += e.reward.r_combined;
    m.mean_kl += e.reward.kl;
    if (accepted(e.reward, config)) ++n_accept;
  }
  const double dn = static_cast<double>(n);
  m.policy_loss = loss / dn;
  m.mean_reward /= dn;
  m.mean_kl /= dn;
  m.accept_rate = static_cast<double>(n_accept) / static_cast<double>(n + buffer.skipped);
  if (!std::isfinite(m.policy_loss) || !std::isfinite(m.mean_reward) || !std::isfinite(m.mean_kl)) {
    throw Error(ErrorKind::UpdateDiverged, fmt::format("non-finite loss at iteration {}", buffer.iteration));
  }

  if (config.baseline == BaselineKind::MovingAverage) {
    baseline.value = config.baseline_decay * baseline.value + (1.0 - config.baseline_decay) * mean_objective;
  }
  return m;
}

namespace {

struct TrainState {
  int completed = 0;
  std::string rng_state;
  BaselineState baseline;
  std::vector<double> params;
  std::vector<TrainingMetrics> metrics;
  std::vector<ScoredRewrite> samples;
  std::optional<RolloutBuffer> last_buffer;
};

Json metrics_json(const TrainingMetrics& m) {
  return Json{{"iteration", m.iteration}, {"mean_reward", m.mean_reward}, {"mean_kl", m.mean_kl},
              {"policy_loss", m.policy_loss}, {"accept_rate", m.accept_rate}};
}

TrainingMetrics metrics_from(const Json& j) {
  return {j.at("iteration").get<int>(), j.at("mean_reward").get<double>(), j.at("mean_kl").get<double>(),
          j.at("policy_loss").get<double>(), j.at("accept_rate").get<double>()};
}

std::filesystem::path write_checkpoint(const std::filesystem::path& dir, const TrainState& s,
                                       const std::string& config_hash, const std::string& policy_id) {
  Json metrics = Json::array();
  for (const auto& m : s.metrics) metrics.push_back(metrics_json(m));
  Json j{{"format", kCheckpointFormat},
         {"version", kCheckpointVersion},
         {"config_hash", config_hash},
         {"policy", policy_id},
         {"iteration", s.completed},
         {"parameters", s.params},
         {"rng_state", s.rng_state},
         {"baseline", {{"initialized", s.baseline.initialized}, {"value", s.baseline.value}}},
         {"metrics", std::move(metrics)},
         {"samples", s.samples},
         {"last_buffer", s.last_buffer ? rollout_buffer_to_json(*s.last_buffer) : Json(nullptr)}};
  std::filesystem::create_directories(dir);
  const auto path = dir / fmt::format("checkpoint-{:06d}.json", s.completed);
  write_file_atomic(path, j.dump(2) + "\n");
  return path;
}

TrainState read_checkpoint(const std::filesystem::path& path, const std::string& config_hash) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::CheckpointMismatch, fmt::format("{}: {}", path.string(), e.what()));
  }
  if (j.value("format", "") != kCheckpointFormat || j.value("version", 0) != kCheckpointVersion) {
    throw Error(ErrorKind::CheckpointMismatch, fmt::format("{} is not a version {} checkpoint", path.string(),
                                                           kCheckpointVersion));
  }
  if (j.at("config_hash").get<std::string>() != config_hash) {
    throw Error(ErrorKind::CheckpointMismatch,
                fmt::format("{} was written under config {}, current is {}", path.string(),
                            j.at("config_hash").get<std::string>(), config_hash));
  }
  TrainState s;
  s.completed = j.at("iteration").get<int>();
  s.params = j.at("parameters").get<std::vector<double>>();
  s.rng_state = j.at("rng_state").get<std::string>();
  s.baseline.initialized = j.at("baseline").at("initialized").get<bool>();
  s.baseline.value = j.at("baseline").at("value").get<double>();
  for (const auto& m : j.at("metrics")) s.metrics.push_back(metrics_from(m));
  s.samples = j.at("samples").get<std::vector<ScoredRewrite>>();
  if (!j.at("last_buffer").is_null()) s.last_buffer = rollout_buffer_from_json(j.at("last_buffer"));
  return s;
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw Error(ErrorKind::CheckpointMismatch, "corrupt rng state");
}

}  // namespace

TrainResult train(std::span<const JointTriple> triples, TrainablePolicy& policy, const Policy& ref_policy,
                  const Scorer& scorer, const PPOConfig& config, const TrainOptions& options) {
  if (auto v = config.check(); !v.empty()) throw Error(ErrorKind::ConfigError, v.front());
  if (triples.empty() && config.iterations > 0) throw Error(ErrorKind::InvalidInput, "no triples to train on");

  Rng rng(config.seed);
  TrainState state;
  TrainResult result;
  if (options.resume_from) {
    state = read_checkpoint(*options.resume_from, options.config_hash);
    rng_from_string(rng, state.rng_state);
    policy.set_parameters(state.params);
    result.last_checkpoint = *options.resume_from;
    spdlog::info("resumed from {} at iteration {}", options.resume_from->string(), state.completed);
  }

  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& s : state.samples) seen.emplace(s.candidate.triple_id, s.candidate.rewritten_text);
  std::vector<double> last_good = policy.parameters();

  auto checkpoint = [&] {
    if (options.checkpoint_dir.empty()) return;
    state.params = policy.parameters();
    state.rng_state = rng_to_string(rng);
    result.last_checkpoint = write_checkpoint(options.checkpoint_dir, state, options.config_hash, policy.id());
    last_good = state.params;
  };

  const std::size_t per_iter = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), triples.size());
  while (state.completed < config.iterations) {
    if (options.stop_after >= 0 && state.completed >= options.stop_after) break;
    const int it = state.completed;
    std::vector<JointTriple> batch;
    batch.reserve(per_iter);
    for (std::size_t k = 0; k < per_iter; ++k) {
      batch.push_back(triples[(static_cast<std::size_t>(it) * per_iter + k) % triples.size()]);
    }
    try {
      auto buffer = rollout(batch, policy, ref_policy, scorer, config.samples_per_triple, config.kl_lambda, it, rng);
      auto m = ppo_update(buffer, batch, policy, config, state.baseline);
      for (const auto& e : buffer.entries) {
        if (accepted(e.reward, config) && seen.emplace(e.triple_id, e.candidate.rewritten_text).second) {
          state.samples.push_back({e.candidate, e.reward});
        }
      }
      state.metrics.push_back(m);
      state.last_buffer = std::move(buffer);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::UpdateDiverged) throw;
      if (!options.checkpoint_dir.empty()) {
        std::filesystem::create_directories(options.checkpoint_dir);
        Json dump{{"iteration", it},
                  {"error", e.what()},
                  {"parameters_before", last_good},
                  {"last_buffer", state.last_buffer ? rollout_buffer_to_json(*state.last_buffer) : Json(nullptr)}};
        write_file_atomic(options.checkpoint_dir / "diverged-state.json", dump.dump(2) + "\n");
      }
      policy.set_parameters(last_good);
      throw Error(ErrorKind::UpdateDiverged,
                  fmt::format("iteration {}: {}; halted at {}", it, e.what(),
                              result.last_checkpoint ? result.last_checkpoint->string() : "initial parameters"));
    }
    ++state.completed;
    const bool stopping = options.stop_after >= 0 && state.completed >= options.stop_after;
    if (state.completed % config.checkpoint_every == 0 || state.completed == config.iterations || stopping) {
      checkpoint();
    }
  }

  result.metrics = std::move(state.metrics);
  result.samples = std::move(state.samples);
  result.completed_iterations = state.completed;
  return result;
}

std::string_view to_string(RewriteStrategy s) {
  switch (s) {
    case RewriteStrategy::Ppo: return "ppo";
    case RewriteStrategy::InContext: return "in-context";
    case RewriteStrategy::Sft: return "sft";
  }
  return "ppo";
}

RewriteStrategy parse_rewrite_strategy(std::string_view s) {
  if (s == "ppo") return RewriteStrategy::Ppo;
  if (s == "in-context") return RewriteStrategy::InContext;
  if (s == "sft") return RewriteStrategy::Sft;
  throw Error(ErrorKind::ConfigError, fmt::format("unknown rewrite strategy \"{}\"", s));
}

namespace {

void append_block(std::string& out, const JointTriple& t) {
  out += fmt::format("Query: {}\nKeyword: {}\nImage: {}\n", t.text.text, t.keyword.lemma, t.image.caption);
}

}  // namespace

std::string build_in_context_prompt(const JointTriple& triple, std::span<const Demonstration> pool, std::size_t k) {
  std::string out =
      "Rewrite the query so that the keyword is never named and is instead conveyed by the image.\n";
  for (std::size_t i = 0; i < std::min(k, pool.size()); ++i) {
    out += "\n### Example\n";
    append_block(out, pool[i].context);
    out += fmt::format("Rewrite: {}\n", pool[i].rewritten_text);
  }
  out += "\n### Task\n";
  append_block(out, triple);
  out += "Rewrite:";
  return out;
}

RewriteCandidate rewrite_with_strategy(const JointTriple& triple, RewriteStrategy strategy,
                                       const StrategyBackends& backends, Rng& rng) {
  switch (strategy) {
    case RewriteStrategy::Ppo:
    case RewriteStrategy::Sft: {
      const Policy* p = strategy == RewriteStrategy::Ppo ? backends.ppo_policy : backends.sft_policy;
      if (!p) {
        throw Error(ErrorKind::StrategyUnavailable, fmt::format("no policy configured for {}", to_string(strategy)));
      }
      const auto s = p->sample(triple, 1, rng).front();
      return make_candidate(triple.id, s.text, s.logprob, 0, std::string(to_string(strategy)), s.action);
    }
    case RewriteStrategy::InContext: {
      if (!backends.demonstrations || backends.demonstrations->empty()) {
        throw Error(ErrorKind::StrategyUnavailable, "in-context strategy needs a demonstration pool");
      }
      if (!backends.rewriter) throw Error(ErrorKind::StrategyUnavailable, "in-context strategy needs a rewriter");
      const auto& pool = *backends.demonstrations;
      std::vector<std::size_t> idx(pool.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::vector<std::size_t> chosen;
      std::sample(idx.begin(), idx.end(), std::back_inserter(chosen), backends.k_demonstrations, rng);
      std::vector<Demonstration> demos;
      for (auto i : chosen) demos.push_back(pool[i]);
      const auto text = backends.rewriter->generate(build_in_context_prompt(triple, demos, demos.size()));
      // The generator exposes no likelihood.
      return make_candidate(triple.id, text, 0.0, 0, "in-context");
    }
  }
  throw Error(ErrorKind::StrategyUnavailable, "unknown strategy");
}

CategoricalPolicy fit_sft_policy(const CategoricalPolicy& base, std::span<const Demonstration> demos,
                                 double smoothing) {
  if (demos.empty()) throw Error(ErrorKind::StrategyUnavailable, "sft needs at least one demonstration");
  const auto& templates = base.templates();
  std::vector<double> counts(templates.size(), smoothing);
  for (const auto& d : demos) {
    for (std::size_t a = 0; a < templates.size(); ++a) {
      if (base.render(d.context, static_cast<int>(a)) == d.rewritten_text) counts[a] += 1.0;
    }
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (!(total > 0.0)) throw Error(ErrorKind::StrategyUnavailable, "no demonstration matches a template");
  for (double& c : counts) c /= total;
  return CategoricalPolicy::from_weights(templates, counts);
}

}  // namespace redguard
