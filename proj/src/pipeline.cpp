#include "redguard/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "redguard/error.hpp"
#include "redguard/mock_backends.hpp"
#include "redguard/remote.hpp"

namespace redguard {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorKind::ConfigError, msg); }

void require_keys(const Json& j, std::string_view section, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) config_error(fmt::format("{} must be an object", section));
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      config_error(fmt::format("unknown key \"{}\" in {}", it.key(), section));
    }
  }
}

template <class T>
T get(const Json& j, std::string_view section, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    config_error(fmt::format("{}.{}: {}", section, key, e.what()));
  }
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path raw(p);
  return raw.is_absolute() ? raw : (base / raw).lexically_normal();
}

std::string relative_to(const fs::path& base, const fs::path& p) {
  auto rel = p.lexically_relative(base);
  return (rel.empty() ? p : rel).generic_string();
}

std::set<std::string_view> mock_option_keys(std::string_view role) {
  if (role == "embedder") return {"dimension"};
  if (role == "judge") return {"blocklist"};
  if (role == "guard") return {"logit_safe", "logit_unsafe", "lexicon", "rules"};
  if (role == "policy") return {"templates", "weights"};
  if (role == "crossguard") return {"adapter_id", "base_model_id", "verbalizers"};
  return {};
}

BackendSpec backend_from_json(const Json& j, std::string_view role) {
  BackendSpec spec;
  if (!j.is_object()) config_error(fmt::format("backends.{} must be an object", role));
  const auto allowed = mock_option_keys(role);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    const auto& v = it.value();
    try {
      if (key == "kind") {
        const auto k = v.get<std::string>();
        if (k == "mock") spec.config.kind = BackendKind::Mock;
        else if (k == "remote") spec.config.kind = BackendKind::Remote;
        else config_error(fmt::format("backends.{}.kind must be mock or remote, got \"{}\"", role, k));
      } else if (key == "endpoint") {
        spec.config.endpoint = v.get<std::string>();
      } else if (key == "timeout_ms") {
        spec.config.timeout = std::chrono::milliseconds(v.get<long>());
      } else if (key == "max_concurrent") {
        spec.config.max_concurrent = v.get<int>();
      } else if (key == "max_retries") {
        spec.config.max_retries = v.get<int>();
      } else if (key == "seed") {
        spec.config.seed = v.get<std::uint64_t>();
      } else if (key == "token") {
        config_error(fmt::format("backends.{}: tokens are read from REDGUARD_BACKEND_{}_TOKEN only", role,
                                 upper(role)));
      } else if (allowed.contains(key)) {
        spec.options[key] = v;
      } else {
        config_error(fmt::format("unknown key \"{}\" in backends.{}", key, role));
      }
    } catch (const nlohmann::json::exception& e) {
      config_error(fmt::format("backends.{}.{}: {}", role, key, e.what()));
    }
  }
  return spec;
}

Json backend_to_json(const BackendSpec& s) {
  Json j;
  j["kind"] = s.config.kind == BackendKind::Mock ? "mock" : "remote";
  if (s.config.endpoint) j["endpoint"] = *s.config.endpoint;
  j["timeout_ms"] = s.config.timeout.count();
  j["max_concurrent"] = s.config.max_concurrent;
  j["max_retries"] = s.config.max_retries;
  if (s.config.seed) j["seed"] = *s.config.seed;
  for (auto it = s.options.begin(); it != s.options.end(); ++it) j[it.key()] = it.value();
  return j;
}

Json default_config_json() {
  Json j;
  j["seed"] = 0;
  j["stage1"] = {{"max_retries", 5}, {"top_k", 6}, {"max_keywords", 0}};
  return j;
}

void check_exists(const fs::path& p, std::string_view what) {
  if (!fs::exists(p)) config_error(fmt::format("{} not found: {}", what, p.string()));
}

std::vector<Rejection> load_rejections(const fs::path& path) {
  std::vector<Rejection> out;
  if (!fs::exists(path)) return out;
  const auto content = read_file(path);
  std::size_t start = 0;
  while (start < content.size()) {
    auto end = content.find('\n', start);
    if (end == std::string::npos) end = content.size();
    if (end > start) out.push_back(rejection_from_json(Json::parse(content.substr(start, end - start))));
    start = end + 1;
  }
  return out;
}

std::string rejections_jsonl(const std::vector<Rejection>& rs) {
  std::string out;
  for (const auto& r : rs) out += rejection_to_json(r).dump() + "\n";
  return out;
}

std::string triple_ref(const std::string& triple_id, const std::string& text) {
  return hex64(fnv1a64(triple_id + "\n" + text));
}

std::vector<TrainExample> implicit_examples(const std::vector<JointTriple>& triples,
                                            const std::vector<ScoredRewrite>& rewrites) {
  std::map<std::string, const JointTriple*> by_id;
  for (const auto& t : triples) by_id.emplace(t.id, &t);
  std::vector<TrainExample> out;
  for (const auto& r : rewrites) {
    auto it = by_id.find(r.candidate.triple_id);
    if (it == by_id.end()) {
      throw Error(ErrorKind::InvalidInput, "rewrite refers to unknown triple " + r.candidate.triple_id);
    }
    out.push_back({"implicit-" + triple_ref(r.candidate.triple_id, r.candidate.rewritten_text),
                   it->second->image, r.candidate.rewritten_text, SafetyLabel::Unsafe, TrainBucket::Implicit});
  }
  return out;
}

std::vector<TrainExample> explicit_text_examples(const std::vector<JointTriple>& triples) {
  std::vector<TrainExample> out;
  for (const auto& t : triples) {
    out.push_back({"explicit-text-" + t.id, t.image, t.text.text, SafetyLabel::Unsafe, TrainBucket::ExplicitText});
  }
  return out;
}

struct PairPaths {
  fs::path dir, triples, rejected, index, resume;
  explicit PairPaths(const fs::path& out)
      : dir(out / "pair"),
        triples(dir / "triples.jsonl"),
        rejected(dir / "rejected.jsonl"),
        index(dir / "index.jsonl"),
        resume(dir / "resume.json") {}
};

struct RedteamPaths {
  fs::path dir, rewrites, metrics, checkpoints, policy;
  explicit RedteamPaths(const fs::path& out)
      : dir(out / "redteam"),
        rewrites(dir / "rewrites.jsonl"),
        metrics(dir / "metrics.csv"),
        checkpoints(dir / "checkpoints"),
        policy(dir / "policy.json") {}
};

std::vector<JointTriple> require_triples(const fs::path& out) {
  const PairPaths p(out);
  if (!fs::exists(p.triples)) config_error("triples not found: " + p.triples.string() + " (run `pair` first)");
  return load_triples(p.triples);
}

std::vector<ScoredRewrite> require_rewrites(const fs::path& out) {
  const RedteamPaths p(out);
  if (!fs::exists(p.rewrites)) config_error("rewrites not found: " + p.rewrites.string() + " (run `redteam` first)");
  return load_rewrites(p.rewrites);
}

void write_effective_config(const PipelineConfig& c, const fs::path& out) {
  fs::create_directories(out);
  Json j = pipeline_config_to_json(c);
  j["paths"].erase("output");
  j["config_hash"] = config_hash(c);
  write_file_atomic(out / "effective_config.json", j.dump(2) + "\n");
}

CategoricalPolicy policy_from_file(const fs::path& path) {
  const auto j = Json::parse(read_file(path));
  if (j.value("format", "") != "redguard.policy") config_error("not a policy file: " + path.string());
  return CategoricalPolicy(j.at("templates").get<std::vector<std::string>>(),
                           j.at("parameters").get<std::vector<double>>());
}

}  // namespace

// ---------------------------------------------------------------------------

PipelineConfig pipeline_config_from_json(const Json& file_json, const fs::path& base_dir,
                                         const ConfigOverrides& overrides,
                                         const std::map<std::string, std::string>& env) {
  Json j = default_config_json();
  if (!file_json.is_object()) config_error("config must be a JSON object");
  require_keys(file_json, "config", {"seed", "paths", "backends", "stage1", "reward", "ppo", "guard", "eval"});
  for (auto it = file_json.begin(); it != file_json.end(); ++it) j[it.key()] = it.value();

  PipelineConfig c;
  c.base_dir = base_dir;
  c.seed = get<std::uint64_t>(j, "config", "seed");

  if (j.contains("paths")) {
    const auto& p = j["paths"];
    require_keys(p, "paths", {"manifest", "queries", "assets", "output"});
    if (p.contains("manifest")) c.manifest = resolve(base_dir, get<std::string>(p, "paths", "manifest"));
    if (p.contains("queries")) c.queries = resolve(base_dir, get<std::string>(p, "paths", "queries"));
    if (p.contains("assets")) c.assets = resolve(base_dir, get<std::string>(p, "paths", "assets"));
    if (p.contains("output") && !p["output"].is_null()) c.output = resolve(base_dir, get<std::string>(p, "paths", "output"));
  }

  const Json backends = j.value("backends", Json::object());
  require_keys(backends, "backends",
               {"embedder", "judge", "guard", "policy", "victim", "response_judge", "crossguard", "rewriter"});
  for (auto role : kBackendRoles) {
    const std::string r(role);
    auto spec = backends.contains(r) ? backend_from_json(backends[r], role) : BackendSpec{};
    const auto prefix = "REDGUARD_BACKEND_" + upper(role);
    if (auto it = env.find(prefix + "_ENDPOINT"); it != env.end() && !it->second.empty()) {
      spec.config.kind = BackendKind::Remote;
      spec.config.endpoint = it->second;
    }
    if (auto it = env.find(prefix + "_TOKEN"); it != env.end() && !it->second.empty()) spec.config.token = it->second;
    if (spec.config.kind == BackendKind::Remote) spec.config.seed.reset();
    if (auto v = spec.config.check(); !v.empty()) config_error("backends." + r + ": " + v.front());
    c.backends.emplace(r, std::move(spec));
  }

  {
    const auto& s = j["stage1"];
    require_keys(s, "stage1", {"max_retries", "top_k", "max_keywords"});
    if (s.contains("max_retries")) c.stage1.max_retries = get<int>(s, "stage1", "max_retries");
    if (s.contains("top_k")) c.stage1.top_k = get<std::size_t>(s, "stage1", "top_k");
    if (s.contains("max_keywords")) c.stage1.max_keywords = get<std::size_t>(s, "stage1", "max_keywords");
    if (c.stage1.max_retries < 0 || c.stage1.top_k == 0) config_error("stage1: max_retries >= 0 and top_k >= 1 required");
  }

  if (j.contains("reward")) {
    const auto& r = j["reward"];
    require_keys(r, "reward", {"tau", "weights", "separator"});
    if (r.contains("tau")) c.reward.tau = get<double>(r, "reward", "tau");
    if (r.contains("weights")) c.reward.weights = get<std::array<double, 3>>(r, "reward", "weights");
    if (r.contains("separator")) c.reward.separator = get<std::string>(r, "reward", "separator");
  }
  if (auto v = c.reward.check(); !v.empty()) config_error("reward: " + v.front());

  if (j.contains("ppo")) c.ppo = ppo_config_from_json(j["ppo"]);
  if (overrides.iterations) c.ppo.iterations = *overrides.iterations;
  if (overrides.seed) c.seed = *overrides.seed;
  c.ppo.seed = c.seed;
  if (auto v = c.ppo.check(); !v.empty()) config_error("ppo: " + v.front());

  if (j.contains("guard")) {
    const auto& g = j["guard"];
    require_keys(g, "guard", {"composition", "sources", "train"});
    if (g.contains("composition")) c.composition = composition_from_json(g["composition"]);
    if (g.contains("sources")) {
      require_keys(g["sources"], "guard.sources",
                   {"implicit", "explicit-vision-ocr", "explicit-vision-nonocr", "explicit-text", "benign"});
      for (auto it = g["sources"].begin(); it != g["sources"].end(); ++it) {
        auto v = it.value().get<std::string>();
        if (!v.starts_with("@")) v = resolve(base_dir, v).string();
        else if (v != "@rewrites" && v != "@triples") config_error("guard.sources: unknown artifact " + v);
        c.sources[parse_train_bucket(it.key())] = v;
      }
    }
    if (g.contains("train")) {
      require_keys(g["train"], "guard.train",
                   {"base_model_id", "verbalizers", "epochs", "learning_rate", "feature_dim"});
      c.guard_train = guard_train_config_from_json(g["train"]);
    }
  }
  c.guard_train.seed = c.seed;

  if (j.contains("eval")) {
    const auto& e = j["eval"];
    require_keys(e, "eval", {"targets", "suites", "utility_suite", "redteam_targets", "max_concurrent", "strategy_ablation"});
    for (const auto& t : e.value("targets", Json::array())) {
      require_keys(t, "eval.targets[]", {"name", "category", "type", "victim"});
      EvalTargetSpec s{get<std::string>(t, "eval.targets[]", "name"), t.value("category", std::string{"-"}),
                       get<std::string>(t, "eval.targets[]", "type"), t.value("victim", std::string{})};
      if (s.type != "crossguard" && s.type != "text-guard" && s.type != "victim") {
        config_error("eval.targets[]: unknown type \"" + s.type + "\"");
      }
      if (s.type == "victim" && s.victim != "echo" && s.victim != "refusal" && s.victim != "guarded" &&
          s.victim != "remote") {
        config_error("eval.targets[] " + s.name + ": victim must be echo, refusal, guarded or remote");
      }
      c.targets.push_back(std::move(s));
    }
    for (const auto& s : e.value("suites", Json::array())) {
      auto v = s.get<std::string>();
      if (v.starts_with("@")) {
        if (v != "@rewritten" && v != "@base") config_error("eval.suites: unknown artifact " + v);
      } else {
        v = resolve(base_dir, v).string();
      }
      c.suites.push_back(std::move(v));
    }
    if (e.contains("utility_suite") && !e["utility_suite"].is_null()) {
      c.utility_suite = resolve(base_dir, get<std::string>(e, "eval", "utility_suite")).string();
    }
    c.redteam_targets = e.value("redteam_targets", std::vector<std::string>{});
    c.max_concurrent = e.value("max_concurrent", 4);
    if (c.max_concurrent <= 0) config_error("eval.max_concurrent must be positive");
    if (e.contains("strategy_ablation") && !e["strategy_ablation"].is_null()) {
      const auto& a = e["strategy_ablation"];
      require_keys(a, "eval.strategy_ablation", {"demonstrations", "k", "targets"});
      StrategyAblationSpec s;
      s.demonstrations = resolve(base_dir, get<std::string>(a, "eval.strategy_ablation", "demonstrations"));
      s.k = a.value("k", std::size_t{3});
      s.targets = a.value("targets", std::vector<std::string>{});
      c.ablation = std::move(s);
    }
    std::set<std::string> names;
    for (const auto& t : c.targets) {
      if (!names.insert(t.name).second) config_error("eval.targets: duplicate name " + t.name);
    }
    auto known = [&](const std::vector<std::string>& list, std::string_view where) {
      for (const auto& n : list) {
        if (!names.contains(n)) config_error(fmt::format("{}: unknown target \"{}\"", where, n));
      }
    };
    known(c.redteam_targets, "eval.redteam_targets");
    if (c.ablation) known(c.ablation->targets, "eval.strategy_ablation.targets");
  }

  if (overrides.output) c.output = fs::absolute(*overrides.output).lexically_normal();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& file, const ConfigOverrides& overrides,
                                    const std::map<std::string, std::string>& env) {
  check_exists(file, "config file");
  Json j;
  try {
    j = Json::parse(read_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, fmt::format("{}: {}", file.string(), e.what()));
  }
  return pipeline_config_from_json(j, fs::absolute(file).parent_path().lexically_normal(), overrides, env);
}

Json pipeline_config_to_json(const PipelineConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["paths"] = {{"manifest", relative_to(c.base_dir, c.manifest)},
                {"queries", relative_to(c.base_dir, c.queries)},
                {"assets", relative_to(c.base_dir, c.assets)}};
  if (c.output) j["paths"]["output"] = relative_to(c.base_dir, *c.output);
  Json b = Json::object();
  for (auto role : kBackendRoles) b[std::string(role)] = backend_to_json(c.backends.at(std::string(role)));
  j["backends"] = std::move(b);
  j["stage1"] = {{"max_retries", c.stage1.max_retries}, {"top_k", c.stage1.top_k}, {"max_keywords", c.stage1.max_keywords}};
  j["reward"] = {{"tau", c.reward.tau}, {"weights", c.reward.weights}, {"separator", c.reward.separator}};
  j["ppo"] = ppo_config_to_json(c.ppo);
  Json sources = Json::object();
  for (const auto& [bucket, src] : c.sources) {
    sources[std::string(to_string(bucket))] = src.starts_with("@") ? src : relative_to(c.base_dir, src);
  }
  j["guard"] = {{"composition", composition_to_json(c.composition)},
                {"sources", std::move(sources)},
                {"train", guard_train_config_to_json(c.guard_train)}};
  Json targets = Json::array();
  for (const auto& t : c.targets) {
    Json tj{{"name", t.name}, {"category", t.category}, {"type", t.type}};
    if (!t.victim.empty()) tj["victim"] = t.victim;
    targets.push_back(std::move(tj));
  }
  Json suites = Json::array();
  for (const auto& s : c.suites) suites.push_back(s.starts_with("@") ? s : relative_to(c.base_dir, s));
  j["eval"] = {{"targets", std::move(targets)},
               {"suites", std::move(suites)},
               {"utility_suite", c.utility_suite ? Json(relative_to(c.base_dir, *c.utility_suite)) : Json(nullptr)},
               {"redteam_targets", c.redteam_targets},
               {"max_concurrent", c.max_concurrent}};
  if (c.ablation) {
    j["eval"]["strategy_ablation"] = {{"demonstrations", relative_to(c.base_dir, c.ablation->demonstrations)},
                                      {"k", c.ablation->k},
                                      {"targets", c.ablation->targets}};
  }
  return j;
}

std::string config_hash(const PipelineConfig& c) {
  Json j = pipeline_config_to_json(c);
  j["paths"].erase("output");
  return hex64(fnv1a64(j.dump()));
}

fs::path resolve_output_dir(const PipelineConfig& c) {
  if (c.output) return *c.output;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  return fs::path("runs") / (std::string(stamp) + "-" + config_hash(c).substr(0, 8));
}

// ---------------------------------------------------------------------------

BackendSet::BackendSet(const PipelineConfig& config) : config_(config) {
  auto spec = [&](std::string_view role) -> const BackendSpec& { return config_.backends.at(std::string(role)); };
  auto mock = [&](std::string_view role) { return spec(role).config.kind == BackendKind::Mock; };

  if (mock("embedder")) {
    embedder_ = std::make_unique<HashEmbedder>(spec("embedder").options.value("dimension", std::size_t{64}),
                                               spec("embedder").config.seed.value_or(0));
  } else {
    embedder_ = std::make_unique<RemoteEmbedder>(spec("embedder").config,
                                                 spec("embedder").options.value("dimension", std::size_t{0}));
  }

  if (mock("judge")) {
    judge_ = std::make_unique<BlocklistJudge>(spec("judge").options.value("blocklist", std::vector<std::string>{}));
  } else {
    judge_ = std::make_unique<RemoteImageJudge>(spec("judge").config);
  }

  if (mock("guard")) {
    const auto& o = spec("guard").options;
    std::vector<MockGuard::Rule> rules;
    for (const auto& r : o.value("rules", Json::array())) {
      rules.push_back({r.at("contains").get<std::string>(), r.value("logit_safe", 0.0), r.value("logit_unsafe", 0.0)});
    }
    guard_ = std::make_unique<MockGuard>(o.value("logit_safe", 0.0), o.value("logit_unsafe", 0.0), std::move(rules),
                                         o.value("lexicon", std::map<std::string, double>{}));
  } else {
    guard_ = std::make_unique<RemoteGuard>(spec("guard").config);
  }

  if (mock("response_judge")) {
    response_judge_ = std::make_unique<RefusalMarkerJudge>();
  } else {
    response_judge_ = std::make_unique<RemoteResponseJudge>(spec("response_judge").config);
  }

  if (mock("rewriter")) {
    rewriter_ = std::make_unique<MockRewriter>();
  } else {
    rewriter_ = std::make_unique<RemoteGenerator>(spec("rewriter").config);
  }

  if (!mock("victim")) remote_victim_ = std::make_unique<RemoteVictim>(spec("victim").config);
  if (!mock("policy")) remote_policy_ = std::make_unique<RemotePolicy>(spec("policy").config);
}

BackendSet::~BackendSet() = default;

CategoricalPolicy BackendSet::initial_policy() const {
  const auto& o = config_.backends.at("policy").options;
  const auto templates = o.value("templates", std::vector<std::string>{});
  if (templates.empty()) config_error("backends.policy.templates: at least one rewrite template is required");
  auto weights = o.value("weights", std::vector<double>{});
  if (weights.empty()) weights.assign(templates.size(), 1.0);
  if (weights.size() != templates.size()) config_error("backends.policy: templates and weights differ in length");
  return CategoricalPolicy::from_weights(templates, weights);
}

Json BackendSet::ids() const {
  Json j;
  j["embedder"] = embedder_->id();
  j["judge"] = judge_->id();
  j["guard"] = guard_->id();
  j["policy"] = remote_policy_ ? remote_policy_->id() : std::string("categorical-policy");
  j["victim"] = remote_victim_ ? remote_victim_->id() : std::string("mock-victims");
  j["response_judge"] = response_judge_->id();
  const auto& cg = config_.backends.at("crossguard");
  j["crossguard"] = cg.config.kind == BackendKind::Mock ? std::string("mock-logistic") : "remote:" + *cg.config.endpoint;
  j["rewriter"] = rewriter_->id();
  return j;
}

// ---------------------------------------------------------------------------

PairSummary cmd_pair(const PipelineConfig& c, const fs::path& out, const std::optional<fs::path>& resume) {
  check_exists(c.manifest, "manifest");
  check_exists(c.queries, "queries file");
  check_exists(c.assets, "assets file");
  const auto manifest = load_manifest(c.manifest);
  const auto queries = load_queries(c.queries, &manifest.categories);
  const auto assets = load_assets(c.assets);
  for (const auto& q : queries) {
    if (auto v = validate(q, &manifest.categories); !v.empty()) {
      throw Error(ErrorKind::InvalidInput, fmt::format("query {}: {}", q.id, v.front()));
    }
  }
  BackendSet backends(c);
  if (backends.embedder().dimension() != manifest.embedding_dim) {
    config_error(fmt::format("embedder dimension {} does not match manifest embedding_dim {}",
                             backends.embedder().dimension(), manifest.embedding_dim));
  }
  write_effective_config(c, out);
  const PairPaths paths(out);
  fs::create_directories(paths.dir);

  std::vector<JointTriple> triples;
  std::vector<Rejection> rejected;
  std::size_t start = 0;
  const auto hash = config_hash(c);
  if (resume) {
    check_exists(*resume, "resume file");
    const auto r = Json::parse(read_file(*resume));
    if (r.value("config_hash", std::string{}) != hash) {
      throw Error(ErrorKind::CheckpointMismatch, "pairing resume file was written under a different config");
    }
    start = r.at("next_query").get<std::size_t>();
    triples = load_triples(paths.triples);
    rejected = load_rejections(paths.rejected);
  }

  const auto index = build_index(assets, backends.embedder());
  write_file_atomic(paths.index, serialize_index(index));
  RuleBasedTagger tagger;
  auto result = assemble_triples(queries, assets, index, backends.judge(), backends.embedder(), tagger, c.stage1, start);
  triples.insert(triples.end(), result.triples.begin(), result.triples.end());
  rejected.insert(rejected.end(), result.rejected.begin(), result.rejected.end());
  write_jsonl(paths.triples, triples);
  write_file_atomic(paths.rejected, rejections_jsonl(rejected));

  if (result.halted) {
    Json r{{"next_query", result.next_query}, {"config_hash", hash}};
    write_file_atomic(paths.resume, r.dump(2) + "\n");
    throw Error(ErrorKind::BackendUnavailable,
                fmt::format("pairing halted at query {} ({}); partial output kept, resume with --resume {}",
                            result.next_query, result.halt_reason, paths.resume.string()));
  }
  if (fs::exists(paths.resume)) fs::remove(paths.resume);
  return {triples.size(), rejected.size()};
}

RedteamSummary cmd_redteam(const PipelineConfig& c, const fs::path& out, const std::optional<fs::path>& resume,
                           int stop_after) {
  const auto triples = require_triples(out);
  BackendSet backends(c);
  if (backends.remote_policy()) {
    config_error("the policy backend is remote; remote policies can be sampled but not trained");
  }
  write_effective_config(c, out);
  const RedteamPaths paths(out);
  fs::create_directories(paths.checkpoints);

  auto policy = backends.initial_policy();
  const auto reference = policy;
  RewardEngine scorer({backends.guard(), backends.embedder()}, c.reward);
  TrainOptions opts;
  opts.checkpoint_dir = paths.checkpoints;
  opts.resume_from = resume;
  opts.stop_after = stop_after;
  opts.config_hash = config_hash(c);

  const auto result = train(triples, policy, reference, scorer, c.ppo, opts);
  write_jsonl(paths.rewrites, result.samples);
  write_file_atomic(paths.metrics, metrics_to_csv(result.metrics));
  Json pj{{"format", "redguard.policy"}, {"templates", policy.templates()}, {"parameters", policy.parameters()}};
  write_file_atomic(paths.policy, pj.dump(2) + "\n");

  RedteamSummary s;
  s.iterations = result.completed_iterations;
  s.rewrites = result.samples.size();
  if (!result.metrics.empty()) s.final_mean_reward = result.metrics.back().mean_reward;
  return s;
}

GuardSummary cmd_train_guard(const PipelineConfig& c, const fs::path& out) {
  if (c.composition.counts.empty()) config_error("guard.composition is not configured");
  if (auto v = c.composition.check(); !v.empty()) config_error("guard.composition: " + v.front());
  write_effective_config(c, out);

  BucketSources sources;
  std::optional<std::vector<JointTriple>> triples;
  auto get_triples = [&]() -> const std::vector<JointTriple>& {
    if (!triples) triples = require_triples(out);
    return *triples;
  };
  for (const auto& [bucket, count] : c.composition.counts) {
    if (count == 0) continue;
    auto it = c.sources.find(bucket);
    if (it == c.sources.end()) {
      throw Error(ErrorKind::CompositionError, fmt::format("bucket {} has no configured source", to_string(bucket)));
    }
    const auto& src = it->second;
    if (src == "@rewrites") {
      sources[bucket] = implicit_examples(get_triples(), require_rewrites(out));
    } else if (src == "@triples") {
      sources[bucket] = explicit_text_examples(get_triples());
    } else {
      check_exists(src, fmt::format("{} source", to_string(bucket)));
      auto examples = load_train_examples(src);
      for (auto& e : examples) {
        if (e.bucket != bucket) {
          config_error(fmt::format("{}: example {} is in bucket {}, expected {}", src, e.id, to_string(e.bucket),
                                   to_string(bucket)));
        }
      }
      sources[bucket] = std::move(examples);
    }
    if (src.starts_with("@")) {
      for (auto& e : sources[bucket]) e.bucket = bucket;
    }
  }

  const auto dataset = build_training_set(sources, c.composition, c.seed);
  const fs::path dir = out / "guard";
  fs::create_directories(dir);
  write_jsonl(dir / "dataset.jsonl", dataset);

  if (c.guard_train.base_model_id != "mock-logistic") {
    config_error("guard.train.base_model_id: only the local mock-logistic trainer is available, got " +
                 c.guard_train.base_model_id);
  }
  LogisticTrainer trainer;
  auto guard = train_guard(dataset, trainer, c.guard_train);
  persist_guard(dir / "manifest.json", guard);
  return {dataset.size(), guard.report.train_accuracy, guard.report.final_loss, dir / "manifest.json"};
}

// ---------------------------------------------------------------------------

namespace {

struct TargetSet {
  std::vector<std::unique_ptr<EvalTarget>> owned;
  std::vector<std::unique_ptr<Victim>> victims;
  std::shared_ptr<const GuardModel> crossguard_model;
  std::unique_ptr<GuardModel> remote_crossguard;
  std::map<std::string, const EvalTarget*> by_name;
  std::vector<const EvalTarget*> ordered;
  std::map<std::string, std::string> category;
};

TargetSet build_targets(const PipelineConfig& c, const BackendSet& b, const fs::path& out) {
  TargetSet ts;
  for (const auto& spec : c.targets) {
    std::unique_ptr<EvalTarget> t;
    if (spec.type == "crossguard") {
      const auto& cg = c.backends.at("crossguard");
      if (cg.config.kind == BackendKind::Mock) {
        const auto manifest = out / "guard" / "manifest.json";
        check_exists(manifest, "guard manifest (run `train-guard` first)");
        if (!ts.crossguard_model) ts.crossguard_model = load_logistic_guard(manifest);
        t = std::make_unique<GuardModelTarget>(*ts.crossguard_model, load_handle(manifest), spec.name);
      } else {
        GuardModelHandle h;
        h.base_model_id = cg.options.value("base_model_id", std::string{"remote"});
        h.adapter_id = cg.options.value("adapter_id", std::string{});
        if (h.adapter_id.empty()) config_error("backends.crossguard.adapter_id is required for a remote guard");
        if (cg.options.contains("verbalizers")) {
          h.verbalizers = cg.options["verbalizers"].get<std::pair<std::string, std::string>>();
        }
        h.training_fingerprint = "remote";
        if (!ts.remote_crossguard) ts.remote_crossguard = std::make_unique<RemoteGuardModel>(cg.config, h.adapter_id);
        t = std::make_unique<GuardModelTarget>(*ts.remote_crossguard, h, spec.name);
      }
    } else if (spec.type == "text-guard") {
      t = std::make_unique<TextGuardTarget>(b.guard(), spec.name);
    } else {
      const Victim* v = nullptr;
      if (spec.victim == "echo") {
        ts.victims.push_back(std::make_unique<EchoVictim>());
        v = ts.victims.back().get();
      } else if (spec.victim == "refusal") {
        ts.victims.push_back(std::make_unique<RefusalVictim>());
        v = ts.victims.back().get();
      } else if (spec.victim == "guarded") {
        ts.victims.push_back(std::make_unique<GuardedVictim>(b.guard(), "guarded:" + b.guard().id()));
        v = ts.victims.back().get();
      } else {
        v = b.remote_victim();
        if (!v) config_error("target " + spec.name + " needs a remote victim backend");
      }
      t = std::make_unique<VictimTarget>(*v, b.response_judge(), spec.name);
    }
    ts.by_name[spec.name] = t.get();
    ts.ordered.push_back(t.get());
    ts.category[spec.name] = spec.category;
    ts.owned.push_back(std::move(t));
  }
  return ts;
}

std::vector<const EvalTarget*> pick(const TargetSet& ts, const std::vector<std::string>& names) {
  std::vector<const EvalTarget*> out;
  for (const auto& n : names) out.push_back(ts.by_name.at(n));
  return out;
}

std::string ablation_csv(const std::vector<std::tuple<std::string, std::string, std::optional<double>>>& rows) {
  std::string out = "strategy,target,asr\n";
  for (const auto& [s, t, a] : rows) out += fmt::format("{},{},{}\n", s, t, a ? format_fixed2(*a) : "");
  return out;
}

}  // namespace

EvalSummary cmd_eval(const PipelineConfig& c, const fs::path& out) {
  if (c.suites.empty()) config_error("no evaluation suites configured (eval.suites is empty)");
  if (c.targets.empty()) config_error("no evaluation targets configured (eval.targets is empty)");
  write_effective_config(c, out);
  BackendSet backends(c);
  auto targets = build_targets(c, backends, out);

  // Red-team artifacts, loaded only when some suite or comparison needs them.
  std::optional<std::vector<JointTriple>> aligned;
  std::optional<std::vector<ScoredRewrite>> rewrites;
  auto artifacts = [&]() {
    if (!aligned) {
      const auto triples = require_triples(out);
      rewrites = require_rewrites(out);
      aligned = aligned_triples(triples, *rewrites);
    }
  };
  auto base_suite = [&]() {
    artifacts();
    return base_suite_from_triples("RedTeam-Base", *aligned);
  };
  auto rewritten = [&]() {
    artifacts();
    return rewritten_suite("RedTeam-Rewritten", *aligned, *rewrites);
  };

  ReportBundle bundle;
  Json skips = Json::object();
  Json unreliable = Json::array();
  std::string records_jsonl;
  std::map<std::string, std::vector<EvalRecord>> security_records;
  bool any_unreliable = false;

  auto run = [&](const EvalTarget& t, const BenchmarkSuite& s) {
    auto r = evaluate(t, s, c.max_concurrent);
    skips[r.target + "/" + r.suite] = r.skipped;
    if (r.unreliable) {
      any_unreliable = true;
      unreliable.push_back(r.target + "/" + r.suite);
      spdlog::warn("{} on {}: {} of {} samples skipped; results flagged unreliable", r.target, r.suite, r.skipped,
                   r.records.size());
    }
    records_jsonl += to_jsonl(r.records);
    return r;
  };

  for (const auto& ref : c.suites) {
    BenchmarkSuite suite;
    if (ref == "@rewritten") suite = rewritten();
    else if (ref == "@base") suite = base_suite();
    else {
      check_exists(ref, "suite manifest");
      suite = load_suite(ref);
    }
    if (suite.attack_kind == AttackKind::Benign) {
      config_error("suite " + suite.name + " is benign; configure it as eval.utility_suite");
    }
    for (const auto* t : targets.ordered) {
      const auto r = run(*t, suite);
      auto& sec = security_records[t->name()];
      sec.insert(sec.end(), r.records.begin(), r.records.end());
      try {
        bundle.table.set(targets.category.at(t->name()), t->name(), {suite.name, suite.bucket}, asr(r.records));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::UndefinedMetric) throw;
        spdlog::warn("{} on {}: {}", t->name(), suite.name, e.what());
      }
    }
  }

  if (c.utility_suite) {
    check_exists(*c.utility_suite, "utility suite manifest");
    const auto suite = load_suite(*c.utility_suite);
    for (const auto* t : targets.ordered) {
      const auto r = run(*t, suite);
      bundle.tradeoff.push_back(tradeoff_point(t->name(), security_records[t->name()], r.records));
    }
  }

  if (!c.redteam_targets.empty()) {
    const auto chosen = pick(targets, c.redteam_targets);
    bundle.redteam = redteam_compare(chosen, base_suite(), rewritten(), c.max_concurrent);
  }

  std::optional<std::string> ablation;
  if (c.ablation) {
    artifacts();
    check_exists(c.ablation->demonstrations, "demonstrations file");
    std::vector<Demonstration> demos;
    const auto content = read_file(c.ablation->demonstrations);
    std::size_t start = 0, line = 0;
    while (start < content.size()) {
      auto end = content.find('\n', start);
      if (end == std::string::npos) end = content.size();
      ++line;
      if (end > start) {
        try {
          const auto j = Json::parse(content.substr(start, end - start));
          demos.push_back({j.at("context").get<JointTriple>(), j.at("rewritten_text").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorKind::ParseError,
                      fmt::format("{}: line {}: {}", c.ablation->demonstrations.string(), line, e.what()));
        }
      }
      start = end + 1;
    }
    const RedteamPaths rp(out);
    check_exists(rp.policy, "trained policy (run `redteam` first)");
    const auto trained = policy_from_file(rp.policy);
    const auto sft = fit_sft_policy(backends.initial_policy(), demos);
    StrategyBackends sb{&trained, &sft, &backends.rewriter(), &demos, c.ablation->k};
    std::vector<std::tuple<std::string, std::string, std::optional<double>>> rows;
    for (auto strategy : {RewriteStrategy::Ppo, RewriteStrategy::InContext, RewriteStrategy::Sft}) {
      Rng rng(c.seed ^ fnv1a64(to_string(strategy)));
      BenchmarkSuite s{"Strategy-" + std::string(to_string(strategy)), EvalBucket::InDomain, AttackKind::Implicit, {}};
      for (const auto& t : *aligned) {
        const auto cand = rewrite_with_strategy(t, strategy, sb, rng);
        s.samples.push_back({t.id, t.image, cand.rewritten_text, GroundTruth::Malicious});
      }
      for (const auto* t : pick(targets, c.ablation->targets)) {
        const auto r = run(*t, s);
        std::optional<double> a;
        try {
          a = asr(r.records);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::UndefinedMetric) throw;
        }
        rows.emplace_back(std::string(to_string(strategy)), t->name(), a);
      }
    }
    ablation = ablation_csv(rows);
  }

  Json meta;
  meta["seed"] = c.seed;
  meta["config_hash"] = config_hash(c);
  meta["backends"] = backends.ids();
  Json protocols = Json::object();
  for (const auto* t : targets.ordered) protocols[t->name()] = t->protocol();
  meta["protocols"] = std::move(protocols);
  Json counts = Json::object();
  const PairPaths pp(out);
  const RedteamPaths rp(out);
  if (fs::exists(pp.triples)) counts["triples"] = load_triples(pp.triples).size();
  if (fs::exists(pp.rejected)) counts["rejected"] = load_rejections(pp.rejected).size();
  if (fs::exists(rp.rewrites)) counts["rewrites"] = load_rewrites(rp.rewrites).size();
  const auto dataset = out / "guard" / "dataset.jsonl";
  if (fs::exists(dataset)) {
    const auto ds = load_train_examples(dataset);
    counts["dataset"] = ds.size();
    Json per = Json::object();
    for (auto bkt : kAllTrainBuckets) {
      per[std::string(to_string(bkt))] = std::count_if(ds.begin(), ds.end(), [&](const auto& e) { return e.bucket == bkt; });
    }
    meta["composition"] = std::move(per);
  }
  meta["counts"] = std::move(counts);
  const auto manifest = out / "guard" / "manifest.json";
  if (fs::exists(manifest)) {
    const auto h = load_handle(manifest);
    meta["guard"] = {{"adapter_id", h.adapter_id}, {"training_fingerprint", h.training_fingerprint}};
  }
  meta["skips"] = std::move(skips);
  meta["unreliable"] = std::move(unreliable);
  bundle.run_meta = std::move(meta);

  const fs::path report = out / "report";
  write_report(report, bundle);
  write_file_atomic(report / "eval_records.jsonl", records_jsonl);
  if (ablation) write_file_atomic(report / "strategy_ablation.csv", *ablation);
  return {report, any_unreliable};
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::InvalidInput:
    case ErrorKind::ParseError:
    case ErrorKind::DuplicateId:
    case ErrorKind::AssetNotFound:
    case ErrorKind::CheckpointMismatch:
    case ErrorKind::SuiteMismatch:
    case ErrorKind::IndexBuildError:
      return 2;
    case ErrorKind::UpdateDiverged:
    case ErrorKind::EmptyRollout:
    case ErrorKind::TrainingFailed:
    case ErrorKind::KLUndefined:
      return 3;
    case ErrorKind::CompositionError:
    case ErrorKind::DegenerateDataset:
      return 4;
    default:
      return 1;
  }
}

}  // namespace redguard
