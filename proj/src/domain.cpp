#include "redguard/domain.hpp"

#include <cmath>
#include <unordered_set>

#include <fmt/format.h>

#include "redguard/text.hpp"

namespace redguard {

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table,
             std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw Error(ErrorKind::ParseError, fmt::format("unknown {} \"{}\"", what, s));
}

constexpr std::array<std::pair<std::string_view, SafetyLabel>, 2> kSafetyLabels{
    {{"safe", SafetyLabel::Safe}, {"unsafe", SafetyLabel::Unsafe}}};
constexpr std::array<std::pair<std::string_view, EvalBucket>, 2> kEvalBuckets{
    {{"in-domain", EvalBucket::InDomain}, {"out-of-domain", EvalBucket::OutOfDomain}}};
constexpr std::array<std::pair<std::string_view, GroundTruth>, 2> kGroundTruths{
    {{"malicious", GroundTruth::Malicious}, {"benign", GroundTruth::Benign}}};
constexpr std::array<std::pair<std::string_view, TrainBucket>, 5> kTrainBuckets{
    {{"implicit", TrainBucket::Implicit},
     {"explicit-vision-ocr", TrainBucket::ExplicitVisionOcr},
     {"explicit-vision-nonocr", TrainBucket::ExplicitVisionNonOcr},
     {"explicit-text", TrainBucket::ExplicitText},
     {"benign", TrainBucket::Benign}}};
constexpr std::array<std::pair<std::string_view, PartOfSpeech>, 3> kPos{
    {{"noun", PartOfSpeech::Noun}, {"verb", PartOfSpeech::Verb}, {"proper-noun", PartOfSpeech::ProperNoun}}};

template <class E, std::size_t N>
std::string_view name_of(E v, const std::array<std::pair<std::string_view, E>, N>& table) {
  for (const auto& [name, value] : table) {
    if (value == v) return name;
  }
  return "?";
}

bool in_range(double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; }

void prefix_into(Violations& out, const Violations& inner, std::string_view prefix) {
  for (const auto& v : inner) out.push_back(std::string(prefix) + v);
}

}  // namespace

std::string_view to_string(SafetyLabel v) { return name_of(v, kSafetyLabels); }
std::string_view to_string(EvalBucket v) { return name_of(v, kEvalBuckets); }
std::string_view to_string(GroundTruth v) { return name_of(v, kGroundTruths); }
std::string_view to_string(TrainBucket v) { return name_of(v, kTrainBuckets); }
std::string_view to_string(PartOfSpeech v) { return name_of(v, kPos); }

SafetyLabel parse_safety_label(std::string_view s) { return parse_enum(s, kSafetyLabels, "label"); }
EvalBucket parse_eval_bucket(std::string_view s) { return parse_enum(s, kEvalBuckets, "bucket"); }
GroundTruth parse_ground_truth(std::string_view s) { return parse_enum(s, kGroundTruths, "ground truth"); }
TrainBucket parse_train_bucket(std::string_view s) { return parse_enum(s, kTrainBuckets, "train bucket"); }
PartOfSpeech parse_part_of_speech(std::string_view s) { return parse_enum(s, kPos, "part of speech"); }

CategoryRegistry::CategoryRegistry(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() != kSize) {
    throw Error(ErrorKind::ConfigError,
                fmt::format("category registry needs {} entries, got {}", kSize, names_.size()));
  }
  std::unordered_set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw Error(ErrorKind::ConfigError, "empty category name");
    if (!seen.insert(n).second) throw Error(ErrorKind::ConfigError, "duplicate category " + n);
  }
}

bool CategoryRegistry::contains(std::string_view name) const {
  for (const auto& n : names_) {
    if (n == name) return true;
  }
  return false;
}

Json manifest_to_json(const CorpusManifest& m) {
  Json j;
  j["schema_version"] = m.schema_version;
  j["embedding_dim"] = m.embedding_dim;
  j["categories"] = m.categories.names();
  return j;
}

CorpusManifest manifest_from_json(const Json& j) {
  try {
    CorpusManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kSchemaVersion) {
      throw Error(ErrorKind::ConfigError,
                  fmt::format("unsupported schema_version {}", m.schema_version));
    }
    m.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    if (m.embedding_dim == 0) throw Error(ErrorKind::ConfigError, "embedding_dim must be positive");
    m.categories = CategoryRegistry(j.at("categories").get<std::vector<std::string>>());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("manifest: ") + e.what());
  }
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

RewriteCandidate make_candidate(std::string triple_id, std::string text, double logprob, int step,
                                std::string strategy, int action) {
  RewriteCandidate c;
  c.triple_id = std::move(triple_id);
  c.tokens = tokenize(text);
  c.rewritten_text = std::move(text);
  c.logprob = logprob;
  c.step = step;
  c.strategy = std::move(strategy);
  c.action = action;
  return c;
}

GuardVerdict GuardVerdict::from_p_safe(double p_safe) {
  return {p_safe >= 0.5 ? SafetyLabel::Safe : SafetyLabel::Unsafe, p_safe};
}

EvalRecord make_eval_record(std::string sample_id, std::string benchmark, EvalBucket bucket,
                            GroundTruth truth, std::optional<GuardVerdict> verdict) {
  EvalRecord r;
  r.sample_id = std::move(sample_id);
  r.benchmark = std::move(benchmark);
  r.bucket = bucket;
  r.ground_truth = truth;
  r.verdict = verdict;
  r.attack_success = verdict && truth == GroundTruth::Malicious && verdict->label == SafetyLabel::Safe;
  return r;
}

// ---------------------------------------------------------------------------
// Validation

Violations validate(const MaliciousQuery& q, const CategoryRegistry* registry) {
  Violations v;
  if (q.id.empty()) v.emplace_back("id empty");
  if (q.text.empty()) v.emplace_back("text empty");
  if (registry && !registry->empty()) {
    if (!registry->contains(q.category)) v.emplace_back("category not in registry");
  } else if (q.category.empty()) {
    v.emplace_back("category empty");
  }
  return v;
}

Violations validate(const ImageAsset& a, std::size_t expected_dim) {
  Violations v;
  if (a.id.empty()) v.emplace_back("id empty");
  if (!a.embedding.empty()) {
    if (expected_dim != 0 && a.embedding.size() != expected_dim) {
      v.push_back(fmt::format("embedding dimension {} != {}", a.embedding.size(), expected_dim));
    }
    bool finite = true;
    for (double x : a.embedding) finite = finite && std::isfinite(x);
    if (!finite) {
      v.emplace_back("embedding not finite");
    } else if (std::fabs(l2_norm(a.embedding) - 1.0) > 1e-6) {
      v.emplace_back("embedding not unit norm");
    }
  }
  return v;
}

Violations validate(const Keyword& k) {
  Violations v;
  if (k.surface.empty()) v.emplace_back("surface empty");
  if (k.lemma.empty()) v.emplace_back("lemma empty");
  return v;
}

Violations validate(const JointTriple& t) {
  Violations v;
  if (t.id.empty()) v.emplace_back("id empty");
  if (!t.image.verified_benign) v.emplace_back("image not verified benign");
  if (!in_range(t.match_score, -1.0, 1.0)) v.emplace_back("match_score out of [-1,1]");
  prefix_into(v, validate(t.image), "image.");
  prefix_into(v, validate(t.text), "text.");
  prefix_into(v, validate(t.keyword), "keyword.");
  return v;
}

Violations validate(const RewriteCandidate& c) {
  Violations v;
  if (c.triple_id.empty()) v.emplace_back("triple_id empty");
  if (c.rewritten_text.empty()) {
    v.emplace_back("rewritten_text empty");
  } else {
    try {
      if (tokenize(c.rewritten_text) != c.tokens) v.emplace_back("tokens inconsistent with rewritten_text");
    } catch (const Error&) {
      v.emplace_back("rewritten_text has no tokens");
    }
  }
  if (!std::isfinite(c.logprob) || c.logprob > 0.0) v.emplace_back("logprob out of (-inf,0]");
  if (c.step < 0) v.emplace_back("step negative");
  return v;
}

Violations validate(const RewardBreakdown& r) {
  Violations v;
  if (!in_range(r.tau, 0.0, 1.0) || r.tau >= 1.0) v.emplace_back("tau out of [0,1)");
  if (!in_range(r.r_safety, 0.0, 1.0)) v.emplace_back("r_safety out of [0,1]");
  if (!in_range(r.r_sim, -1.0, 1.0)) v.emplace_back("r_sim out of [-1,1]");
  if (!in_range(r.r_overlap, r.tau, 1.0)) v.emplace_back("r_overlap out of [tau,1]");
  double wsum = 0.0;
  bool nonneg = true;
  for (double w : r.weights) {
    nonneg = nonneg && std::isfinite(w) && w >= 0.0;
    wsum += w;
  }
  if (!nonneg || std::fabs(wsum - 1.0) > 1e-9) v.emplace_back("weights not a convex combination");
  const double expected =
      r.weights[0] * r.r_safety + r.weights[1] * r.r_sim + r.weights[2] * r.r_overlap;
  if (!std::isfinite(r.r_combined) || std::fabs(r.r_combined - expected) > 1e-12) {
    v.emplace_back("r_combined inconsistent");
  }
  if (!std::isfinite(r.kl) || r.kl < 0.0) v.emplace_back("kl negative");
  if (!std::isfinite(r.kl_lambda) || r.kl_lambda < 0.0) v.emplace_back("kl_lambda negative");
  if (!std::isfinite(r.objective) ||
      std::fabs(r.objective - (r.r_combined - r.kl_lambda * r.kl)) > 1e-9) {
    v.emplace_back("objective inconsistent");
  }
  return v;
}

Violations validate(const ScoredRewrite& s) {
  Violations v = validate(s.candidate);
  prefix_into(v, validate(s.reward), "reward.");
  return v;
}

Violations validate(const GuardVerdict& g) {
  Violations v;
  if (!in_range(g.p_safe, 0.0, 1.0)) {
    v.emplace_back("p_safe out of [0,1]");
  } else if ((g.p_safe >= 0.5) != (g.label == SafetyLabel::Safe)) {
    v.emplace_back("label inconsistent with p_safe");
  }
  return v;
}

Violations validate(const EvalRecord& e) {
  Violations v;
  if (e.sample_id.empty()) v.emplace_back("sample_id empty");
  if (e.benchmark.empty()) v.emplace_back("benchmark empty");
  const bool expected = e.verdict && e.ground_truth == GroundTruth::Malicious &&
                        e.verdict->label == SafetyLabel::Safe;
  if (e.attack_success != expected) v.emplace_back("attack_success inconsistent");
  if (e.verdict) prefix_into(v, validate(*e.verdict), "verdict.");
  return v;
}

Violations validate(const TrainExample& e) {
  Violations v;
  if (e.text.empty()) v.emplace_back("text empty");
  if ((e.bucket == TrainBucket::Benign) != (e.label == SafetyLabel::Safe)) {
    v.emplace_back("bucket/label inconsistent");
  }
  if (e.image) prefix_into(v, validate(*e.image), "image.");
  return v;
}

Violations validate(const Record& r) {
  return std::visit([](const auto& rec) { return validate(rec); }, r);
}

// ---------------------------------------------------------------------------
// JSON

void to_json(Json& j, const MaliciousQuery& v) {
  j = Json::object();
  j["id"] = v.id;
  j["text"] = v.text;
  j["category"] = v.category;
  j["source"] = v.source;
}

void from_json(const Json& j, MaliciousQuery& v) {
  v.id = j.at("id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.category = j.at("category").get<std::string>();
  v.source = j.value("source", std::string{});
}

void to_json(Json& j, const ImageAsset& v) {
  j = Json::object();
  j["id"] = v.id;
  j["location"] = v.location;
  j["caption"] = v.caption;
  j["embedding"] = v.embedding;
  j["verified_benign"] = v.verified_benign;
}

void from_json(const Json& j, ImageAsset& v) {
  v.id = j.at("id").get<std::string>();
  v.location = j.value("location", std::string{});
  v.caption = j.value("caption", std::string{});
  v.embedding = j.value("embedding", std::vector<double>{});
  v.verified_benign = j.value("verified_benign", false);
}

void to_json(Json& j, const Keyword& v) {
  j = Json::object();
  j["surface"] = v.surface;
  j["lemma"] = v.lemma;
  j["pos"] = to_string(v.pos);
  j["source_query_id"] = v.source_query_id;
}

void from_json(const Json& j, Keyword& v) {
  v.surface = j.at("surface").get<std::string>();
  v.lemma = j.at("lemma").get<std::string>();
  v.pos = parse_part_of_speech(j.at("pos").get<std::string>());
  v.source_query_id = j.value("source_query_id", std::string{});
}

void to_json(Json& j, const JointTriple& v) {
  j = Json::object();
  j["id"] = v.id;
  j["image"] = v.image;
  j["text"] = v.text;
  j["keyword"] = v.keyword;
  j["match_score"] = v.match_score;
}

void from_json(const Json& j, JointTriple& v) {
  v.id = j.at("id").get<std::string>();
  v.image = j.at("image").get<ImageAsset>();
  v.text = j.at("text").get<MaliciousQuery>();
  v.keyword = j.at("keyword").get<Keyword>();
  v.match_score = j.at("match_score").get<double>();
}

void to_json(Json& j, const RewriteCandidate& v) {
  j = Json::object();
  j["triple_id"] = v.triple_id;
  j["rewritten_text"] = v.rewritten_text;
  j["tokens"] = v.tokens;
  j["logprob"] = v.logprob;
  j["step"] = v.step;
  j["strategy"] = v.strategy;
  j["action"] = v.action;
}

void from_json(const Json& j, RewriteCandidate& v) {
  v.triple_id = j.at("triple_id").get<std::string>();
  v.rewritten_text = j.at("rewritten_text").get<std::string>();
  v.tokens = j.at("tokens").get<std::vector<std::string>>();
  v.logprob = j.at("logprob").get<double>();
  v.step = j.at("step").get<int>();
  v.strategy = j.value("strategy", std::string("ppo"));
  v.action = j.value("action", -1);
}

void to_json(Json& j, const RewardBreakdown& v) {
  j = Json::object();
  j["r_safety"] = v.r_safety;
  j["r_sim"] = v.r_sim;
  j["r_overlap"] = v.r_overlap;
  j["weights"] = v.weights;
  j["r_combined"] = v.r_combined;
  j["kl"] = v.kl;
  j["kl_lambda"] = v.kl_lambda;
  j["objective"] = v.objective;
  j["tau"] = v.tau;
}

void from_json(const Json& j, RewardBreakdown& v) {
  v.r_safety = j.at("r_safety").get<double>();
  v.r_sim = j.at("r_sim").get<double>();
  v.r_overlap = j.at("r_overlap").get<double>();
  v.weights = j.at("weights").get<std::array<double, 3>>();
  v.r_combined = j.at("r_combined").get<double>();
  v.kl = j.at("kl").get<double>();
  v.kl_lambda = j.value("kl_lambda", 0.0);
  v.objective = j.at("objective").get<double>();
  v.tau = j.value("tau", 0.2);
}

void to_json(Json& j, const ScoredRewrite& v) {
  j = v.candidate;
  j["reward"] = v.reward;
}

void from_json(const Json& j, ScoredRewrite& v) {
  v.candidate = j.get<RewriteCandidate>();
  v.reward = j.at("reward").get<RewardBreakdown>();
}

void to_json(Json& j, const GuardVerdict& v) {
  j = Json::object();
  j["label"] = to_string(v.label);
  j["p_safe"] = v.p_safe;
}

void from_json(const Json& j, GuardVerdict& v) {
  v.label = parse_safety_label(j.at("label").get<std::string>());
  v.p_safe = j.at("p_safe").get<double>();
}

void to_json(Json& j, const EvalRecord& v) {
  j = Json::object();
  j["sample_id"] = v.sample_id;
  j["benchmark"] = v.benchmark;
  j["bucket"] = to_string(v.bucket);
  j["ground_truth"] = to_string(v.ground_truth);
  j["verdict"] = v.verdict ? Json(*v.verdict) : Json(nullptr);
  j["attack_success"] = v.attack_success;
  j["skipped"] = v.skipped();
}

void from_json(const Json& j, EvalRecord& v) {
  v.sample_id = j.at("sample_id").get<std::string>();
  v.benchmark = j.at("benchmark").get<std::string>();
  v.bucket = parse_eval_bucket(j.at("bucket").get<std::string>());
  v.ground_truth = parse_ground_truth(j.at("ground_truth").get<std::string>());
  const auto& verdict = j.at("verdict");
  if (verdict.is_null()) {
    v.verdict.reset();
  } else {
    v.verdict = verdict.get<GuardVerdict>();
  }
  v.attack_success = j.at("attack_success").get<bool>();
}

void to_json(Json& j, const TrainExample& v) {
  j = Json::object();
  j["id"] = v.id;
  j["image"] = v.image ? Json(*v.image) : Json(nullptr);
  j["text"] = v.text;
  j["label"] = to_string(v.label);
  j["bucket"] = to_string(v.bucket);
}

void from_json(const Json& j, TrainExample& v) {
  v.id = j.value("id", std::string{});
  const auto it = j.find("image");
  if (it == j.end() || it->is_null()) {
    v.image.reset();
  } else {
    v.image = it->get<ImageAsset>();
  }
  v.text = j.at("text").get<std::string>();
  v.bucket = parse_train_bucket(j.at("bucket").get<std::string>());
  // Label follows from the bucket when absent.
  if (j.contains("label")) {
    v.label = parse_safety_label(j.at("label").get<std::string>());
  } else {
    v.label = v.bucket == TrainBucket::Benign ? SafetyLabel::Safe : SafetyLabel::Unsafe;
  }
}

Json record_to_json(const Record& r) {
  return std::visit(
      [](const auto& rec) {
        using T = std::decay_t<decltype(rec)>;
        Json out;
        out["kind"] = RecordKind<T>::name;
        Json body = rec;
        for (auto& [k, v] : body.items()) out[k] = v;
        return out;
      },
      r);
}

namespace {

template <class T>
bool try_parse_kind(const Json& j, std::string_view kind, Record& out) {
  if (kind != RecordKind<T>::name) return false;
  out = j.get<T>();
  return true;
}

}  // namespace

Record record_from_json(const Json& j) {
  const auto kind = j.at("kind").get<std::string>();
  Record out;
  if (try_parse_kind<MaliciousQuery>(j, kind, out) || try_parse_kind<ImageAsset>(j, kind, out) ||
      try_parse_kind<JointTriple>(j, kind, out) || try_parse_kind<ScoredRewrite>(j, kind, out) ||
      try_parse_kind<TrainExample>(j, kind, out) || try_parse_kind<EvalRecord>(j, kind, out)) {
    return out;
  }
  throw Error(ErrorKind::ParseError, "unknown record kind \"" + kind + "\"");
}

std::string serialize_jsonl(const std::vector<Record>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

std::vector<Record> parse_jsonl(std::string_view content, std::string_view source) {
  std::vector<Record> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    auto end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    auto line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(record_from_json(Json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ParseError, fmt::format("{}: line {}: {}", source, line_no, e.what()));
    } catch (const Error& e) {
      throw Error(ErrorKind::ParseError, fmt::format("{}: line {}: {}", source, line_no, e.what()));
    }
  }
  return out;
}

namespace {

template <class T>
std::vector<T> load_unique(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::InvalidInput, "missing file " + path.string());
  }
  auto records = from_jsonl<T>(read_file(path), path.string());
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!seen.insert(records[i].id).second) {
      throw Error(ErrorKind::DuplicateId,
                  fmt::format("{}: id \"{}\" repeated at record {}", path.string(), records[i].id, i + 1));
    }
  }
  return records;
}

}  // namespace

std::vector<MaliciousQuery> load_queries(const std::filesystem::path& path,
                                         const CategoryRegistry* registry) {
  auto out = load_unique<MaliciousQuery>(path);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto v = validate(out[i], registry);
    if (!v.empty()) {
      throw Error(ErrorKind::InvalidInput,
                  fmt::format("{}: query \"{}\": {}", path.string(), out[i].id, v.front()));
    }
  }
  return out;
}

std::vector<ImageAsset> load_assets(const std::filesystem::path& path) {
  return load_unique<ImageAsset>(path);
}

std::vector<JointTriple> load_triples(const std::filesystem::path& path) {
  return load_unique<JointTriple>(path);
}

std::vector<ScoredRewrite> load_rewrites(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::InvalidInput, "missing file " + path.string());
  }
  return from_jsonl<ScoredRewrite>(read_file(path), path.string());
}

std::vector<TrainExample> load_train_examples(const std::filesystem::path& path) {
  return load_unique<TrainExample>(path);
}

}  // namespace redguard
