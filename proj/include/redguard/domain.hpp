#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "redguard/error.hpp"
#include "redguard/util.hpp"

namespace redguard {

using Json = nlohmann::ordered_json;

enum class SafetyLabel { Safe, Unsafe };
enum class EvalBucket { InDomain, OutOfDomain };
enum class GroundTruth { Malicious, Benign };
enum class TrainBucket { Implicit, ExplicitVisionOcr, ExplicitVisionNonOcr, ExplicitText, Benign };
enum class PartOfSpeech { Noun, Verb, ProperNoun };

std::string_view to_string(SafetyLabel v);
std::string_view to_string(EvalBucket v);
std::string_view to_string(GroundTruth v);
std::string_view to_string(TrainBucket v);
std::string_view to_string(PartOfSpeech v);

SafetyLabel parse_safety_label(std::string_view s);
EvalBucket parse_eval_bucket(std::string_view s);
GroundTruth parse_ground_truth(std::string_view s);
TrainBucket parse_train_bucket(std::string_view s);
PartOfSpeech parse_part_of_speech(std::string_view s);

inline constexpr std::array<TrainBucket, 5> kAllTrainBuckets = {
    TrainBucket::Implicit, TrainBucket::ExplicitVisionOcr, TrainBucket::ExplicitVisionNonOcr,
    TrainBucket::ExplicitText, TrainBucket::Benign};

// Fixed, ordered list of the 14 safety categories. Names are opaque labels
// supplied by the corpus manifest.
class CategoryRegistry {
 public:
  static constexpr std::size_t kSize = 14;

  CategoryRegistry() = default;
  explicit CategoryRegistry(std::vector<std::string> names);

  bool empty() const { return names_.empty(); }
  bool contains(std::string_view name) const;
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const CategoryRegistry&) const = default;

 private:
  std::vector<std::string> names_;
};

struct CorpusManifest {
  int schema_version = 1;
  std::size_t embedding_dim = 0;
  CategoryRegistry categories;

  bool operator==(const CorpusManifest&) const = default;
};

inline constexpr int kSchemaVersion = 1;

CorpusManifest load_manifest(const std::filesystem::path& path);
Json manifest_to_json(const CorpusManifest& manifest);
CorpusManifest manifest_from_json(const Json& j);

struct MaliciousQuery {
  std::string id;
  std::string text;
  std::string category;
  std::string source;

  bool operator==(const MaliciousQuery&) const = default;
};

struct ImageAsset {
  std::string id;
  std::string location;
  std::string caption;
  // Empty until the asset has been embedded.
  std::vector<double> embedding;
  bool verified_benign = false;

  bool operator==(const ImageAsset&) const = default;
};

struct Keyword {
  std::string surface;
  std::string lemma;
  PartOfSpeech pos = PartOfSpeech::Noun;
  std::string source_query_id;

  bool operator==(const Keyword&) const = default;
};

struct JointTriple {
  std::string id;
  ImageAsset image;
  MaliciousQuery text;
  Keyword keyword;
  double match_score = 0.0;

  bool operator==(const JointTriple&) const = default;
};

struct RewriteCandidate {
  std::string triple_id;
  std::string rewritten_text;
  std::vector<std::string> tokens;
  double logprob = 0.0;
  int step = 0;
  // Which rewrite strategy produced it: "ppo", "in-context" or "sft".
  std::string strategy = "ppo";
  // Policy-internal action index (template id for the categorical policy), -1 if none.
  int action = -1;

  bool operator==(const RewriteCandidate&) const = default;
};

RewriteCandidate make_candidate(std::string triple_id, std::string text, double logprob, int step,
                                std::string strategy = "ppo", int action = -1);

struct RewardBreakdown {
  double r_safety = 0.0;
  double r_sim = 0.0;
  double r_overlap = 1.0;
  std::array<double, 3> weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  double r_combined = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  // KL weight used to form the objective.
  double kl_lambda = 0.0;
  // Overlap threshold in force when the breakdown was computed.
  double tau = 0.2;

  bool operator==(const RewardBreakdown&) const = default;
};

struct ScoredRewrite {
  RewriteCandidate candidate;
  RewardBreakdown reward;

  bool operator==(const ScoredRewrite&) const = default;
};

struct GuardVerdict {
  SafetyLabel label = SafetyLabel::Unsafe;
  double p_safe = 0.0;

  // Ties at exactly 0.5 resolve to safe.
  static GuardVerdict from_p_safe(double p_safe);

  bool operator==(const GuardVerdict&) const = default;
};

struct EvalRecord {
  std::string sample_id;
  std::string benchmark;
  EvalBucket bucket = EvalBucket::InDomain;
  GroundTruth ground_truth = GroundTruth::Malicious;
  // Absent when the backend failed and the sample was skipped.
  std::optional<GuardVerdict> verdict;
  bool attack_success = false;

  bool skipped() const { return !verdict.has_value(); }
  bool operator==(const EvalRecord&) const = default;
};

EvalRecord make_eval_record(std::string sample_id, std::string benchmark, EvalBucket bucket,
                            GroundTruth truth, std::optional<GuardVerdict> verdict);

struct TrainExample {
  std::string id;
  std::optional<ImageAsset> image;
  std::string text;
  SafetyLabel label = SafetyLabel::Unsafe;
  TrainBucket bucket = TrainBucket::Benign;

  bool operator==(const TrainExample&) const = default;
};

// Validation returns violations as data; an empty list means every invariant holds.
using Violations = std::vector<std::string>;

Violations validate(const MaliciousQuery& q, const CategoryRegistry* registry = nullptr);
Violations validate(const ImageAsset& a, std::size_t expected_dim = 0);
Violations validate(const Keyword& k);
Violations validate(const JointTriple& t);
Violations validate(const RewriteCandidate& c);
Violations validate(const RewardBreakdown& r);
Violations validate(const ScoredRewrite& s);
Violations validate(const GuardVerdict& v);
Violations validate(const EvalRecord& e);
Violations validate(const TrainExample& e);

void to_json(Json& j, const MaliciousQuery& v);
void from_json(const Json& j, MaliciousQuery& v);
void to_json(Json& j, const ImageAsset& v);
void from_json(const Json& j, ImageAsset& v);
void to_json(Json& j, const Keyword& v);
void from_json(const Json& j, Keyword& v);
void to_json(Json& j, const JointTriple& v);
void from_json(const Json& j, JointTriple& v);
void to_json(Json& j, const RewriteCandidate& v);
void from_json(const Json& j, RewriteCandidate& v);
void to_json(Json& j, const RewardBreakdown& v);
void from_json(const Json& j, RewardBreakdown& v);
void to_json(Json& j, const ScoredRewrite& v);
void from_json(const Json& j, ScoredRewrite& v);
void to_json(Json& j, const GuardVerdict& v);
void from_json(const Json& j, GuardVerdict& v);
void to_json(Json& j, const EvalRecord& v);
void from_json(const Json& j, EvalRecord& v);
void to_json(Json& j, const TrainExample& v);
void from_json(const Json& j, TrainExample& v);

// Any record that can appear in a pipeline JSONL file. Each serialized line
// starts with a "kind" discriminator.
using Record = std::variant<MaliciousQuery, ImageAsset, JointTriple, ScoredRewrite, TrainExample,
                            EvalRecord>;

template <class T>
struct RecordKind;
template <> struct RecordKind<MaliciousQuery> { static constexpr std::string_view name = "query"; };
template <> struct RecordKind<ImageAsset> { static constexpr std::string_view name = "asset"; };
template <> struct RecordKind<JointTriple> { static constexpr std::string_view name = "triple"; };
template <> struct RecordKind<ScoredRewrite> { static constexpr std::string_view name = "rewrite"; };
template <> struct RecordKind<TrainExample> { static constexpr std::string_view name = "train_example"; };
template <> struct RecordKind<EvalRecord> { static constexpr std::string_view name = "eval_record"; };

Violations validate(const Record& r);
Json record_to_json(const Record& r);
Record record_from_json(const Json& j);

std::string serialize_jsonl(const std::vector<Record>& records);
// Throws ParseError naming the 1-based line number of the first bad line.
std::vector<Record> parse_jsonl(std::string_view content, std::string_view source = "<memory>");

template <class T>
std::string to_jsonl(const std::vector<T>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(Record{r}).dump();
    out += '\n';
  }
  return out;
}

template <class T>
std::vector<T> from_jsonl(std::string_view content, std::string_view source = "<memory>") {
  std::vector<T> out;
  std::size_t line_no = 0;
  for (auto& rec : parse_jsonl(content, source)) {
    ++line_no;
    if (auto* p = std::get_if<T>(&rec)) {
      out.push_back(std::move(*p));
    } else {
      throw Error(ErrorKind::ParseError, std::string(source) + ": line " + std::to_string(line_no) +
                                             " is not a " + std::string(RecordKind<T>::name));
    }
  }
  return out;
}

// Reads a typed corpus and rejects duplicate ids (first duplicate reported).
std::vector<MaliciousQuery> load_queries(const std::filesystem::path& path,
                                         const CategoryRegistry* registry = nullptr);
std::vector<ImageAsset> load_assets(const std::filesystem::path& path);
std::vector<JointTriple> load_triples(const std::filesystem::path& path);
std::vector<ScoredRewrite> load_rewrites(const std::filesystem::path& path);
std::vector<TrainExample> load_train_examples(const std::filesystem::path& path);

template <class T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& records) {
  write_file_atomic(path, to_jsonl(records));
}

}  // namespace redguard
