#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "redguard/backends.hpp"
#include "redguard/domain.hpp"

namespace redguard {

enum class WordClass { Noun, Verb, ProperNoun, Adjective, Adverb, Function, Other };

struct TaggedWord {
  std::string surface;
  WordClass tag = WordClass::Other;
};

class PosTagger {
 public:
  virtual ~PosTagger() = default;
  virtual std::vector<TaggedWord> tag(const std::vector<std::string>& words) const = 0;
  virtual std::string id() const = 0;
};

// Deterministic lexicon-and-suffix tagger. Closed-class and non-visualizable
// words are recognized context-free; noun/verb/proper-noun is decided from
// the neighbouring words.
class RuleBasedTagger final : public PosTagger {
 public:
  std::vector<TaggedWord> tag(const std::vector<std::string>& words) const override;
  std::string id() const override { return "rule-based-tagger/1"; }
};

// True for words the keyword filter always drops ("how", "am", "can", ...).
bool is_stopword(std::string_view lower_word);

// Lowercases and strips inflection. Idempotent: lemmatize(lemmatize(w)) == lemmatize(w).
std::string lemmatize(std::string_view word);

// Content words of the query (nouns, verbs, proper nouns) as lemmas, first
// occurrence order. Throws EmptyKeywords when nothing survives.
std::vector<Keyword> extract_keywords(const MaliciousQuery& query, const PosTagger& tagger);

struct IndexEntry {
  std::string asset_id;
  std::vector<double> vector;

  bool operator==(const IndexEntry&) const = default;
};

struct ImageIndex {
  std::size_t dimension = 0;
  std::string embedder_id;
  std::vector<IndexEntry> entries;

  bool operator==(const ImageIndex&) const = default;
};

// Throws IndexBuildError on duplicate ids, missing captions or a dimension
// that disagrees with the embedder.
ImageIndex build_index(const std::vector<ImageAsset>& assets, const Embedder& embedder);

// Versioned JSONL: one header line, then one line per entry.
std::string serialize_index(const ImageIndex& index);
ImageIndex parse_index(std::string_view content);

struct RankedAsset {
  std::string asset_id;
  double cosine = 0.0;

  bool operator==(const RankedAsset&) const = default;
};

struct MatchResult {
  Keyword keyword;
  std::vector<RankedAsset> ranked;  // cosine descending, ties by ascending asset_id
};

MatchResult match_images(const Keyword& keyword, const ImageIndex& index, std::size_t top_k,
                         const Embedder& embedder);

struct PairingOptions {
  // Judge attempts per keyword are 1 + max_retries (bounded by top_k).
  int max_retries = 5;
  std::size_t top_k = 6;
  // 0 means try every extracted keyword.
  std::size_t max_keywords = 0;
};

struct Rejection {
  std::string query_id;
  std::vector<std::string> reasons;

  bool operator==(const Rejection&) const = default;
};

Json rejection_to_json(const Rejection& r);
Rejection rejection_from_json(const Json& j);

struct PairingResult {
  std::vector<JointTriple> triples;
  std::vector<Rejection> rejected;
  // Index of the first query not yet processed; equals queries.size() when complete.
  std::size_t next_query = 0;
  bool halted = false;
  std::string halt_reason;
};

// Runs the keyword -> image -> judge cascade for queries[start..]. A judge
// outage stops the run and returns what was assembled so far with
// halted = true and next_query pointing at the interrupted query.
PairingResult assemble_triples(const std::vector<MaliciousQuery>& queries,
                               const std::vector<ImageAsset>& assets, const ImageIndex& index,
                               const ImageJudge& judge, const Embedder& embedder,
                               const PosTagger& tagger, const PairingOptions& options = {},
                               std::size_t start_query = 0);

}  // namespace redguard
