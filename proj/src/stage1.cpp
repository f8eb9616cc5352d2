#include "redguard/stage1.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "redguard/error.hpp"
#include "redguard/text.hpp"

namespace redguard {

namespace {

const std::unordered_set<std::string_view>& function_words() {
  static const std::unordered_set<std::string_view> words = {
      // determiners, quantifiers
      "a", "an", "the", "this", "that", "these", "those", "some", "any", "no", "every", "each",
      "all", "both", "either", "neither", "another", "other", "such", "much", "many", "more",
      "most", "few", "less", "least", "several", "enough", "own", "same",
      // pronouns
      "i", "me", "my", "mine", "myself", "you", "your", "yours", "yourself", "yourselves", "he",
      "him", "his", "himself", "she", "her", "hers", "herself", "it", "its", "itself", "we", "us",
      "our", "ours", "ourselves", "they", "them", "their", "theirs", "themselves", "one", "ones",
      "someone", "somebody", "something", "anyone", "anybody", "anything", "everyone",
      "everybody", "everything", "nobody", "nothing", "none", "whoever", "whatever",
      // auxiliaries and modals
      "am", "is", "are", "was", "were", "be", "been", "being", "do", "does", "did", "doing",
      "done", "have", "has", "had", "having", "can", "could", "may", "might", "must", "shall",
      "should", "will", "would", "ought", "cannot", "ain", "don", "doesn", "didn", "isn", "aren",
      "wasn", "weren", "won", "wouldn", "couldn", "shouldn", "hasn", "haven", "hadn", "ll", "ve",
      "re", "s", "t", "d", "m",
      // wh-words
      "how", "what", "which", "who", "whom", "whose", "when", "where", "why", "whether",
      // prepositions and particles
      "about", "above", "across", "after", "against", "along", "among", "around", "as", "at",
      "before", "behind", "below", "beneath", "beside", "between", "beyond", "by", "down",
      "during", "except", "for", "from", "in", "inside", "into", "like", "near", "of", "off",
      "on", "onto", "out", "outside", "over", "past", "per", "since", "through", "throughout",
      "to", "toward", "towards", "under", "until", "up", "upon", "via", "with", "within",
      "without",
      // conjunctions
      "and", "but", "or", "nor", "so", "yet", "if", "then", "than", "because", "though",
      "although", "while", "unless", "whereas", "once",
      // adverbs and discourse words
      "not", "very", "too", "also", "just", "only", "even", "still", "already", "again", "ever",
      "never", "always", "often", "sometimes", "usually", "here", "there", "now", "soon",
      "really", "quite", "rather", "almost", "maybe", "perhaps", "please", "yes", "ok", "okay",
      "well", "instead", "together", "away", "back", "anyway", "else",
      // light verbs and abstractions that do not picture anything
      "get", "gets", "got", "getting", "make", "makes", "made", "making", "go", "goes", "went",
      "going", "gone", "give", "gives", "gave", "given", "take", "takes", "took", "taken", "tell",
      "tells", "told", "know", "knows", "knew", "known", "think", "thinks", "thought", "want",
      "wants", "wanted", "need", "needs", "needed", "let", "lets", "say", "says", "said", "help",
      "helps", "try", "tries", "tried", "use", "uses", "used", "using", "find", "finds", "found",
      "keep", "keeps", "kept", "seem", "seems", "become", "becomes", "way", "ways", "thing",
      "things", "stuff", "lot", "lots", "kind", "sort", "type", "types", "reason", "reasons",
      "idea", "ideas", "time", "times", "tip", "tips", "advice", "step", "steps", "method",
      "methods", "best", "good", "bad", "easy", "easiest", "possible", "able", "sure", "without",
      "explain", "describe", "teach", "people", "person", "guy", "guys", "someone's", "place", "places", "part", "parts"};
  return words;
}

const std::unordered_set<std::string_view>& adjectives() {
  static const std::unordered_set<std::string_view> words = {
      "big", "small", "large", "little", "new", "old", "young", "long", "short", "high", "low",
      "great", "huge", "tiny", "real", "fake", "illegal", "legal", "secret", "quick", "fast",
      "slow", "cheap", "free", "safe", "unsafe", "harmful", "dangerous", "deadly", "toxic",
      "violent", "private", "public", "hot", "cold", "dark", "bright", "red", "blue", "green",
      "black", "white", "full", "empty", "right", "wrong", "true", "false", "strong", "weak",
      "hard", "soft", "rich", "poor", "clean", "dirty", "quiet", "loud", "local", "online",
      "personal", "certain", "different", "important", "main", "whole", "simple", "effective",
      "undetectable", "untraceable", "anonymous", "stolen"};
  return words;
}

const std::unordered_set<std::string_view>& known_verbs() {
  static const std::unordered_set<std::string_view> words = {
      "steal", "kill", "hurt", "harm", "attack", "hack", "break", "poison", "cheat", "lie",
      "rob", "buy", "sell", "build", "hide", "smuggle", "bully", "threaten", "spy", "track",
      "stalk", "forge", "launder", "bribe", "burn", "destroy", "shoot", "stab", "fight", "drive",
      "cook", "grow", "hit", "punch", "kidnap", "scam", "trick", "manipulate", "blackmail",
      "extort", "vandalize", "cut", "sneak", "avoid", "evade", "escape", "bypass", "disable",
      "crack", "copy", "download", "upload", "sabotage", "spread", "inject", "drug", "drink",
      "eat", "open", "unlock", "pick", "carry", "move", "plant", "mix", "create", "write",
      "send", "post", "share", "fake", "dump", "cover", "shoplift", "torture", "abuse",
      "harass", "insult", "mock", "pay", "hire", "rent", "run", "throw", "catch", "pass",
      "start", "stop", "set", "light", "notice", "crash",
      "counterfeit", "assemble", "sharpen", "tamper", "damage"};
  return words;
}

const std::unordered_map<std::string_view, std::string_view>& irregular_lemmas() {
  static const std::unordered_map<std::string_view, std::string_view> table = {
      {"knives", "knife"}, {"wives", "wife"},   {"lives", "life"},     {"wolves", "wolf"},
      {"leaves", "leaf"},  {"thieves", "thief"}, {"children", "child"}, {"men", "man"},
      {"women", "woman"},  {"teeth", "tooth"},  {"feet", "foot"},      {"mice", "mouse"},
      {"geese", "goose"},  {"stole", "steal"},  {"stolen", "steal"},   {"bought", "buy"},
      {"built", "build"},  {"ran", "run"},      {"sold", "sell"},      {"hid", "hide"},
      {"hidden", "hide"},  {"broke", "break"},  {"broken", "break"},   {"drove", "drive"},
      {"driven", "drive"}, {"wrote", "write"},  {"written", "write"},  {"shot", "shoot"},
      {"fought", "fight"}, {"caught", "catch"}, {"taught", "teach"},   {"threw", "throw"},
      {"thrown", "throw"}, {"fled", "flee"},    {"sent", "send"},      {"spent", "spend"},
      {"lost", "lose"},    {"ate", "eat"},      {"eaten", "eat"},      {"drank", "drink"},
      {"drunk", "drink"},  {"paid", "pay"},     {"bit", "bite"},       {"bitten", "bite"},
      {"news", "news"},    {"glasses", "glass"}, {"police", "police"}, {"series", "series"},
      {"species", "species"}, {"gas", "gas"},  {"bus", "bus"},        {"lens", "lens"}};
  return table;
}

bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

bool is_consonant(char c) { return std::isalpha(static_cast<unsigned char>(c)) && !is_vowel(c); }

// Repairs a stem left by removing -ing / -ed.
std::string repair_stem(std::string stem) {
  const auto n = stem.size();
  if (n >= 2 && stem[n - 1] == stem[n - 2] && is_consonant(stem[n - 1]) && stem[n - 1] != 'l' &&
      stem[n - 1] != 's' && stem[n - 1] != 'z' && stem[n - 1] != 'f') {
    stem.pop_back();
    return stem;
  }
  if (!stem.empty() && (stem.back() == 'v' || stem.back() == 'c')) return stem + "e";
  if (stem.ends_with("iz") || stem.ends_with("yz") || stem.ends_with("rg") || stem.ends_with("dg")) return stem + "e";
  if (n == 3 && is_consonant(stem[0]) && is_vowel(stem[1]) && is_consonant(stem[2]) &&
      stem[2] != 'w' && stem[2] != 'x' && stem[2] != 'y') {
    return stem + "e";
  }
  return stem;
}

bool all_alpha(std::string_view w) {
  return std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isalpha(c) != 0; });
}

std::string lemma_step(const std::string& w) {
  if (auto it = irregular_lemmas().find(w); it != irregular_lemmas().end()) return std::string(it->second);
  // Rules only touch plain ASCII words.
  if (!all_alpha(w)) return w;
  const auto n = w.size();
  auto ends = [&](std::string_view suffix) { return w.ends_with(suffix); };
  if (n > 4 && ends("ies")) return w.substr(0, n - 3) + "y";
  if (n > 4 && ends("sses")) return w.substr(0, n - 2);
  if (n > 4 && (ends("xes") || ends("ches") || ends("shes") || ends("zzes"))) return w.substr(0, n - 2);
  if (n > 5 && ends("ing")) return repair_stem(w.substr(0, n - 3));
  if (n > 4 && ends("ed") && !ends("eed")) return repair_stem(w.substr(0, n - 2));
  if (n > 3 && ends("s") && !ends("ss") && !ends("us") && !ends("is")) return w.substr(0, n - 1);
  return w;
}

bool looks_adjective(std::string_view w) {
  if (adjectives().contains(w)) return true;
  static constexpr std::array<std::string_view, 6> kSuffixes = {"ous", "ful", "ive", "able", "ible", "less"};
  if (w.size() > 5) {
    for (auto s : kSuffixes) {
      if (w.ends_with(s)) return true;
    }
  }
  return false;
}

bool looks_adverb(std::string_view w) {
  static const std::unordered_set<std::string_view> not_adverbs = {
      "family", "supply", "reply", "fly", "ally", "belly", "bully", "jelly", "rally", "holly",
      "lily", "italy", "assembly", "butterfly", "apply", "july", "jelly", "gully"};
  return w.size() > 4 && w.ends_with("ly") && !not_adverbs.contains(w);
}

const std::unordered_set<std::string_view>& verb_cues() {
  static const std::unordered_set<std::string_view> cues = {
      "to", "can", "could", "will", "would", "should", "may", "might", "must", "shall", "i", "you",
      "we", "they", "please", "not", "don", "didn", "doesn", "t", "let", "how", "and", "or"};
  return cues;
}

const std::unordered_set<std::string_view>& noun_cues() {
  static const std::unordered_set<std::string_view> cues = {
      "a", "an", "the", "my", "your", "his", "her", "its", "our", "their", "this", "that", "these",
      "those", "some", "any", "of", "with", "from", "for", "in", "on", "at", "by"};
  return cues;
}

}  // namespace

bool is_stopword(std::string_view lower_word) { return function_words().contains(lower_word); }

std::string lemmatize(std::string_view word) {
  std::string w = lowercase(word);
  // Iterate to a fixed point so the result is idempotent by construction.
  for (int i = 0; i < 8; ++i) {
    auto next = lemma_step(w);
    if (next == w) break;
    w = std::move(next);
  }
  return w;
}

std::vector<TaggedWord> RuleBasedTagger::tag(const std::vector<std::string>& words) const {
  std::vector<TaggedWord> out;
  out.reserve(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& surface = words[i];
    const auto lower = lowercase(surface);
    const auto lemma = lemmatize(lower);
    WordClass tag = WordClass::Noun;
    const bool digits_only = std::all_of(lower.begin(), lower.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
    if (is_stopword(lower) || is_stopword(lemma)) {
      tag = WordClass::Function;
    } else if (digits_only || lower.size() < 2 || lemma.size() < 2) {
      tag = WordClass::Other;
    } else if (looks_adverb(lower) || looks_adverb(lemma)) {
      tag = WordClass::Adverb;
    } else if ((looks_adjective(lower) || looks_adjective(lemma)) && !known_verbs().contains(lemma)) {
      tag = WordClass::Adjective;
    } else if (i > 0 && std::isupper(static_cast<unsigned char>(surface[0]))) {
      tag = WordClass::ProperNoun;
    } else {
      const std::string prev = i > 0 ? lowercase(words[i - 1]) : std::string{};
      const bool after_noun_cue = noun_cues().contains(prev);
      if (verb_cues().contains(prev) && !after_noun_cue) {
        tag = WordClass::Verb;
      } else if (!after_noun_cue && (known_verbs().contains(lemma) || lower.ends_with("ing"))) {
        tag = WordClass::Verb;
      }
    }
    out.push_back({surface, tag});
  }
  return out;
}

std::vector<Keyword> extract_keywords(const MaliciousQuery& query, const PosTagger& tagger) {
  if (query.text.empty()) throw Error(ErrorKind::InvalidInput, "query text empty");
  std::vector<Keyword> out;
  std::unordered_set<std::string> seen;
  for (const auto& tw : tagger.tag(split_words(query.text))) {
    PartOfSpeech pos;
    switch (tw.tag) {
      case WordClass::Noun: pos = PartOfSpeech::Noun; break;
      case WordClass::Verb: pos = PartOfSpeech::Verb; break;
      case WordClass::ProperNoun: pos = PartOfSpeech::ProperNoun; break;
      default: continue;
    }
    auto lemma = lemmatize(tw.surface);
    if (lemma.empty() || is_stopword(lemma)) continue;
    if (!seen.insert(lemma).second) continue;
    out.push_back({tw.surface, std::move(lemma), pos, query.id});
  }
  if (out.empty()) {
    throw Error(ErrorKind::EmptyKeywords, "no visualizable keyword in query \"" + query.id + "\"");
  }
  return out;
}

// ---------------------------------------------------------------------------

ImageIndex build_index(const std::vector<ImageAsset>& assets, const Embedder& embedder) {
  if (assets.empty()) throw Error(ErrorKind::IndexBuildError, "no assets to index");
  ImageIndex index;
  index.dimension = embedder.dimension();
  index.embedder_id = embedder.id();
  std::unordered_set<std::string> ids;
  for (const auto& a : assets) {
    if (!ids.insert(a.id).second) {
      throw Error(ErrorKind::IndexBuildError, "duplicate asset id \"" + a.id + "\"");
    }
    if (a.caption.empty()) {
      throw Error(ErrorKind::IndexBuildError, "asset \"" + a.id + "\" has no caption");
    }
    EmbeddingVector v;
    try {
      v = embedder.embed_image(a);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::BackendUnavailable) throw;
      throw Error(ErrorKind::IndexBuildError, "asset \"" + a.id + "\": " + e.what());
    }
    if (v.values.size() != index.dimension) {
      throw Error(ErrorKind::IndexBuildError,
                  fmt::format("asset \"{}\" embedded to dimension {} (index dimension {})", a.id,
                              v.values.size(), index.dimension));
    }
    index.entries.push_back({a.id, std::move(v.values)});
  }
  return index;
}

std::string serialize_index(const ImageIndex& index) {
  Json header;
  header["kind"] = "index_header";
  header["format"] = "redguard.image-index";
  header["version"] = 1;
  header["dimension"] = index.dimension;
  header["embedder"] = index.embedder_id;
  header["count"] = index.entries.size();
  std::string out = header.dump() + "\n";
  for (const auto& e : index.entries) {
    Json j;
    j["kind"] = "index_entry";
    j["asset_id"] = e.asset_id;
    j["vector"] = e.vector;
    out += j.dump();
    out += '\n';
  }
  return out;
}

ImageIndex parse_index(std::string_view content) {
  ImageIndex index;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t expected = 0;
  while (pos < content.size()) {
    auto end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    const auto line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = Json::parse(line);
      if (!have_header) {
        if (j.at("format") != "redguard.image-index" || j.at("version") != 1) {
          throw Error(ErrorKind::ParseError, "unsupported index format");
        }
        index.dimension = j.at("dimension").get<std::size_t>();
        index.embedder_id = j.value("embedder", std::string{});
        expected = j.at("count").get<std::size_t>();
        have_header = true;
        continue;
      }
      IndexEntry e{j.at("asset_id").get<std::string>(), j.at("vector").get<std::vector<double>>()};
      if (e.vector.size() != index.dimension) throw Error(ErrorKind::ParseError, "vector dimension mismatch");
      index.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ParseError, fmt::format("index line {}: {}", line_no, e.what()));
    } catch (const Error& e) {
      throw Error(ErrorKind::ParseError, fmt::format("index line {}: {}", line_no, e.what()));
    }
  }
  if (!have_header) throw Error(ErrorKind::ParseError, "index has no header");
  if (index.entries.size() != expected) throw Error(ErrorKind::ParseError, "index entry count mismatch");
  return index;
}

MatchResult match_images(const Keyword& keyword, const ImageIndex& index, std::size_t top_k,
                         const Embedder& embedder) {
  if (index.entries.empty()) throw Error(ErrorKind::InvalidInput, "match against an empty index");
  if (top_k == 0) throw Error(ErrorKind::InvalidInput, "top_k must be at least 1");
  const auto query = embedder.embed_text(keyword.lemma);
  std::vector<RankedAsset> ranked;
  ranked.reserve(index.entries.size());
  for (const auto& e : index.entries) ranked.push_back({e.asset_id, cosine(query.values, e.vector)});
  const auto better = [](const RankedAsset& a, const RankedAsset& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.asset_id < b.asset_id;
  };
  const auto k = std::min(top_k, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(), better);
  ranked.resize(k);
  return {keyword, std::move(ranked)};
}

// ---------------------------------------------------------------------------

Json rejection_to_json(const Rejection& r) {
  Json j;
  j["kind"] = "rejection";
  j["query_id"] = r.query_id;
  j["reasons"] = r.reasons;
  return j;
}

Rejection rejection_from_json(const Json& j) {
  return {j.at("query_id").get<std::string>(), j.at("reasons").get<std::vector<std::string>>()};
}

PairingResult assemble_triples(const std::vector<MaliciousQuery>& queries,
                               const std::vector<ImageAsset>& assets, const ImageIndex& index,
                               const ImageJudge& judge, const Embedder& embedder,
                               const PosTagger& tagger, const PairingOptions& options,
                               std::size_t start_query) {
  if (options.max_retries < 0) throw Error(ErrorKind::InvalidInput, "max_retries must be non-negative");
  std::unordered_map<std::string, const ImageAsset*> by_id;
  for (const auto& a : assets) by_id.emplace(a.id, &a);
  std::map<std::string, JudgeResult> verdicts;

  PairingResult result;
  const std::size_t attempts_per_keyword =
      std::min<std::size_t>(options.top_k, static_cast<std::size_t>(options.max_retries) + 1);

  for (std::size_t qi = start_query; qi < queries.size(); ++qi) {
    const auto& query = queries[qi];
    std::vector<std::string> reasons;
    std::vector<Keyword> keywords;
    try {
      keywords = extract_keywords(query, tagger);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::EmptyKeywords) throw;
      spdlog::info("query {} dropped: no keywords", query.id);
      result.rejected.push_back({query.id, {"no visualizable keywords"}});
      continue;
    }
    if (options.max_keywords > 0 && keywords.size() > options.max_keywords) {
      keywords.resize(options.max_keywords);
    }

    bool placed = false;
    try {
      for (const auto& kw : keywords) {
        const auto match = match_images(kw, index, attempts_per_keyword, embedder);
        for (const auto& cand : match.ranked) {
          auto it = by_id.find(cand.asset_id);
          if (it == by_id.end()) {
            throw Error(ErrorKind::AssetNotFound, "index refers to unknown asset \"" + cand.asset_id + "\"");
          }
          auto v = verdicts.find(cand.asset_id);
          if (v == verdicts.end()) v = verdicts.emplace(cand.asset_id, judge.judge_image_benign(*it->second)).first;
          if (!v->second.benign) {
            reasons.push_back(fmt::format("{}: {} rejected ({})", kw.lemma, cand.asset_id, v->second.rationale));
            continue;
          }
          JointTriple t;
          t.id = "triple-" + query.id;
          t.image = *it->second;
          t.image.embedding.clear();
          t.image.verified_benign = true;
          t.text = query;
          t.keyword = kw;
          t.match_score = cand.cosine;
          result.triples.push_back(std::move(t));
          placed = true;
          break;
        }
        if (placed) break;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::BackendUnavailable) throw;
      result.halted = true;
      result.halt_reason = e.what();
      result.next_query = qi;
      return result;
    }
    if (!placed) {
      spdlog::info("query {} dropped: no verified image", query.id);
      if (reasons.empty()) reasons.emplace_back("no candidate images");
      result.rejected.push_back({query.id, std::move(reasons)});
    }
  }
  result.next_query = queries.size();
  return result;
}

}  // namespace redguard
