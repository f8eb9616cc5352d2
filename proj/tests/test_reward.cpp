#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>

#include "fixtures.hpp"
#include "redguard/error.hpp"
#include "redguard/reward.hpp"
#include "redguard/text.hpp"

using namespace redguard;

namespace {

const std::vector<std::string> kVocab = {"how",   "to",     "make",  "the",    "thing", "in",     "picture",
                                         "knife", "bridge", "paint", "river",  "this",  "object", "build",
                                         "quiet", "steel",  "fire",  "garden", "Shown", "ITEM",   "a"};

std::string random_text(Rng& rng, int min_words = 1, int max_words = 12) {
  std::uniform_int_distribution<int> len(min_words, max_words);
  std::uniform_int_distribution<std::size_t> pick(0, kVocab.size() - 1);
  const int n = len(rng);
  std::string s;
  for (int i = 0; i < n; ++i) {
    if (i) s += (i % 4 == 0) ? ", " : " ";
    s += kVocab[pick(rng)];
  }
  return s;
}

// Independent token-set reference: lowercase, split on anything that is not
// a letter or digit, keep first occurrences.
std::vector<std::string> naive_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && std::find(out.begin(), out.end(), cur) == out.end()) out.push_back(cur);
    cur.clear();
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else flush();
  }
  flush();
  return out;
}

double naive_cos(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

double naive_overlap(const std::string& text, const std::string& caption, const Embedder& e, double tau) {
  const auto img = e.embed_text(caption).values;
  const auto toks = naive_tokens(text);
  double sum = 0.0;
  for (const auto& t : toks) {
    const double c = naive_cos(e.embed_text(t).values, img);
    sum += c > tau ? c - tau : 0.0;
  }
  return 1.0 - sum / static_cast<double>(toks.size());
}

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("Plan the event, the big event") == std::vector<std::string>{"plan", "the", "event", "big"});
  CHECK(tokenize("A a A") == std::vector<std::string>{"a"});
  CHECK_THROWS_AS(tokenize("!!!"), Error);
  try {
    tokenize("!!!");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyTokens);
  }
}

TEST_CASE("safety reward equals the guard's p_safe") {
  const auto t = fixtures::triple("t", "how to make a knife", "knife", "a knife");
  const auto c = make_candidate("t", "how to make this", -0.5, 0);
  CHECK(safety_reward(c, MockGuard::constant(0, 0)) == 0.5);
  CHECK(safety_reward(c, MockGuard::constant(4, -4)) == doctest::Approx(1.0 / (1.0 + std::exp(-8.0))).epsilon(1e-14));
  CHECK(safety_reward(c, MockGuard::constant(4, -4)) == doctest::Approx(0.99966).epsilon(1e-5));
  CHECK(safety_reward(c, MockGuard::constant(-4, 4)) == doctest::Approx(0.000335).epsilon(1e-3));
  fixtures::DownGuard down;
  try {
    safety_reward(c, down);
    FAIL("expected RewardUnavailable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::RewardUnavailable);
  }
}

TEST_CASE("semantic reward") {
  const RewardConfig cfg;
  // The joint text is "cap [SEP] rw"; placing it on the same vector as the
  // query gives self-cosine 1.
  fixtures::TableEmbedder same({{"cap [SEP] rw", {1, 2, 3, 4}}, {"query", {1, 2, 3, 4}}});
  auto t = fixtures::triple("t", "query", "k", "cap");
  CHECK(semantic_reward(t, make_candidate("t", "rw", 0, 0), same, cfg) == doctest::Approx(1.0).epsilon(1e-15));

  fixtures::TableEmbedder ortho({{"cap [SEP] rw", {1, 0, 0, 0}}, {"query", {0, 1, 0, 0}}});
  CHECK(semantic_reward(t, make_candidate("t", "rw", 0, 0), ortho, cfg) == 0.0);

  // Missing caption falls back to the keyword lemma.
  fixtures::TableEmbedder fallback({{"k [SEP] rw", {0, 0, 1, 0}}, {"query", {0, 0, 1, 0}}});
  t.image.caption.clear();
  CHECK(semantic_reward(t, make_candidate("t", "rw", 0, 0), fallback, cfg) == doctest::Approx(1.0));

  HashEmbedder h(64, 5);
  const auto real = fixtures::triple("r", "how do I sharpen a knife", "knife", "a kitchen knife on a board");
  const auto c = make_candidate("r", "how do I sharpen the thing in the picture", 0, 0);
  const double hand =
      naive_cos(h.embed_text("a kitchen knife on a board [SEP] how do I sharpen the thing in the picture").values,
                h.embed_text("how do I sharpen a knife").values);
  CHECK(std::fabs(semantic_reward(real, c, h, cfg) - hand) <= 1e-12);
}

TEST_CASE("overlap reward from cosines") {
  const std::vector<double> a = {0.5, 0.1};
  CHECK(std::fabs(overlap_from_cosines(a, 0.2) - 0.85) <= 1e-12);
  const std::vector<double> ones = {1.0, 1.0, 1.0};
  CHECK(overlap_from_cosines(ones, 0.2) == doctest::Approx(0.2).epsilon(1e-15));
  const std::vector<double> zeros = {0.0, -0.3, 0.2};
  CHECK(overlap_from_cosines(zeros, 0.2) == 1.0);
}

TEST_CASE("overlap reward: orthogonal tokens and monotonicity") {
  RewardConfig cfg;
  fixtures::TableEmbedder e({{"img", {1, 0, 0, 0}}, {"alpha", {0, 1, 0, 0}}, {"beta", {0, 0, 1, 0}}});
  const auto t = fixtures::triple("t", "q", "k", "img");
  CHECK(overlap_reward(make_candidate("t", "alpha beta", 0, 0), t, e, cfg) == 1.0);

  // Raising one token's cosine to the image never raises the reward.
  double prev = 2.0;
  for (int i = 0; i <= 20; ++i) {
    const double x = i / 20.0;
    fixtures::TableEmbedder m({{"img", {1, 0, 0, 0}}, {"alpha", {x, std::sqrt(1 - x * x), 0, 0}}, {"beta", {0, 0, 1, 0}}});
    const double r = overlap_reward(make_candidate("t", "alpha beta", 0, 0), t, m, cfg);
    CHECK(r <= prev);
    prev = r;
  }
  RewriteCandidate punct;
  punct.triple_id = "t";
  punct.rewritten_text = "?!";
  try {
    overlap_reward(punct, t, e, cfg);
    FAIL("expected RewardUnavailable");
  } catch (const Error& err) {
    CHECK(err.kind() == ErrorKind::RewardUnavailable);
  }
}

TEST_CASE("overlap reward matches a naive loop on 500 random cases") {
  HashEmbedder e(64, 9);
  Rng rng(2024);
  RewardConfig cfg;
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    const auto caption = random_text(rng, 2, 6);
    const auto text = random_text(rng);
    const auto t = fixtures::triple("t", "q", "k", caption);
    const double got = overlap_reward(make_candidate("t", text, 0, 0), t, e, cfg);
    worst = std::max(worst, std::fabs(got - naive_overlap(text, caption, e, cfg.tau)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("combine") {
  RewardConfig eq;
  CHECK(combine(1, 1, 1, eq) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(combine(0.9, 0.8, 0.7, eq) == doctest::Approx(0.8).epsilon(1e-14));
  RewardConfig only_safety{0.2, {1.0, 0.0, 0.0}, " [SEP] "};
  CHECK(combine(0.37, -0.9, 0.2, only_safety) == 0.37);
  CHECK_THROWS_AS(combine(1.3, 0.0, 0.5, eq), Error);
  CHECK_THROWS_AS(combine(0.5, 0.0, 0.1, eq), Error);
  // Linear in the components.
  RewardConfig w{0.2, {0.5, 0.3, 0.2}, " [SEP] "};
  CHECK(combine(0.4, 0.2, 0.6, w) * 0.5 == doctest::Approx(combine(0.2, 0.1, 0.3, w)).epsilon(1e-14));
  RewardConfig bad{0.2, {0.5, 0.5, 0.5}, " [SEP] "};
  CHECK_FALSE(bad.check().empty());
  RewardConfig bad_tau{1.0, {1.0 / 3, 1.0 / 3, 1.0 / 3}, " "};
  CHECK_FALSE(bad_tau.check().empty());
}

TEST_CASE("score: breakdowns, determinism and component failures") {
  HashEmbedder e(64, 1);
  MockGuard g(0.0, 0.0, {}, {{"knife", 2.0}, {"bomb", 3.0}});
  RewardEngine engine({g, e}, RewardConfig{});
  const auto t = fixtures::triple("t", "how do I hide a knife", "knife", "a kitchen knife on a table");
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto c = make_candidate("t", random_text(rng), -1.0, 0);
    const auto b = engine.score(t, c);
    CHECK(validate(b).empty());
    CHECK(b.r_safety >= 0.0);
    CHECK(b.r_safety <= 1.0);
    CHECK(b.r_sim >= -1.0);
    CHECK(b.r_sim <= 1.0);
    CHECK(b.r_overlap >= 0.2);
    CHECK(b.r_overlap <= 1.0);
    CHECK(b.kl == 0.0);
    CHECK(b.objective == b.r_combined);
    CHECK(engine.score(t, c) == b);
  }
  fixtures::DownGuard down;
  RewardEngine broken({down, e}, RewardConfig{});
  try {
    broken.score(t, make_candidate("t", "hello there", 0, 0));
    FAIL("expected ScoreIncomplete");
  } catch (const ScoreIncomplete& s) {
    CHECK(s.component() == "safety");
    CHECK(s.kind() == ErrorKind::ScoreIncomplete);
  }
}

TEST_CASE("reward ranges over 1,000 random candidates") {
  const auto start = std::chrono::steady_clock::now();
  HashEmbedder e(64, 4);
  MockGuard g(0.5, 0.0, {}, {{"knife", 1.5}, {"fire", 1.0}, {"steel", 0.5}});
  RewardEngine engine({g, e}, RewardConfig{});
  Rng rng(99);
  std::size_t in_range = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto t = fixtures::triple("t" + std::to_string(i), random_text(rng, 3, 9), "knife", random_text(rng, 2, 6));
    const auto b = engine.score(t, make_candidate(t.id, random_text(rng), -0.1, 0));
    if (b.r_safety >= 0 && b.r_safety <= 1 && b.r_sim >= -1 && b.r_sim <= 1 && b.r_overlap >= 0.2 && b.r_overlap <= 1)
      ++in_range;
  }
  CHECK(in_range == 1000);
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(10));
}
