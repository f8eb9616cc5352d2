#include <doctest.h>

#include <sys/wait.h>

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "redguard/error.hpp"
#include "redguard/pipeline.hpp"
#include "redguard/util.hpp"

using namespace redguard;
namespace fs = std::filesystem;

namespace {

const fs::path kMock = fs::path(REDGUARD_DATA_DIR) / "mock";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "redguard-pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string abs_path(const std::string& p) { return (kMock / p).lexically_normal().string(); }

// The shipped mock config with every path made absolute, so it can live anywhere.
Json mock_config() {
  auto j = Json::parse(slurp(kMock / "config.json"));
  for (auto& [k, v] : j["paths"].items()) v = abs_path(v.get<std::string>());
  for (auto& [k, v] : j["guard"]["sources"].items()) {
    if (!v.get<std::string>().starts_with("@")) v = abs_path(v.get<std::string>());
  }
  for (auto& s : j["eval"]["suites"]) {
    if (!s.get<std::string>().starts_with("@")) s = abs_path(s.get<std::string>());
  }
  j["eval"]["utility_suite"] = abs_path(j["eval"]["utility_suite"].get<std::string>());
  auto& demos = j["eval"]["strategy_ablation"]["demonstrations"];
  demos = abs_path(demos.get<std::string>());
  return j;
}

fs::path write_config(const fs::path& dir, const Json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const auto cmd = std::string(REDGUARD_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string flags(const fs::path& config, const fs::path& out) {
  return "--config " + config.string() + " --output " + out.string();
}

// Independent reading of the keyword guard: any lexicon word in the text pushes the
// unsafe logit (2.5 per word) above the safe logit (1.0).
bool oracle_unsafe(const std::string& text, const std::set<std::string>& lexicon) {
  std::string word;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    const char ch = i < text.size() ? text[i] : ' ';
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      word += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else if (!word.empty()) {
      if (lexicon.contains(word)) return true;
      word.clear();
    }
  }
  return false;
}

std::map<std::string, std::string> csv_row(const fs::path& csv, const std::string& model) {
  std::istringstream in(slurp(csv));
  std::string header, line;
  std::getline(in, header);
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  const auto cols = split(header);
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells.size() > 1 && cells[1] == model) {
      std::map<std::string, std::string> row;
      for (std::size_t i = 0; i < cols.size() && i < cells.size(); ++i) row[cols[i]] = cells[i];
      return row;
    }
  }
  return {};
}

}  // namespace

TEST_CASE("config layering and validation") {
  const auto j = mock_config();
  auto c = pipeline_config_from_json(j, kMock);
  CHECK(c.seed == 7);
  CHECK(c.ppo.seed == 7);
  CHECK(c.guard_train.seed == 7);
  CHECK(c.backends.size() == kBackendRoles.size());

  ConfigOverrides o;
  o.seed = 11;
  o.iterations = 3;
  const auto overridden = pipeline_config_from_json(j, kMock, o);
  CHECK(overridden.seed == 11);
  CHECK(overridden.ppo.seed == 11);
  CHECK(overridden.ppo.iterations == 3);
  CHECK(config_hash(overridden) != config_hash(c));

  // The output directory does not enter the hash; the default is run-scoped.
  o = {};
  o.output = "/tmp/somewhere";
  CHECK(config_hash(pipeline_config_from_json(j, kMock, o)) == config_hash(c));
  const auto dflt = resolve_output_dir(c).generic_string();
  CHECK(dflt.starts_with("runs/"));
  CHECK(dflt.ends_with(config_hash(c).substr(0, 8)));

  auto bad = j;
  bad["ppo"]["iterationz"] = 3;
  CHECK_THROWS_AS(pipeline_config_from_json(bad, kMock), Error);
  bad = j;
  bad["backends"]["guard"]["token"] = "secret";
  CHECK_THROWS_AS(pipeline_config_from_json(bad, kMock), Error);

  // Environment switches a role to remote; the token is used but never serialized.
  const std::map<std::string, std::string> env{{"REDGUARD_BACKEND_VICTIM_ENDPOINT", "http://127.0.0.1:9"},
                                               {"REDGUARD_BACKEND_VICTIM_TOKEN", "s3cr3t-token"}};
  c = pipeline_config_from_json(j, kMock, {}, env);
  CHECK(c.backends.at("victim").config.kind == BackendKind::Remote);
  CHECK(c.backends.at("victim").config.token == std::optional<std::string>("s3cr3t-token"));
  CHECK(pipeline_config_to_json(c).dump().find("s3cr3t") == std::string::npos);

  CHECK(exit_code_for(ErrorKind::ConfigError) == 2);
  CHECK(exit_code_for(ErrorKind::UpdateDiverged) == 3);
  CHECK(exit_code_for(ErrorKind::CompositionError) == 4);
  CHECK(exit_code_for(ErrorKind::BackendUnavailable) == 1);
}

TEST_CASE("pair: accounting, missing inputs, determinism") {
  const auto dir = scratch("pair");
  const auto config = write_config(dir, mock_config());
  const auto r = cli("pair " + flags(config, dir / "a"), dir);
  REQUIRE(r.code == 0);
  const auto triples = lines(dir / "a/pair/triples.jsonl");
  const auto rejected = lines(dir / "a/pair/rejected.jsonl");
  CHECK(triples + rejected == 20);
  CHECK(r.out == "triples=" + std::to_string(triples) + " rejected=" + std::to_string(rejected) + "\n");
  for (const auto& t : load_triples(dir / "a/pair/triples.jsonl")) CHECK(validate(t).empty());

  REQUIRE(cli("pair " + flags(config, dir / "b"), dir).code == 0);
  for (const auto* f : {"pair/triples.jsonl", "pair/rejected.jsonl", "pair/index.jsonl"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }

  auto j = mock_config();
  j["paths"]["assets"] = (dir / "no-such-assets.jsonl").string();
  const auto missing = cli("pair " + flags(write_config(dir, j), dir / "c"), dir);
  CHECK(missing.code == 2);
  CHECK(missing.err.find("no-such-assets.jsonl") != std::string::npos);
}

TEST_CASE("redteam: zero iterations, resume equivalence, hash guard") {
  const auto dir = scratch("redteam");
  auto j = mock_config();
  j["ppo"]["iterations"] = 12;
  j["ppo"]["checkpoint_every"] = 4;
  const auto config = write_config(dir, j);
  for (const auto* o : {"full", "cut", "zero"}) REQUIRE(cli("pair " + flags(config, dir / o), dir).code == 0);

  const auto zero = cli("redteam " + flags(config, dir / "zero") + " --iterations 0", dir);
  CHECK(zero.code == 0);
  CHECK(fs::exists(dir / "zero/redteam/rewrites.jsonl"));
  CHECK(lines(dir / "zero/redteam/rewrites.jsonl") == 0);

  REQUIRE(cli("redteam " + flags(config, dir / "full"), dir).code == 0);
  REQUIRE(cli("redteam " + flags(config, dir / "cut") + " --stop-after 5", dir).code == 0);
  const auto ckpt = dir / "cut/redteam/checkpoints/checkpoint-000005.json";
  REQUIRE(fs::exists(ckpt));
  CHECK(lines(dir / "cut/redteam/metrics.csv") == 6);

  // A different seed changes the config hash; the checkpoint must be refused.
  const auto refused = cli("redteam " + flags(config, dir / "cut") + " --seed 99 --resume " + ckpt.string(), dir);
  CHECK(refused.code == 2);
  CHECK(refused.err.find("CheckpointMismatch") != std::string::npos);

  REQUIRE(cli("redteam " + flags(config, dir / "cut") + " --resume " + ckpt.string(), dir).code == 0);
  CHECK(slurp(dir / "cut/redteam/metrics.csv") == slurp(dir / "full/redteam/metrics.csv"));
  CHECK(slurp(dir / "cut/redteam/rewrites.jsonl") == slurp(dir / "full/redteam/rewrites.jsonl"));
  CHECK(slurp(dir / "cut/redteam/policy.json") == slurp(dir / "full/redteam/policy.json"));
}

TEST_CASE("redteam on a toy environment reaches the mock optimum") {
  // The guard flags the caption template ("shows") and passes verbatim text. With
  // safety weighted 0.6 the verbatim template scores about 0.6 + 0.2 * (0.75 + 0.95).
  const auto dir = scratch("toy");
  auto j = mock_config();
  j["backends"]["guard"] = {
      {"kind", "mock"}, {"seed", 0}, {"logit_safe", 12.0}, {"logit_unsafe", 0.0}, {"lexicon", {{"shows", 30.0}}}};
  j["backends"]["policy"]["templates"] = {"{text}", "The image shows {caption}."};
  j["reward"]["weights"] = {0.6, 0.2, 0.2};
  j["ppo"] = {{"iterations", 60}, {"kl_lambda", 0.0}};
  const auto config = write_config(dir, j);
  REQUIRE(cli("pair " + flags(config, dir / "out"), dir).code == 0);
  const auto r = cli("redteam " + flags(config, dir / "out"), dir);
  REQUIRE(r.code == 0);
  std::istringstream in(slurp(dir / "out/redteam/metrics.csv"));
  std::string line, last;
  while (std::getline(in, line)) last = line;
  const double final_mean = std::stod(last.substr(last.find(',') + 1));
  CHECK(final_mean > 0.9);
}

TEST_CASE("train-guard: composition shortfall, fingerprint determinism") {
  const auto dir = scratch("guard");
  const auto config = write_config(dir, mock_config());
  REQUIRE(cli("run-all " + flags(config, dir / "a"), dir).code == 0);
  const auto h1 = load_handle(dir / "a/guard/manifest.json");
  REQUIRE(cli("train-guard " + flags(config, dir / "a"), dir).code == 0);
  const auto h2 = load_handle(dir / "a/guard/manifest.json");
  CHECK(h1.training_fingerprint == h2.training_fingerprint);
  CHECK(h1.adapter_id == h2.adapter_id);
  CHECK(lines(dir / "a/guard/dataset.jsonl") == 120);

  auto j = mock_config();
  j["guard"]["composition"]["implicit"] = 5000;
  const auto shortfall = cli("train-guard " + flags(write_config(dir, j), dir / "a"), dir);
  CHECK(shortfall.code == 4);
  CHECK(shortfall.err.find("implicit") != std::string::npos);
}

TEST_CASE("eval: hand-counted keyword-guard ASRs, perfect guard, empty suites") {
  const auto dir = scratch("eval");
  auto j = mock_config();
  j["eval"]["targets"] = {{{"name", "KeywordGuard"}, {"category", "Text Guardrails"}, {"type", "text-guard"}}};
  j["eval"]["suites"].erase(j["eval"]["suites"].size() - 1);  // drop @rewritten
  j["eval"].erase("redteam_targets");
  j["eval"].erase("strategy_ablation");
  const auto config = write_config(dir, j);
  REQUIRE(cli("eval " + flags(config, dir / "kw"), dir).code == 0);

  std::set<std::string> lexicon;
  for (auto& [w, _] : j["backends"]["guard"]["lexicon"].items()) lexicon.insert(w);
  const auto row = csv_row(dir / "kw/report/results_table.csv", "KeywordGuard");
  REQUIRE_FALSE(row.empty());
  for (const auto& s : j["eval"]["suites"]) {
    const auto suite = load_suite(s.get<std::string>());
    std::size_t passed = 0;
    for (const auto& sample : suite.samples) passed += oracle_unsafe(sample.text, lexicon) ? 0 : 1;
    const auto expected = format_fixed2(100.0 * static_cast<double>(passed) / static_cast<double>(suite.samples.size()));
    CHECK(row.at(std::string(to_string(suite.bucket)) + "/" + suite.name) == expected);
  }

  auto perfect = j;
  perfect["backends"]["guard"] = {{"kind", "mock"}, {"seed", 0}, {"logit_safe", 0.0}, {"logit_unsafe", 9.0}};
  REQUIRE(cli("eval " + flags(write_config(dir, perfect), dir / "perfect"), dir).code == 0);
  for (const auto& [col, v] : csv_row(dir / "perfect/report/results_table.csv", "KeywordGuard")) {
    if (col != "category" && col != "model") CHECK(v == "0.00");
  }

  auto none = j;
  none["eval"]["suites"] = Json::array();
  const auto r = cli("eval " + flags(write_config(dir, none), dir / "none"), dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("suites") != std::string::npos);
}

TEST_CASE("run-all: artifacts chained, identical on rerun, only verified images") {
  const auto dir = scratch("all");
  const auto config = write_config(dir, mock_config());
  REQUIRE(cli("run-all " + flags(config, dir / "a"), dir).code == 0);
  REQUIRE(cli("run-all " + flags(config, dir / "b"), dir).code == 0);
  for (const auto* f : {"pair/triples.jsonl", "redteam/rewrites.jsonl", "redteam/metrics.csv", "guard/dataset.jsonl",
                        "guard/manifest.json", "report/run_meta.json", "report/results_table.md",
                        "report/results_table.csv", "report/tradeoff.csv", "report/redteam_compare.csv",
                        "report/strategy_ablation.csv", "effective_config.json"}) {
    INFO(f);
    REQUIRE(fs::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  const auto meta = Json::parse(slurp(dir / "a/report/run_meta.json"));
  CHECK(meta.at("seed") == 7);
  CHECK(meta.at("config_hash") == Json::parse(slurp(dir / "a/effective_config.json")).at("config_hash"));

  const auto assets = load_assets(kMock / "assets.jsonl");
  HashEmbedder embedder(64, 0);
  BlocklistJudge judge(mock_config()["backends"]["judge"]["blocklist"].get<std::vector<std::string>>());
  for (const auto& t : load_triples(dir / "a/pair/triples.jsonl")) {
    const auto a = std::find_if(assets.begin(), assets.end(), [&](const auto& x) { return x.id == t.image.id; });
    REQUIRE(a != assets.end());
    CHECK(t.image.verified_benign);
    CHECK(judge.judge_image_benign(*a).benign);
  }
}
