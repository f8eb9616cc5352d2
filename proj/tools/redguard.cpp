// redguard: pair -> redteam -> train-guard -> eval.
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "redguard/error.hpp"
#include "redguard/pipeline.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace redguard;

namespace {

std::map<std::string, std::string> backend_env() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    std::string_view kv(*e);
    if (!kv.starts_with("REDGUARD_BACKEND_")) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return out;
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<std::string> output;
  std::optional<std::string> resume;
  int stop_after = -1;
  int verbose = 0;
};

void print_pair(const PairSummary& s) { fmt::print("triples={} rejected={}\n", s.triples, s.rejected); }

void print_redteam(const RedteamSummary& s) {
  fmt::print("iterations={} rewrites={}", s.iterations, s.rewrites);
  if (s.final_mean_reward) fmt::print(" mean_reward={:.4f}", *s.final_mean_reward);
  fmt::print("\n");
}

void print_guard(const GuardSummary& s) {
  fmt::print("examples={} accuracy={:.4f} loss={:.4f} manifest={}\n", s.examples, s.train_accuracy, s.final_loss,
             s.manifest.string());
}

void print_eval(const EvalSummary& s) {
  fmt::print("report={}{}\n", s.report_dir.string(), s.unreliable ? " (unreliable: see run_meta.json)" : "");
}

int run(const std::string& command, const Flags& f) {
  ConfigOverrides o;
  o.seed = f.seed;
  o.iterations = f.iterations;
  if (f.output) o.output = *f.output;
  const auto config = load_pipeline_config(f.config, o, backend_env());
  const auto out = resolve_output_dir(config);
  spdlog::info("output directory {}", out.string());
  std::optional<fs::path> resume;
  if (f.resume) resume = fs::path(*f.resume);

  if (command == "pair") {
    print_pair(cmd_pair(config, out, resume));
  } else if (command == "redteam") {
    print_redteam(cmd_redteam(config, out, resume, f.stop_after));
  } else if (command == "train-guard") {
    print_guard(cmd_train_guard(config, out));
  } else if (command == "eval") {
    print_eval(cmd_eval(config, out));
  } else {
    // With --resume, the pairing output already exists and the red-team stage picks up from the checkpoint.
    if (!resume) print_pair(cmd_pair(config, out));
    print_redteam(cmd_redteam(config, out, resume, f.stop_after));
    print_guard(cmd_train_guard(config, out));
    print_eval(cmd_eval(config, out));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit multimodal jailbreak red-teaming and guard training"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "pipeline config (JSON)")->required();
    sub->add_option("--seed", f.seed, "global seed");
    sub->add_option("--output", f.output, "output directory");
    sub->add_flag("-v,--verbose", f.verbose, "more logging");
  };
  auto* pair = app.add_subcommand("pair", "extract keywords, match images and assemble triples");
  add_common(pair);
  pair->add_option("--resume", f.resume, "resume.json written by a halted run");

  auto* redteam = app.add_subcommand("redteam", "train the rewrite policy");
  add_common(redteam);
  redteam->add_option("--resume", f.resume, "checkpoint to resume from");
  redteam->add_option("--iterations", f.iterations, "PPO iterations");
  redteam->add_option("--stop-after", f.stop_after)->group("");

  auto* guard = app.add_subcommand("train-guard", "build the training set and train the guard");
  add_common(guard);

  auto* eval = app.add_subcommand("eval", "evaluate targets and write the report");
  add_common(eval);

  auto* all = app.add_subcommand("run-all", "pair, redteam, train-guard and eval in sequence");
  add_common(all);
  all->add_option("--resume", f.resume, "red-team checkpoint to resume from");
  all->add_option("--iterations", f.iterations, "PPO iterations");
  all->add_option("--stop-after", f.stop_after)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(f.verbose > 0 ? spdlog::level::debug : spdlog::level::warn);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, f);
  } catch (const Error& e) {
    std::cerr << "redguard " << command << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "redguard " << command << ": " << e.what() << "\n";
    return 1;
  }
}
