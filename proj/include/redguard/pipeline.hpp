#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "redguard/backends.hpp"
#include "redguard/eval.hpp"
#include "redguard/guard.hpp"
#include "redguard/optimizer.hpp"
#include "redguard/reward.hpp"
#include "redguard/stage1.hpp"

namespace redguard {

inline constexpr std::array<std::string_view, 8> kBackendRoles = {
    "embedder", "judge", "guard", "policy", "victim", "response_judge", "crossguard", "rewriter"};

// One external model role. Mock-only settings (lexicons, templates, ...) live in `options`.
struct BackendSpec {
  BackendConfig config;
  Json options = Json::object();
};

struct EvalTargetSpec {
  std::string name;
  std::string category;
  // "crossguard", "text-guard" or "victim".
  std::string type;
  // For victims: "echo", "refusal", "guarded" or "remote".
  std::string victim;
};

struct StrategyAblationSpec {
  std::filesystem::path demonstrations;
  std::size_t k = 3;
  std::vector<std::string> targets;
};

struct PipelineConfig {
  // Directory the config file lives in; relative paths resolve against it.
  std::filesystem::path base_dir;
  std::uint64_t seed = 0;
  std::filesystem::path manifest;
  std::filesystem::path queries;
  std::filesystem::path assets;
  std::optional<std::filesystem::path> output;

  std::map<std::string, BackendSpec> backends;
  PairingOptions stage1;
  RewardConfig reward;
  PPOConfig ppo;

  DatasetComposition composition;
  // Per bucket: "@rewrites", "@triples" or a train-example JSONL path.
  std::map<TrainBucket, std::string> sources;
  GuardTrainConfig guard_train;

  std::vector<EvalTargetSpec> targets;
  // Suite manifest paths, or "@rewritten" / "@base" for suites built from the red-team artifacts.
  std::vector<std::string> suites;
  std::optional<std::string> utility_suite;
  std::vector<std::string> redteam_targets;
  int max_concurrent = 4;
  std::optional<StrategyAblationSpec> ablation;
};

// Command-line values; they win over the config file.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<std::filesystem::path> output;
};

// defaults < file < overrides. `env` supplies REDGUARD_BACKEND_<ROLE>_ENDPOINT
// and REDGUARD_BACKEND_<ROLE>_TOKEN. Throws ConfigError on unknown keys or
// missing files.
PipelineConfig load_pipeline_config(const std::filesystem::path& file, const ConfigOverrides& overrides = {},
                                    const std::map<std::string, std::string>& env = {});
PipelineConfig pipeline_config_from_json(const Json& j, const std::filesystem::path& base_dir,
                                         const ConfigOverrides& overrides = {},
                                         const std::map<std::string, std::string>& env = {});

// Effective configuration with paths relative to base_dir. Tokens are never included.
Json pipeline_config_to_json(const PipelineConfig& c);
// Hash of the effective configuration without the output path.
std::string config_hash(const PipelineConfig& c);

// The configured output, or runs/<UTC timestamp>-<hash8>.
std::filesystem::path resolve_output_dir(const PipelineConfig& c);

// Builds every backend role once; mock roles are pure functions of their config.
class BackendSet {
 public:
  explicit BackendSet(const PipelineConfig& config);
  ~BackendSet();

  const Embedder& embedder() const { return *embedder_; }
  const ImageJudge& judge() const { return *judge_; }
  const GuardBackend& guard() const { return *guard_; }
  const ResponseJudge& response_judge() const { return *response_judge_; }
  const TextGenerator& rewriter() const { return *rewriter_; }
  // Null unless the victim role is remote.
  const Victim* remote_victim() const { return remote_victim_.get(); }
  // Null unless the policy role is remote.
  const Policy* remote_policy() const { return remote_policy_.get(); }

  // The trainable mock policy from the policy role's templates and weights.
  CategoricalPolicy initial_policy() const;

  // role -> backend id, for run metadata.
  Json ids() const;

 private:
  const PipelineConfig& config_;
  std::unique_ptr<Embedder> embedder_;
  std::unique_ptr<ImageJudge> judge_;
  std::unique_ptr<GuardBackend> guard_;
  std::unique_ptr<ResponseJudge> response_judge_;
  std::unique_ptr<TextGenerator> rewriter_;
  std::unique_ptr<Victim> remote_victim_;
  std::unique_ptr<Policy> remote_policy_;
};

struct PairSummary {
  std::size_t triples = 0;
  std::size_t rejected = 0;
};

struct RedteamSummary {
  int iterations = 0;
  std::size_t rewrites = 0;
  std::optional<double> final_mean_reward;
};

struct GuardSummary {
  std::size_t examples = 0;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
  std::filesystem::path manifest;
};

struct EvalSummary {
  std::filesystem::path report_dir;
  bool unreliable = false;
};

// Stage commands. Each reads and writes only under `out`.
PairSummary cmd_pair(const PipelineConfig& c, const std::filesystem::path& out,
                     const std::optional<std::filesystem::path>& resume = std::nullopt);
RedteamSummary cmd_redteam(const PipelineConfig& c, const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& resume = std::nullopt, int stop_after = -1);
GuardSummary cmd_train_guard(const PipelineConfig& c, const std::filesystem::path& out);
EvalSummary cmd_eval(const PipelineConfig& c, const std::filesystem::path& out);

// 0 success, 2 config/input, 3 optimization, 4 dataset, 1 anything else.
int exit_code_for(ErrorKind kind);

}  // namespace redguard
