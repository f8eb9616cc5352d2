#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace redguard {

enum class ErrorKind {
  InvalidInput,
  ParseError,
  DuplicateId,
  BackendUnavailable,
  AssetNotFound,
  EmptyKeywords,
  IndexBuildError,
  EmptyTokens,
  RewardUnavailable,
  InvalidReward,
  ScoreIncomplete,
  KLUndefined,
  EmptyRollout,
  UpdateDiverged,
  StrategyUnavailable,
  CompositionError,
  InvalidLogits,
  DegenerateDataset,
  TrainingFailed,
  GuardUnavailable,
  UndefinedMetric,
  SuiteMismatch,
  ConfigError,
  CheckpointMismatch,
  EvalUnreliable,
};

std::string_view to_string(ErrorKind kind);

// Every failure the library reports carries a kind so callers can branch on
// it (retry, skip, map to an exit code) without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised by score() when one reward component could not be computed.
class ScoreIncomplete : public Error {
 public:
  ScoreIncomplete(std::string component, const std::string& cause)
      : Error(ErrorKind::ScoreIncomplete, component + " (" + cause + ")"),
        component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace redguard
