#include "redguard/error.hpp"

namespace redguard {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::BackendUnavailable: return "BackendUnavailable";
    case ErrorKind::AssetNotFound: return "AssetNotFound";
    case ErrorKind::EmptyKeywords: return "EmptyKeywords";
    case ErrorKind::IndexBuildError: return "IndexBuildError";
    case ErrorKind::EmptyTokens: return "EmptyTokens";
    case ErrorKind::RewardUnavailable: return "RewardUnavailable";
    case ErrorKind::InvalidReward: return "InvalidReward";
    case ErrorKind::ScoreIncomplete: return "ScoreIncomplete";
    case ErrorKind::KLUndefined: return "KLUndefined";
    case ErrorKind::EmptyRollout: return "EmptyRollout";
    case ErrorKind::UpdateDiverged: return "UpdateDiverged";
    case ErrorKind::StrategyUnavailable: return "StrategyUnavailable";
    case ErrorKind::CompositionError: return "CompositionError";
    case ErrorKind::InvalidLogits: return "InvalidLogits";
    case ErrorKind::DegenerateDataset: return "DegenerateDataset";
    case ErrorKind::TrainingFailed: return "TrainingFailed";
    case ErrorKind::GuardUnavailable: return "GuardUnavailable";
    case ErrorKind::UndefinedMetric: return "UndefinedMetric";
    case ErrorKind::SuiteMismatch: return "SuiteMismatch";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorKind::EvalUnreliable: return "EvalUnreliable";
  }
  return "Unknown";
}

}  // namespace redguard
