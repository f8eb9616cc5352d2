#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "redguard/backends.hpp"
#include "redguard/domain.hpp"
#include "redguard/remote.hpp"

namespace redguard {

struct DatasetComposition {
  std::map<TrainBucket, std::size_t> counts;

  std::size_t total() const;
  std::size_t count(TrainBucket b) const;
  Violations check() const;
};

// Half benign; the four malicious buckets share the other half equally.
// Remainders go to the buckets in declaration order.
DatasetComposition default_composition(std::size_t total);

Json composition_to_json(const DatasetComposition& c);
// Accepts either {"total": N} or explicit per-bucket counts.
DatasetComposition composition_from_json(const Json& j);

using BucketSources = std::map<TrainBucket, std::vector<TrainExample>>;

// Picks `count` examples per bucket and shuffles the union. Selection and
// order depend on content hashes and the seed only, never on source order.
std::vector<TrainExample> build_training_set(const BucketSources& sources, const DatasetComposition& composition,
                                             std::uint64_t seed);

// Class 0 is safe, class 1 is unsafe.
double guard_loss(std::pair<double, double> class_logits, SafetyLabel label);

struct GuardModelHandle {
  std::string base_model_id;
  std::string adapter_id;
  // Output tokens for (safe, unsafe).
  std::pair<std::string, std::string> verbalizers{"safe", "unsafe"};
  std::string training_fingerprint;
  // Backend-managed weights, relative to the manifest when persisted.
  std::string adapter_path;

  Violations check() const;
  bool operator==(const GuardModelHandle&) const = default;
};

Json handle_to_json(const GuardModelHandle& h);
GuardModelHandle handle_from_json(const Json& j);
void save_handle(const std::filesystem::path& manifest, const GuardModelHandle& h);
GuardModelHandle load_handle(const std::filesystem::path& manifest);

// First-output-token logits over the two verbalizers.
class GuardModel {
 public:
  virtual ~GuardModel() = default;
  virtual std::pair<double, double> verbalizer_logits(const ImageAsset* image, std::string_view text) const = 0;
  virtual std::string id() const = 0;
};

struct GuardTrainConfig {
  std::string base_model_id = "mock-logistic";
  std::pair<std::string, std::string> verbalizers{"safe", "unsafe"};
  int epochs = 50;
  double learning_rate = 8.0;
  std::size_t feature_dim = 4096;
  std::uint64_t seed = 0;

  Violations check() const;
};

Json guard_train_config_to_json(const GuardTrainConfig& c);
GuardTrainConfig guard_train_config_from_json(const Json& j, GuardTrainConfig defaults = {});

struct GuardTrainingReport {
  std::vector<double> epoch_loss;  // mean guard_loss before each update, then the final value
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

class GuardTrainerBackend {
 public:
  virtual ~GuardTrainerBackend() = default;
  virtual std::string id() const = 0;
  virtual std::shared_ptr<const GuardModel> fit(const std::vector<TrainExample>& dataset,
                                                const GuardTrainConfig& config,
                                                GuardTrainingReport& report) const = 0;
};

// Hashed bag-of-words over text words, caption words and text x caption word
// pairs, feeding two linear verbalizer logits.
class LogisticGuardModel final : public GuardModel {
 public:
  LogisticGuardModel(std::size_t feature_dim, std::vector<double> weights, std::string adapter_id);

  std::pair<double, double> verbalizer_logits(const ImageAsset* image, std::string_view text) const override;
  std::string id() const override { return adapter_id_; }

  // Sparse normalized feature vector as (index, value) pairs.
  static std::vector<std::pair<std::size_t, double>> features(const ImageAsset* image, std::string_view text,
                                                              std::size_t feature_dim);

  Json to_json() const;
  static LogisticGuardModel from_json(const Json& j);

 private:
  std::size_t dim_;
  // Layout: [safe weights (dim), unsafe weights (dim), safe bias, unsafe bias].
  std::vector<double> w_;
  std::string adapter_id_;
};

// Full-batch gradient descent on mean guard_loss.
class LogisticTrainer final : public GuardTrainerBackend {
 public:
  std::string id() const override { return "mock-logistic-trainer/1"; }
  std::shared_ptr<const GuardModel> fit(const std::vector<TrainExample>& dataset, const GuardTrainConfig& config,
                                        GuardTrainingReport& report) const override;
};

std::string training_fingerprint(const std::vector<TrainExample>& dataset, const GuardTrainConfig& config,
                                 std::string_view trainer_id);

struct TrainedGuard {
  GuardModelHandle handle;
  GuardTrainingReport report;
  std::shared_ptr<const GuardModel> model;
};

// Throws DegenerateDataset when a label is missing, TrainingFailed on divergence.
TrainedGuard train_guard(const std::vector<TrainExample>& dataset, const GuardTrainerBackend& trainer,
                         const GuardTrainConfig& config);

// Writes the adapter next to the manifest and records its relative path.
void persist_guard(const std::filesystem::path& manifest, TrainedGuard& guard);
// Loads a mock-logistic adapter referenced by a handle manifest.
std::shared_ptr<const GuardModel> load_logistic_guard(const std::filesystem::path& manifest);

// Throws GuardUnavailable when the model backend cannot answer.
GuardVerdict classify(const GuardModel& model, const GuardModelHandle& handle, const ImageAsset* image,
                      std::string_view text);

// Operational default: an unavailable guard counts as an unsafe verdict.
GuardVerdict classify_fail_closed(const GuardModel& model, const GuardModelHandle& handle, const ImageAsset* image,
                                  std::string_view text);

// Guard model served remotely: operation guard_classify {adapter_id, image, text}
// returning {logit_safe, logit_unsafe}.
class RemoteGuardModel final : public GuardModel {
 public:
  RemoteGuardModel(BackendConfig config, std::string adapter_id);
  std::pair<double, double> verbalizer_logits(const ImageAsset* image, std::string_view text) const override;
  std::string id() const override { return adapter_id_; }

 private:
  RemoteClient client_;
  std::string adapter_id_;
};

}  // namespace redguard
