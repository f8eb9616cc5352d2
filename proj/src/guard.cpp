#include "redguard/guard.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "redguard/error.hpp"
#include "redguard/text.hpp"

namespace redguard {

namespace {

constexpr std::string_view kHandleFormat = "redguard.guard-handle";
constexpr std::string_view kAdapterFormat = "redguard.logistic-adapter";
constexpr int kHandleVersion = 1;

SafetyLabel bucket_label(TrainBucket b) { return b == TrainBucket::Benign ? SafetyLabel::Safe : SafetyLabel::Unsafe; }

std::string content_key(const TrainExample& e) {
  Json j;
  to_json(j, e);
  return j.dump();
}

}  // namespace

std::size_t DatasetComposition::total() const {
  std::size_t t = 0;
  for (const auto& [b, n] : counts) t += n;
  return t;
}

std::size_t DatasetComposition::count(TrainBucket b) const {
  auto it = counts.find(b);
  return it == counts.end() ? 0 : it->second;
}

Violations DatasetComposition::check() const {
  Violations v;
  if (count(TrainBucket::Benign) == 0) v.emplace_back("composition needs a positive benign count");
  return v;
}

DatasetComposition default_composition(std::size_t total) {
  DatasetComposition c;
  const std::size_t benign = total / 2 + total % 2;
  const std::size_t malicious = total - benign;
  std::size_t remainder = malicious % 4;
  for (auto b : kAllTrainBuckets) {
    if (b == TrainBucket::Benign) continue;
    c.counts[b] = malicious / 4 + (remainder > 0 ? 1 : 0);
    if (remainder > 0) --remainder;
  }
  c.counts[TrainBucket::Benign] = benign;
  return c;
}

Json composition_to_json(const DatasetComposition& c) {
  Json j = Json::object();
  for (auto b : kAllTrainBuckets) j[std::string(to_string(b))] = c.count(b);
  j["total"] = c.total();
  return j;
}

DatasetComposition composition_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "guard.composition must be an object");
  try {
    bool explicit_counts = false;
    DatasetComposition c;
    for (const auto& [key, value] : j.items()) {
      if (key == "total") continue;
      c.counts[parse_train_bucket(key)] = value.get<std::size_t>();
      explicit_counts = true;
    }
    if (!explicit_counts) {
      if (!j.contains("total")) throw Error(ErrorKind::ConfigError, "guard.composition needs total or counts");
      return default_composition(j.at("total").get<std::size_t>());
    }
    for (auto b : kAllTrainBuckets) c.counts.try_emplace(b, 0);
    if (j.contains("total") && j.at("total").get<std::size_t>() != c.total()) {
      throw Error(ErrorKind::ConfigError, "guard.composition.total differs from the bucket sum");
    }
    return c;
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ConfigError, fmt::format("guard.composition: {}", e.what()));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConfigError) throw;
    throw Error(ErrorKind::ConfigError, e.what());
  }
}

std::vector<TrainExample> build_training_set(const BucketSources& sources, const DatasetComposition& composition,
                                             std::uint64_t seed) {
  if (auto v = composition.check(); !v.empty()) throw Error(ErrorKind::CompositionError, v.front());
  const std::string salt = hex64(seed);

  using Keyed = std::pair<std::uint64_t, std::string>;
  std::vector<std::pair<Keyed, TrainExample>> picked;
  for (auto bucket : kAllTrainBuckets) {
    const std::size_t want = composition.count(bucket);
    if (want == 0) continue;
    auto it = sources.find(bucket);
    const std::size_t have = it == sources.end() ? 0 : it->second.size();
    if (have < want) {
      throw Error(ErrorKind::CompositionError,
                  fmt::format("bucket {} short by {} (requested {}, available {})", to_string(bucket), want - have,
                              want, have));
    }
    std::vector<std::pair<Keyed, TrainExample>> pool;
    pool.reserve(have);
    for (auto e : it->second) {
      e.bucket = bucket;
      e.label = bucket_label(bucket);
      auto key = content_key(e);
      pool.push_back({{fnv1a64(salt + ":select:" + key), std::move(key)}, std::move(e)});
    }
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < want; ++i) {
      auto& [k, e] = pool[i];
      picked.push_back({{fnv1a64(salt + ":order:" + k.second), k.second}, std::move(e)});
    }
  }
  std::sort(picked.begin(), picked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<TrainExample> out;
  out.reserve(picked.size());
  for (auto& p : picked) out.push_back(std::move(p.second));
  return out;
}

double guard_loss(std::pair<double, double> class_logits, SafetyLabel label) {
  const auto [s, u] = class_logits;
  if (!std::isfinite(s) || !std::isfinite(u)) {
    throw Error(ErrorKind::InvalidLogits, fmt::format("class logits ({}, {})", s, u));
  }
  const double lse = std::max(s, u) + std::log1p(std::exp(-std::fabs(s - u)));
  return lse - (label == SafetyLabel::Safe ? s : u);
}

Violations GuardModelHandle::check() const {
  Violations v;
  if (base_model_id.empty()) v.emplace_back("base_model_id empty");
  if (adapter_id.empty()) v.emplace_back("adapter_id empty");
  if (verbalizers.first.empty() || verbalizers.second.empty()) v.emplace_back("verbalizer empty");
  if (verbalizers.first == verbalizers.second) v.emplace_back("verbalizers not distinct");
  if (training_fingerprint.empty()) v.emplace_back("training_fingerprint empty");
  return v;
}

Json handle_to_json(const GuardModelHandle& h) {
  return Json{{"format", kHandleFormat},
              {"version", kHandleVersion},
              {"base_model_id", h.base_model_id},
              {"adapter_id", h.adapter_id},
              {"verbalizers", {h.verbalizers.first, h.verbalizers.second}},
              {"training_fingerprint", h.training_fingerprint},
              {"adapter_path", h.adapter_path}};
}

GuardModelHandle handle_from_json(const Json& j) {
  try {
    if (j.value("format", "") != kHandleFormat || j.value("version", 0) != kHandleVersion) {
      throw Error(ErrorKind::ParseError, "not a guard handle manifest");
    }
    GuardModelHandle h;
    h.base_model_id = j.at("base_model_id").get<std::string>();
    h.adapter_id = j.at("adapter_id").get<std::string>();
    const auto& v = j.at("verbalizers");
    if (!v.is_array() || v.size() != 2) throw Error(ErrorKind::ParseError, "verbalizers must be a pair");
    h.verbalizers = {v[0].get<std::string>(), v[1].get<std::string>()};
    h.training_fingerprint = j.at("training_fingerprint").get<std::string>();
    h.adapter_path = j.value("adapter_path", "");
    if (auto bad = h.check(); !bad.empty()) throw Error(ErrorKind::ParseError, bad.front());
    return h;
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
}

void save_handle(const std::filesystem::path& manifest, const GuardModelHandle& h) {
  write_file_atomic(manifest, handle_to_json(h).dump(2) + "\n");
}

GuardModelHandle load_handle(const std::filesystem::path& manifest) {
  try {
    return handle_from_json(Json::parse(read_file(manifest)));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ParseError, fmt::format("{}: {}", manifest.string(), e.what()));
  }
}

Violations GuardTrainConfig::check() const {
  Violations v;
  if (base_model_id.empty()) v.emplace_back("guard.base_model_id empty");
  if (verbalizers.first.empty() || verbalizers.first == verbalizers.second) {
    v.emplace_back("guard.verbalizers must be two distinct non-empty strings");
  }
  if (epochs < 0) v.emplace_back("guard.epochs must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) v.emplace_back("guard.learning_rate must be > 0");
  if (feature_dim == 0) v.emplace_back("guard.feature_dim must be positive");
  return v;
}

Json guard_train_config_to_json(const GuardTrainConfig& c) {
  return Json{{"base_model_id", c.base_model_id},
              {"verbalizers", {c.verbalizers.first, c.verbalizers.second}},
              {"epochs", c.epochs},
              {"learning_rate", c.learning_rate},
              {"feature_dim", c.feature_dim},
              {"seed", c.seed}};
}

GuardTrainConfig guard_train_config_from_json(const Json& j, GuardTrainConfig c) {
  try {
    if (j.contains("base_model_id")) c.base_model_id = j.at("base_model_id").get<std::string>();
    if (j.contains("verbalizers")) {
      const auto& v = j.at("verbalizers");
      if (!v.is_array() || v.size() != 2) throw Error(ErrorKind::ConfigError, "guard.verbalizers must be a pair");
      c.verbalizers = {v[0].get<std::string>(), v[1].get<std::string>()};
    }
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("feature_dim")) c.feature_dim = j.at("feature_dim").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ConfigError, fmt::format("guard: {}", e.what()));
  }
  return c;
}

LogisticGuardModel::LogisticGuardModel(std::size_t feature_dim, std::vector<double> weights, std::string adapter_id)
    : dim_(feature_dim), w_(std::move(weights)), adapter_id_(std::move(adapter_id)) {
  if (w_.size() != 2 * dim_ + 2) throw Error(ErrorKind::InvalidInput, "adapter weight count mismatch");
}

std::vector<std::pair<std::size_t, double>> LogisticGuardModel::features(const ImageAsset* image, std::string_view text,
                                                                         std::size_t feature_dim) {
  std::set<std::string> names;
  const auto text_words = lower_words(text);
  std::vector<std::string> caption_words;
  if (image) caption_words = lower_words(image->caption);
  for (const auto& w : text_words) names.insert("t:" + w);
  for (const auto& c : caption_words) names.insert("i:" + c);
  for (const auto& w : text_words) {
    for (const auto& c : caption_words) names.insert("x:" + w + "|" + c);
  }
  std::map<std::size_t, double> acc;
  for (const auto& n : names) acc[fnv1a64(n) % feature_dim] += 1.0;
  double norm = 0.0;
  for (const auto& [i, v] : acc) norm += v * v;
  norm = std::sqrt(norm);
  std::vector<std::pair<std::size_t, double>> out(acc.begin(), acc.end());
  if (norm > 0.0) {
    for (auto& [i, v] : out) v /= norm;
  }
  return out;
}

std::pair<double, double> LogisticGuardModel::verbalizer_logits(const ImageAsset* image, std::string_view text) const {
  double s = w_[2 * dim_];
  double u = w_[2 * dim_ + 1];
  for (const auto& [i, v] : features(image, text, dim_)) {
    s += w_[i] * v;
    u += w_[dim_ + i] * v;
  }
  return {s, u};
}

Json LogisticGuardModel::to_json() const {
  return Json{{"format", kAdapterFormat}, {"version", 1}, {"adapter_id", adapter_id_}, {"feature_dim", dim_},
              {"weights", w_}};
}

LogisticGuardModel LogisticGuardModel::from_json(const Json& j) {
  try {
    if (j.value("format", "") != kAdapterFormat) throw Error(ErrorKind::ParseError, "not a logistic adapter");
    return LogisticGuardModel(j.at("feature_dim").get<std::size_t>(), j.at("weights").get<std::vector<double>>(),
                              j.at("adapter_id").get<std::string>());
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
}

std::shared_ptr<const GuardModel> LogisticTrainer::fit(const std::vector<TrainExample>& dataset,
                                                       const GuardTrainConfig& config,
                                                       GuardTrainingReport& report) const {
  const std::size_t d = config.feature_dim;
  const double n = static_cast<double>(dataset.size());
  std::vector<std::vector<std::pair<std::size_t, double>>> x;
  x.reserve(dataset.size());
  for (const auto& e : dataset) x.push_back(LogisticGuardModel::features(e.image ? &*e.image : nullptr, e.text, d));

  std::vector<double> w(2 * d + 2, 0.0);
  auto logits = [&](std::size_t k) {
    double s = w[2 * d];
    double u = w[2 * d + 1];
    for (const auto& [i, v] : x[k]) {
      s += w[i] * v;
      u += w[d + i] * v;
    }
    return std::pair{s, u};
  };
  auto mean_loss = [&] {
    double total = 0.0;
    for (std::size_t k = 0; k < dataset.size(); ++k) total += guard_loss(logits(k), dataset[k].label);
    return total / n;
  };

  report = {};
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<double> grad(w.size(), 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < dataset.size(); ++k) {
      const auto lg = logits(k);
      total += guard_loss(lg, dataset[k].label);
      const double p_safe = softmax2_first(lg.first, lg.second);
      const double gs = p_safe - (dataset[k].label == SafetyLabel::Safe ? 1.0 : 0.0);
      const double gu = -gs;
      for (const auto& [i, v] : x[k]) {
        grad[i] += gs * v;
        grad[d + i] += gu * v;
      }
      grad[2 * d] += gs;
      grad[2 * d + 1] += gu;
    }
    report.epoch_loss.push_back(total / n);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config.learning_rate * grad[i] / n;
    if (!std::isfinite(total) || std::any_of(w.begin(), w.end(), [](double v) { return !std::isfinite(v); })) {
      throw Error(ErrorKind::TrainingFailed, fmt::format("non-finite weights at epoch {}", epoch));
    }
  }
  report.final_loss = mean_loss();
  report.epoch_loss.push_back(report.final_loss);
  std::size_t correct = 0;
  for (std::size_t k = 0; k < dataset.size(); ++k) {
    const auto lg = logits(k);
    if (GuardVerdict::from_p_safe(softmax2_first(lg.first, lg.second)).label == dataset[k].label) ++correct;
  }
  report.train_accuracy = static_cast<double>(correct) / n;
  return std::make_shared<LogisticGuardModel>(d, std::move(w), "");
}

std::string training_fingerprint(const std::vector<TrainExample>& dataset, const GuardTrainConfig& config,
                                 std::string_view trainer_id) {
  std::string blob = std::string(trainer_id) + "\n" + guard_train_config_to_json(config).dump() + "\n" + to_jsonl(dataset);
  return hex64(fnv1a64(blob));
}

TrainedGuard train_guard(const std::vector<TrainExample>& dataset, const GuardTrainerBackend& trainer,
                         const GuardTrainConfig& config) {
  if (auto v = config.check(); !v.empty()) throw Error(ErrorKind::ConfigError, v.front());
  if (dataset.empty()) throw Error(ErrorKind::DegenerateDataset, "empty training set");
  bool has_safe = false;
  bool has_unsafe = false;
  for (const auto& e : dataset) (e.label == SafetyLabel::Safe ? has_safe : has_unsafe) = true;
  if (!has_safe || !has_unsafe) {
    throw Error(ErrorKind::DegenerateDataset, fmt::format("only {} labels present", has_safe ? "safe" : "unsafe"));
  }

  TrainedGuard out;
  out.handle.base_model_id = config.base_model_id;
  out.handle.verbalizers = config.verbalizers;
  out.handle.training_fingerprint = training_fingerprint(dataset, config, trainer.id());
  out.handle.adapter_id = "adapter-" + out.handle.training_fingerprint;
  auto model = trainer.fit(dataset, config, out.report);
  if (auto* lm = dynamic_cast<const LogisticGuardModel*>(model.get())) {
    // Stamp the adapter with the handle's id.
    auto j = lm->to_json();
    j["adapter_id"] = out.handle.adapter_id;
    model = std::make_shared<LogisticGuardModel>(LogisticGuardModel::from_json(j));
  }
  out.model = std::move(model);
  spdlog::info("guard trained: {} examples, loss {:.4f}, accuracy {:.3f}", dataset.size(), out.report.final_loss,
               out.report.train_accuracy);
  return out;
}

void persist_guard(const std::filesystem::path& manifest, TrainedGuard& guard) {
  const auto* lm = dynamic_cast<const LogisticGuardModel*>(guard.model.get());
  if (lm) {
    const std::string file = guard.handle.adapter_id + ".json";
    std::filesystem::create_directories(manifest.parent_path().empty() ? "." : manifest.parent_path());
    write_file_atomic(manifest.parent_path() / file, lm->to_json().dump() + "\n");
    guard.handle.adapter_path = file;
  }
  save_handle(manifest, guard.handle);
}

std::shared_ptr<const GuardModel> load_logistic_guard(const std::filesystem::path& manifest) {
  const auto h = load_handle(manifest);
  if (h.adapter_path.empty()) throw Error(ErrorKind::ParseError, "handle has no adapter_path");
  try {
    return std::make_shared<LogisticGuardModel>(
        LogisticGuardModel::from_json(Json::parse(read_file(manifest.parent_path() / h.adapter_path))));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
}

GuardVerdict classify(const GuardModel& model, const GuardModelHandle& handle, const ImageAsset* image,
                      std::string_view text) {
  if (text.empty()) throw Error(ErrorKind::InvalidInput, "classify on empty text");
  if (auto v = handle.check(); !v.empty()) throw Error(ErrorKind::InvalidInput, v.front());
  std::pair<double, double> lg;
  try {
    lg = model.verbalizer_logits(image, text);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::BackendUnavailable) throw Error(ErrorKind::GuardUnavailable, e.what());
    throw;
  }
  if (!std::isfinite(lg.first) || !std::isfinite(lg.second)) {
    throw Error(ErrorKind::GuardUnavailable, "guard returned non-finite logits");
  }
  return GuardVerdict::from_p_safe(softmax2_first(lg.first, lg.second));
}

GuardVerdict classify_fail_closed(const GuardModel& model, const GuardModelHandle& handle, const ImageAsset* image,
                                  std::string_view text) {
  try {
    return classify(model, handle, image, text);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::GuardUnavailable) throw;
    spdlog::warn("guard unavailable, failing closed: {}", e.what());
    return GuardVerdict{SafetyLabel::Unsafe, 0.0};
  }
}

RemoteGuardModel::RemoteGuardModel(BackendConfig config, std::string adapter_id)
    : client_(std::move(config), "crossguard"), adapter_id_(std::move(adapter_id)) {}

std::pair<double, double> RemoteGuardModel::verbalizer_logits(const ImageAsset* image, std::string_view text) const {
  const auto r = client_.call(
      "guard_classify",
      Json{{"adapter_id", adapter_id_}, {"image", image ? asset_reference_json(*image) : Json(nullptr)}, {"text", text}});
  try {
    return {r.at("logit_safe").get<double>(), r.at("logit_unsafe").get<double>()};
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::BackendUnavailable, fmt::format("guard_classify: malformed reply: {}", e.what()));
  }
}

}  // namespace redguard
