#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "redguard/backends.hpp"
#include "redguard/domain.hpp"
#include "redguard/guard.hpp"

namespace redguard {

enum class AttackKind { ExplicitVision, ExplicitText, Implicit, Benign };

std::string_view to_string(AttackKind k);
AttackKind parse_attack_kind(std::string_view s);

struct SuiteSample {
  std::string id;
  std::optional<ImageAsset> image;
  std::string text;
  GroundTruth ground_truth = GroundTruth::Malicious;

  bool operator==(const SuiteSample&) const = default;
};

Json suite_sample_to_json(const SuiteSample& s);
SuiteSample suite_sample_from_json(const Json& j);

struct BenchmarkSuite {
  std::string name;
  EvalBucket bucket = EvalBucket::InDomain;
  AttackKind attack_kind = AttackKind::Implicit;
  std::vector<SuiteSample> samples;

  Violations check() const;
};

// Manifest: {"name", "bucket", "attack_kind", "samples": "<jsonl relative to manifest>"}.
BenchmarkSuite load_suite(const std::filesystem::path& manifest);
void save_suite(const std::filesystem::path& manifest, const BenchmarkSuite& suite);

// A system under test. A safe verdict means the input was let through
// (guard passed it, or the victim complied).
class EvalTarget {
 public:
  virtual ~EvalTarget() = default;
  // Throws BackendUnavailable or GuardUnavailable when the sample must be skipped.
  virtual GuardVerdict judge(const SuiteSample& sample) const = 0;
  virtual std::string name() const = 0;
  // How a verdict is reached, recorded in report metadata.
  virtual std::string protocol() const = 0;
};

class GuardModelTarget final : public EvalTarget {
 public:
  GuardModelTarget(const GuardModel& model, GuardModelHandle handle, std::string name);
  GuardVerdict judge(const SuiteSample& sample) const override;
  std::string name() const override { return name_; }
  std::string protocol() const override;

 private:
  const GuardModel& model_;
  GuardModelHandle handle_;
  std::string name_;
};

// Text-only guard; the image is not shown to it.
class TextGuardTarget final : public EvalTarget {
 public:
  TextGuardTarget(const GuardBackend& guard, std::string name);
  GuardVerdict judge(const SuiteSample& sample) const override;
  std::string name() const override { return name_; }
  std::string protocol() const override;

 private:
  const GuardBackend& guard_;
  std::string name_;
};

class VictimTarget final : public EvalTarget {
 public:
  VictimTarget(const Victim& victim, const ResponseJudge& judge, std::string name);
  GuardVerdict judge(const SuiteSample& sample) const override;
  std::string name() const override { return name_; }
  std::string protocol() const override;

 private:
  const Victim& victim_;
  const ResponseJudge& judge_;
  std::string name_;
};

inline constexpr double kMaxSkipFraction = 0.2;

struct EvalRun {
  std::string target;
  std::string suite;
  std::vector<EvalRecord> records;
  std::size_t skipped = 0;
  // More than kMaxSkipFraction of the samples were skipped.
  bool unreliable = false;
};

// One record per sample, in suite order. Backend failures become skipped records.
EvalRun evaluate(const EvalTarget& target, const BenchmarkSuite& suite, int max_concurrent = 4);

// Percentages over non-skipped records. Throw UndefinedMetric on an empty denominator.
double asr(std::span<const EvalRecord> records);
double utility(std::span<const EvalRecord> records);

struct TradeoffPoint {
  std::string model;
  std::optional<double> utility;
  std::optional<double> security;  // 100 - ASR
  // Non-empty when a metric was undefined and the point cannot be plotted.
  std::string flag;
};

TradeoffPoint tradeoff_point(std::string model, std::span<const EvalRecord> security_records,
                             std::span<const EvalRecord> utility_records);
std::vector<TradeoffPoint> tradeoff_points(std::span<const EvalTarget* const> targets,
                                           const BenchmarkSuite& security_suite, const BenchmarkSuite& utility_suite,
                                           int max_concurrent = 4);
std::string tradeoff_csv(std::span<const TradeoffPoint> points);

struct CompareRow {
  std::string target;
  double base_asr = 0.0;
  double rewritten_asr = 0.0;

  double delta() const { return rewritten_asr - base_asr; }
};

// Signed two-decimal percentage: "+72.40", "-3.10", "+0.00".
std::string format_delta(double delta);

CompareRow compare_row(std::string target, std::span<const EvalRecord> base, std::span<const EvalRecord> rewritten);
// Throws SuiteMismatch unless both suites carry the same sample ids in the same order.
std::vector<CompareRow> redteam_compare(std::span<const EvalTarget* const> targets, const BenchmarkSuite& base,
                                        const BenchmarkSuite& rewritten, int max_concurrent = 4);
std::string redteam_compare_csv(std::span<const CompareRow> rows);

// Published base / rewritten ASRs for parity runs.
struct ReferenceCompareRow {
  std::string_view model;
  double base_asr;
  double rewritten_asr;
};
std::span<const ReferenceCompareRow> reference_redteam_rows();

struct ResultColumn {
  std::string benchmark;
  EvalBucket bucket = EvalBucket::InDomain;
};

struct ResultRow {
  std::string category;
  std::string model;
  // Aligned with ResultTable::columns; empty when undefined.
  std::vector<std::optional<double>> cells;
};

struct ResultTable {
  std::vector<ResultColumn> columns;
  std::vector<ResultRow> rows;

  // Adds the column if new (out-of-domain columns sort before in-domain ones)
  // and the row if new, then sets the cell.
  void set(const std::string& category, const std::string& model, const ResultColumn& column, double value);
  // Mean over the defined cells of the row; nullopt when none are defined.
  static std::optional<double> average(const ResultRow& row);
};

// Published rows (category, model, five cells in OOD-then-ID order, printed average).
struct ReferenceTableRow {
  std::string_view category;
  std::string_view model;
  std::array<double, 5> cells;
  double average;
};
std::span<const ResultColumn> reference_table_columns();
std::span<const ReferenceTableRow> reference_table_rows();

std::string render_markdown(const ResultTable& table);
std::string render_csv(const ResultTable& table);

struct ReportBundle {
  ResultTable table;
  std::vector<TradeoffPoint> tradeoff;
  std::vector<CompareRow> redteam;
  Json run_meta = Json::object();
};

// Writes results_table.md, results_table.csv, tradeoff.csv, redteam_compare.csv and run_meta.json.
void write_report(const std::filesystem::path& dir, const ReportBundle& bundle);

// Suites built from red-team artifacts, aligned by triple id: the original
// query with the paired image, and a rewrite with the same image.
BenchmarkSuite base_suite_from_triples(std::string name, std::span<const JointTriple> triples);
// Uses the highest-reward rewrite per triple; triples without one are left out
// of both suites by the caller via aligned_triples().
BenchmarkSuite rewritten_suite(std::string name, std::span<const JointTriple> triples,
                               std::span<const ScoredRewrite> rewrites);
std::vector<JointTriple> aligned_triples(std::span<const JointTriple> triples, std::span<const ScoredRewrite> rewrites);

}  // namespace redguard
