#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "faudit/explainers.hpp"
#include "faudit/faithfulness.hpp"
#include "faudit/models.hpp"
#include "faudit/record.hpp"
#include "faudit/synthwafer.hpp"
#include "faudit/train.hpp"

namespace faudit {

/// Invalid or inconsistent audit configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A prerequisite stage has not been run for this configuration.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelSpec {
  std::string name;
  ModelConfig model;
  TrainConfig train;
  /// Non-empty for black-box models served by an adapter process.
  std::vector<std::string> adapter;
  std::size_t window = 8;
  /// Explainers for this model; empty means every configured one it supports.
  std::vector<std::string> explainers;
  std::string gradcam_layer;

  bool black_box() const { return !adapter.empty(); }
};

struct AuditConfig {
  std::filesystem::path output_dir = "faudit_out";
  std::vector<std::uint64_t> seeds = {0};
  DatasetSpec dataset;
  std::vector<ModelSpec> models;
  std::vector<std::string> explainers;
  std::vector<FillOperator> fills = {FillOperator::zero()};
  MetricConfig metrics;
  RiseConfig rise;
  std::size_t samples_per_class = 40;
  std::uint64_t subset_seed = 42;
  /// Explainers whose stability is measured; empty means all.
  std::set<std::string> stability_explainers;
  std::size_t bootstrap_resamples = 2000;
  std::uint64_t bootstrap_seed = 0;

  /// Parses and validates; relative output_dir is taken relative to `base`.
  static AuditConfig from_json(const std::string& text, const std::filesystem::path& base = {});
  static AuditConfig load(const std::filesystem::path& path);

  /// Fully defaulted configuration as canonical JSON.
  std::string resolved_json() const;
  /// Explainers that apply to `model`, in configured order.
  std::vector<std::string> explainers_for_model(const ModelSpec& model) const;
};

enum class Stage { generate, train, explain, audit, report };
std::string to_string(Stage s);

/// FNV-1a over the stage's config slice chained with its predecessor's hash.
std::string stage_hash(const AuditConfig& config, Stage stage);
std::filesystem::path stage_dir(const AuditConfig& config, Stage stage);

struct RunOptions {
  std::size_t jobs = 1;
  std::ostream* log = nullptr;
};

struct StageResult {
  std::filesystem::path dir;
  /// Error rows written (explain and audit stages).
  std::size_t failures = 0;
};

StageResult run_generate(const AuditConfig& config, const RunOptions& options = {});
StageResult run_train(const AuditConfig& config, const RunOptions& options = {});
StageResult run_explain(const AuditConfig& config, const RunOptions& options = {});
StageResult run_audit(const AuditConfig& config, const RunOptions& options = {});
StageResult run_report(const AuditConfig& config, const RunOptions& options = {});

// ---- per-sample audit ----

struct AuditSettings {
  std::vector<FillOperator> fills = {FillOperator::zero()};
  MetricConfig metrics;
  RiseConfig rise;
  std::string gradcam_layer;
  std::set<std::string> stability_explainers;
  /// Applied to every heatmap value before scoring, when set.
  std::function<double(double)> heatmap_transform;
};

struct CurveRow {
  std::uint64_t run_seed = 0;
  std::string model;
  std::uint64_t sample_id = 0;
  std::string explainer;
  std::string fill;
  Direction direction = Direction::deletion;
  double fraction = 0.0;
  double probability = 0.0;
};

struct SampleAudit {
  std::vector<AuditRecord> records;
  std::vector<CurveRow> curves;
};

/// Seed for explainer randomness (RISE masks, random ranks) of one sample.
std::uint64_t explainer_seed(std::uint64_t run_seed, const std::string& explainer,
                             std::uint64_t sample_id);
/// Seed for the stability augmentations of one sample.
std::uint64_t stability_seed(std::uint64_t run_seed, std::uint64_t sample_id);

/// Audits one sample under every explainer and fill. `model` may be null for
/// black-box models. `precomputed` supplies base heatmaps by explainer id.
/// Failures become error records; nothing is thrown for per-cell problems.
SampleAudit audit_sample(const Classifier* model, const PredictFn& predict,
                         const std::string& model_name, std::uint64_t run_seed,
                         const WaferSample& sample, const std::vector<std::string>& explainers,
                         const AuditSettings& settings,
                         const std::map<std::string, Heatmap>* precomputed = nullptr);

// ---- record files ----

std::string record_to_json(const AuditRecord& r);
AuditRecord record_from_json(const std::string& line);
void write_records_jsonl(const std::filesystem::path& path, const std::vector<AuditRecord>& rows);
std::vector<AuditRecord> read_records_jsonl(const std::filesystem::path& path);
void write_records_csv(const std::filesystem::path& path, const std::vector<AuditRecord>& rows,
                       const std::vector<int>& topk);
void write_curves_csv(const std::filesystem::path& path, const std::vector<CurveRow>& rows);

/// Writes every report table for `records` into `dir`.
void write_report(const std::filesystem::path& dir, const std::vector<AuditRecord>& records,
                  const std::vector<CurveRow>& curves, std::size_t bootstrap_resamples,
                  std::uint64_t bootstrap_seed);
std::vector<CurveRow> read_curves_csv(const std::filesystem::path& path);

}  // namespace faudit
