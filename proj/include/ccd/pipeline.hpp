#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccd/cam_views.hpp"
#include "ccd/debias.hpp"
#include "ccd/eval_report.hpp"
#include "ccd/synth.hpp"
#include "ccd/trainer.hpp"
#include "json.hpp"

namespace ccd {

struct ProviderConfig {
  std::string mode = "synthetic";  // synthetic | command | tcp
  std::vector<std::string> command;
  std::string address;
  std::size_t window = 16;
  std::int64_t timeout_ms = 60000;
  std::string cache;  // empty: memory only
};

/// One document holding every stage's settings. Relative paths resolve
/// against `base_dir` (the config file's directory).
struct PipelineConfig {
  std::filesystem::path base_dir;
  std::uint64_t seed = 0;

  std::string train_manifest = "manifest_train.json";
  std::string eval_manifest = "manifest_test.json";
  std::string world = "world.json";
  WorldSpec synth;

  double tau = 0.01;
  bool debias = true;
  CalibrationConfig calibration;

  ViewPolicy policy = ViewPolicy::kCam;
  ViewConfig views;
  std::size_t policy_k = 9;
  std::int32_t resize_long = 640;

  bool label_update = true;
  double alpha = 0.4;

  TrainConfig train;
  ProviderConfig provider;

  std::string sweep_parameter;
  std::vector<nlohmann::json> sweep_values;

  /// Re-runs every owning module's range checks.
  void validate() const;
  nlohmann::json to_json() const;
  /// Hex FNV-1a of the canonical JSON form.
  std::string hash() const;
  std::filesystem::path resolve(const std::string& p) const;
};

/// Strict: unknown keys and wrong types are ConfigErrors. Validates.
PipelineConfig config_from_json(const nlohmann::json& doc,
                                const std::filesystem::path& base_dir);
PipelineConfig load_config(const std::filesystem::path& path);

/// Sets a dotted key (e.g. "fusion.alpha") in a config document.
void set_config_value(nlohmann::json& doc, const std::string& dotted_key,
                      const nlohmann::json& value);

// Stage commands. Every stage reads and writes artifacts in `run_dir`, and
// writes <stage>.meta.json carrying the config hash; inputs produced under a
// different hash are rejected with InputError.

/// Generates the synthetic world into `out_dir` and writes a config.json
/// there whose data paths point at it.
WorldFiles cmd_synth(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void cmd_label_init(const PipelineConfig& cfg, const std::filesystem::path& run_dir);
void cmd_warmup(const PipelineConfig& cfg, const std::filesystem::path& run_dir);
void cmd_update_labels(const PipelineConfig& cfg, const std::filesystem::path& run_dir);
void cmd_train_main(const PipelineConfig& cfg, const std::filesystem::path& run_dir);
/// label-init, warm-up, update-labels and main training in sequence.
void cmd_train_full(const PipelineConfig& cfg, const std::filesystem::path& run_dir);

enum class Predictor { kHead, kGroundTruth };
EvalResult cmd_eval(const PipelineConfig& cfg, const std::filesystem::path& run_dir,
                    Predictor predictor = Predictor::kHead);
void cmd_report(const PipelineConfig& cfg, const std::filesystem::path& run_dir);

/// Runs train --full and eval per value of the sweep parameter, each in
/// run_dir/sweep_<i>, and writes run_dir/sweep.csv. Returns the CSV text.
std::string cmd_sweep(const PipelineConfig& cfg, const std::filesystem::path& run_dir);

// Artifact file names inside a run directory.
namespace artifact {
inline constexpr const char* kLabelsInitialRaw = "labels_initial_raw.ccdt";
inline constexpr const char* kLabelsInitial = "labels_initial.ccdt";
inline constexpr const char* kBias = "bias.json";
inline constexpr const char* kLabelsLocal = "labels_local.ccdt";
inline constexpr const char* kLocalMask = "local_mask.ccdt";
inline constexpr const char* kLabelsFinal = "labels_final.ccdt";
inline constexpr const char* kViews = "views.jsonl";
inline constexpr const char* kViewCounts = "view_counts.csv";
inline constexpr const char* kHeadWarmup = "head_warmup";
inline constexpr const char* kHeadFinal = "head_final";
inline constexpr const char* kTrainLogWarmup = "trainlog_warmup.jsonl";
inline constexpr const char* kTrainLogMain = "trainlog_main.jsonl";
inline constexpr const char* kEvalJson = "eval.json";
}  // namespace artifact

/// Pooled features (and augmented views when every record has them).
TrainingSet load_training_set(const DatasetManifest& manifest);
/// n x C ground-truth labels; InputError when a record has none.
std::vector<std::uint8_t> load_gt_labels(const DatasetManifest& manifest);
EmbeddingMatrix load_text_embeddings(const DatasetManifest& manifest);
EmbeddingMatrix load_global_embeddings(const DatasetManifest& manifest);

void save_head(const ClassifierHead& head, const std::filesystem::path& dir,
               const std::string& stem);
ClassifierHead load_head(const std::filesystem::path& dir, const std::string& stem);

}  // namespace ccd
