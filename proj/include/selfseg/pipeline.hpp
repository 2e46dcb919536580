#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "selfseg/fusion.hpp"
#include "selfseg/manifest.hpp"
#include "selfseg/metrics.hpp"
#include "selfseg/model.hpp"

namespace selfseg {

struct EvalConfig {
  int k_folds = 5;
  void validate() const;
};

/// Which rows the run produces. Phase subsets each yield one teacher row
/// trained on the A role. self_learn adds a student trained on A plus
/// pseudo-labelled C; self_learn_ta adds a student consuming the
/// TA-refined labels (on A only when self_learn is off).
struct AblationConfig {
  std::vector<std::vector<Phase>> phase_subsets;
  bool self_learn = true;
  bool self_learn_ta = true;

  static AblationConfig defaults();  // three single-phase rows + the 3-phase row
};

struct PipelineConfig {
  std::string manifest_a;
  std::string manifest_b;
  std::string manifest_c;
  std::string manifest_d;
  FusionConfig fusion;
  LossConfig loss;
  TrainConfig teacher_a;
  TrainConfig teacher_b;
  TrainConfig ta;
  TrainConfig student;
  std::uint64_t seed = 1;
  EvalConfig eval;
  AblationConfig ablations = AblationConfig::defaults();

  void validate() const;
};

/// Canonical JSON (fail-closed parsing; unknown keys rejected). The per-model
/// seed fields are derived from the global seed and are not part of the file.
std::string pipeline_config_to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const std::string& text);
/// FNV-1a-64 of the canonical JSON, 16 hex digits; keys the run directory.
std::string config_hash(const PipelineConfig& cfg);

/// Deterministic fold assignment: seeded shuffle then round-robin. Returns
/// case_id -> fold in [0, k). Throws std::invalid_argument when k < 2 or the
/// manifest has fewer than k cases.
std::map<std::string, int> crossval_split(const DatasetManifest& manifest, int k,
                                          std::uint64_t seed);

/// Composed A-role training label: teacher-B pancreas prediction, overwritten
/// by the manual tumor voxels; teacher-B tumor predictions are discarded.
LabelMap compose_bootstrap_label(const LabelMap& teacher_b_pred, const LabelMap& manual_tumor);

/// Predicts with teacher B on each case's venous phase and writes composed
/// labels under label_dir, returning a manifest copy whose cases carry the
/// "seg" annotation with provenance bootstrapped. Cases without a venous
/// image are skipped and listed in `skipped`.
DatasetManifest bootstrap_pancreas_labels(const DatasetManifest& dataset_a,
                                          const LinearSoftmaxModel& teacher_b,
                                          const std::filesystem::path& label_dir,
                                          std::vector<std::string>* skipped = nullptr);

struct RunResult {
  std::filesystem::path run_dir;
  AblationTable table;
};

/// Executes the full flow (teacher B, bootstrap, phase teachers, pseudo
/// labels, TA, refinement, students, cross-validated evaluation) under
/// `<out_root>/run-<config_hash>/`, writing run_report.json and per-fold
/// artifacts. Deterministic for a fixed config, independent of thread count.
RunResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_root);

/// Convenience wrapper returning just the ablation table.
AblationTable run_ablations(const PipelineConfig& cfg, const std::filesystem::path& out_root);

}  // namespace selfseg
