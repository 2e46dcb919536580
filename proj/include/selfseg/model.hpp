#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "selfseg/grid.hpp"

namespace selfseg {

/// Per-voxel feature layout: for each phase, in config order, (raw intensity,
/// local mean, local std) over a (2r+1)^3 box clamped to the grid bounds, then
/// one constant bias feature. Feature count = 3 * #phases + 1.
struct FeatureConfig {
  int radius = 1;
  std::vector<Phase> phases;

  std::size_t feature_count() const { return 3 * phases.size() + 1; }
  void validate() const;
};

/// Dense voxel-major feature matrix in raster (x-fastest) order.
struct FeatureMatrix {
  std::size_t n_voxels = 0;
  std::size_t n_features = 0;
  std::vector<double> values;  // values[v * n_features + f]

  double at(std::size_t v, std::size_t f) const { return values[v * n_features + f]; }
  const double* row(std::size_t v) const { return values.data() + v * n_features; }
};

/// Reference trainable segmenter: per-voxel linear softmax over normalized
/// features. Stands in for any backbone that maps phase images to a ProbMap.
struct LinearSoftmaxModel {
  ClassTable classes;
  FeatureConfig features;
  /// Frozen z-normalization statistics per feature. The bias feature is stored
  /// with mean 0 / std 1 so the intercept passes through unscaled.
  std::vector<double> feat_mean;
  std::vector<double> feat_std;
  /// Class-major weights: weights[c * n_features + f].
  std::vector<double> weights;

  std::size_t n_classes() const { return classes.size(); }
  std::size_t n_features() const { return features.feature_count(); }
  void validate() const;
};

struct LossConfig {
  double dice_weight = 1.0;
  double ce_weight = 1.0;
  double epsilon = 1e-5;     // soft-Dice smoothing
  double ce_clamp = 1e-7;    // probability floor inside log()
  void validate() const;
};

struct LearningRateSchedule {
  double initial = 5.0;
  double decay_factor = 1.0;  // 1.0 = constant
  int decay_every_epochs = 0; // 0 = never

  double at_epoch(int epoch) const;  // epoch is 0-based
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 1024;       // voxels per step
  int steps_per_epoch = 30;
  LearningRateSchedule lr;
  std::uint64_t seed = 0;
  double validation_fraction = 0.25;
  bool class_balanced = true;  // equal voxel counts per present class
  /// Classes whose mean validation Dice drives checkpoint selection. Empty
  /// means: the class named "tumor" when present, otherwise all foreground.
  std::vector<std::uint8_t> selection_class_ids;

  void validate() const;
};

struct TrainingExample {
  std::string id;
  std::map<Phase, ImageGrid> images;
  LabelMap labels;
  /// Optional supervision mask; voxels with value 0 are never sampled.
  std::optional<ByteGrid> weight_mask;
};

struct EpochRecord {
  int epoch = 0;  // 1-based in logs
  double train_loss = 0.0;
  std::vector<double> val_dice;  // per class id
};

struct TrainingLog {
  std::vector<std::string> warnings;
  std::vector<EpochRecord> epochs;
  std::vector<std::string> train_case_ids;
  std::vector<std::string> val_case_ids;
  int selected_epoch = 0;     // 1-based
  double selected_metric = 0.0;
};

struct TrainResult {
  LinearSoftmaxModel model;
  TrainingLog log;
};

struct Prediction {
  ProbMap probs;
  std::optional<LabelMap> labels;  // set when postprocess was requested
};

/// Extracts the per-voxel feature matrix for one case. Throws MissingPhaseError
/// when a configured phase is absent and DataMismatchError when the phase
/// volumes disagree on geometry.
FeatureMatrix extract_features(const std::map<Phase, ImageGrid>& images,
                               const FeatureConfig& config);

/// Per-voxel softmax(weights * normalized_features) over the full volume.
ProbMap forward(const LinearSoftmaxModel& model, const FeatureMatrix& features, const Dims& dims,
                const Spacing& spacing);

/// Combined soft-Dice + cross-entropy loss of a probability map against a hard
/// target, with the exact analytic gradient w.r.t. the softmax logits
/// (voxel-major, grad[v * n_classes + c]). The Dice term averages over
/// foreground classes only; the CE term averages over all voxels.
std::pair<double, std::vector<double>> loss_and_grad(const ProbMap& probs, const LabelMap& target,
                                                     const LossConfig& cfg);

/// Trains a fresh model (zero-initialized weights) with mini-batch SGD on
/// sampled voxels. Checkpoint selection: end-of-epoch model with the highest
/// validation Dice over the selection classes; ties keep the earlier epoch.
/// Deterministic for a fixed config.
TrainResult train(const std::vector<TrainingExample>& cases, const ClassTable& classes,
                  const FeatureConfig& features, const TrainConfig& train_cfg,
                  const LossConfig& loss_cfg);

/// Pure inference; postprocess applies argmax_labels then
/// largest_foreground_component.
Prediction predict(const LinearSoftmaxModel& model, const std::map<Phase, ImageGrid>& images,
                   bool postprocess);

/// Model JSON round-trips bit-exactly (doubles serialized losslessly).
void save_model(const LinearSoftmaxModel& model, const std::filesystem::path& path);
LinearSoftmaxModel load_model(const std::filesystem::path& path);
std::string model_to_json(const LinearSoftmaxModel& model);
LinearSoftmaxModel model_from_json(const std::string& text);

/// FNV-1a over the weight bytes; used for provenance audits.
std::uint64_t weight_hash(const LinearSoftmaxModel& model);

}  // namespace selfseg
