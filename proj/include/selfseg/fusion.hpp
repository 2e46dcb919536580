#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "selfseg/grid.hpp"

namespace selfseg {

enum class SliceDirection { ascending, descending };

const std::string& direction_name(SliceDirection d);
SliceDirection parse_direction(const std::string& name);  // throws std::invalid_argument

/// Region-dependent convex combination of two teachers' probability maps.
/// omega0 weights teacher A inside the head region; omega1 weights teacher B
/// outside it.
struct FusionConfig {
  double omega0 = 0.8;
  double omega1 = 0.6;
  double head_fraction = 0.6;
  int axis = 0;  // sagittal
  SliceDirection direction = SliceDirection::ascending;

  void validate() const;
};

/// Smallest prefix of slices along cfg.axis (scanned in cfg.direction) whose
/// cumulative foreground voxel count reaches head_fraction of the total;
/// whole slices are included. Empty foreground gives an empty mask.
ByteGrid head_region_mask(const LabelMap& foreground, const FusionConfig& cfg);

/// Per voxel: head ? omega0*pA + (1-omega0)*pB : (1-omega1)*pA + omega1*pB.
ProbMap fuse_probabilities(const ProbMap& pa, const ProbMap& pb, const ByteGrid& head,
                           const FusionConfig& cfg);

struct FusionDiagnostics {
  int head_start = -1;  // inclusive slice range; [-1,-1] when empty
  int head_end = -1;
  std::map<std::uint8_t, std::size_t> class_voxels;  // of the pseudo label map
  double omega0 = 0.0;
  double omega1 = 0.0;
};

struct PseudoLabelResult {
  LabelMap pseudo;
  ByteGrid head;
  FusionDiagnostics diagnostics;
};

/// Full pseudo-annotation step: teacher-symmetric head region (argmax of the
/// equal-weight mean), weighted fusion, argmax hardening, largest-component
/// filtering.
PseudoLabelResult make_pseudo_labels(const ProbMap& pa, const ProbMap& pb,
                                     const FusionConfig& cfg);

}  // namespace selfseg
