#pragma once

#include <set>

#include "selfseg/grid.hpp"

namespace selfseg {

enum class ResampleMode { linear, nearest };

/// Resamples a grid to a new physical spacing. Output dims are
/// round(dim * spacing / target) with a minimum of 1 per axis. Sampling is in
/// voxel-center coordinates; linear mode is trilinear interpolation with
/// clamping to border voxel centers, nearest mode looks up the closest voxel
/// center. Throws std::invalid_argument on non-positive target spacing.
ImageGrid resample_to_spacing(const ImageGrid& grid, const Spacing& target, ResampleMode mode);
ByteGrid resample_to_spacing(const ByteGrid& grid, const Spacing& target, ResampleMode mode);

/// Labels connected foreground regions. A voxel is foreground when its class id
/// is in foreground_classes. Component ids start at 1 and are assigned in
/// first-encounter order of an x-fastest raster scan; 0 marks background.
/// connectivity must be 6 or 26.
ComponentGrid connected_components(const LabelMap& labels,
                                   const std::set<std::uint8_t>& foreground_classes,
                                   int connectivity = 6);

/// Keeps only the largest joint-foreground (any class id > 0) 6-connected
/// component; everything else becomes background. Size ties keep the component
/// with the smaller id, i.e. the one encountered first in raster order.
LabelMap largest_foreground_component(const LabelMap& labels);

/// Hardens a probability map: each voxel takes the class of its maximal
/// channel, ties broken toward the lowest class id.
LabelMap argmax_labels(const ProbMap& probs);

}  // namespace selfseg
