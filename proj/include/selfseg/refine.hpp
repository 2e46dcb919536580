#pragma once

#include <cstdint>
#include <map>

#include "selfseg/grid.hpp"

namespace selfseg {

struct RefineStats {
  /// Vessel class id (TA6) -> number of pancreas voxels masked to background.
  std::map<std::uint8_t, std::size_t> masked_by_class;

  std::size_t total_masked() const;
};

struct RefineResult {
  LabelMap refined;  // SEG3
  RefineStats stats;
};

/// Teaching-assistant masking: voxels labelled pancreas in `pseudo` whose TA
/// prediction is a vessel class become background. Tumor voxels are never
/// modified. Monotone (pancreas only shrinks) and idempotent.
RefineResult refine_pseudo(const LabelMap& pseudo, const LabelMap& ta_pred);

}  // namespace selfseg
