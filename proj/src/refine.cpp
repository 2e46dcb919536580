#include "selfseg/refine.hpp"

#include <stdexcept>

namespace selfseg {

std::size_t RefineStats::total_masked() const {
  std::size_t n = 0;
  for (const auto& [cls, count] : masked_by_class) n += count;
  return n;
}

RefineResult refine_pseudo(const LabelMap& pseudo, const LabelMap& ta_pred) {
  if (!pseudo.grid.same_shape(ta_pred.grid))
    throw std::invalid_argument("refine_pseudo: dims mismatch");
  if (ta_pred.classes.size() < 3)
    throw std::invalid_argument("refine_pseudo: TA prediction lacks vessel classes");

  RefineResult res;
  res.refined = pseudo;
  for (std::size_t v = 0; v < pseudo.grid.size(); ++v) {
    if (pseudo.grid.flat(v) != ClassTable::kPancreas) continue;
    const std::uint8_t t = ta_pred.grid.flat(v);
    if (t >= ClassTable::kPortalSplenicVein) {  // any of the four vessel ids
      res.refined.grid.flat(v) = ClassTable::kBackground;
      ++res.stats.masked_by_class[t];
    }
  }
  return res;
}

}  // namespace selfseg
