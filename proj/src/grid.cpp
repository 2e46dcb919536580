#include "selfseg/grid.hpp"

#include <algorithm>

namespace selfseg {

ClassTable::ClassTable(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty() || names_[0] != "background")
    throw std::invalid_argument("ClassTable: id 0 must be named 'background'");
  if (names_.size() > 256) throw std::invalid_argument("ClassTable: at most 256 classes");
  for (std::size_t i = 0; i < names_.size(); ++i)
    for (std::size_t j = i + 1; j < names_.size(); ++j)
      if (names_[i] == names_[j])
        throw std::invalid_argument("ClassTable: duplicate class name '" + names_[i] + "'");
}

const ClassTable& ClassTable::seg3() {
  static const ClassTable t({"background", "pancreas", "tumor"});
  return t;
}

const ClassTable& ClassTable::ta6() {
  static const ClassTable t(
      {"background", "pancreas", "portal_splenic_vein", "smv", "sma", "truncus_coeliacus"});
  return t;
}

const std::string& ClassTable::name(std::uint8_t id) const {
  if (id >= names_.size()) throw std::invalid_argument("ClassTable: unknown class id");
  return names_[id];
}

int ClassTable::id_of(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  return it == names_.end() ? -1 : static_cast<int>(it - names_.begin());
}

void LabelMap::validate() const {
  grid.validate();
  const auto n = classes.size();
  for (std::uint8_t v : grid.data())
    if (v >= n) throw std::invalid_argument("LabelMap: voxel value is not a valid class id");
}

void ProbMap::validate(double tol) const {
  if (channels.size() != classes.size())
    throw std::invalid_argument("ProbMap: one channel per class required");
  if (channels.empty()) throw std::invalid_argument("ProbMap: empty");
  for (const auto& c : channels) {
    c.validate();
    if (!c.same_geometry(channels[0]))
      throw std::invalid_argument("ProbMap: channels must share dims and spacing");
  }
  const std::size_t n = channels[0].size();
  for (std::size_t v = 0; v < n; ++v) {
    double sum = 0.0;
    for (const auto& c : channels) {
      const float p = c.data()[v];
      if (p < 0.0f || p > 1.0f)
        throw std::invalid_argument("ProbMap: channel value outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol)
      throw std::invalid_argument("ProbMap: voxel distribution does not sum to 1");
  }
}

const std::string& phase_name(Phase p) {
  static const std::string names[3] = {"non_contrast", "pancreatic", "venous"};
  return names[static_cast<int>(p)];
}

Phase parse_phase(const std::string& name) {
  for (Phase p : kAllPhases)
    if (phase_name(p) == name) return p;
  throw std::invalid_argument("unknown phase '" + name + "'");
}

}  // namespace selfseg
