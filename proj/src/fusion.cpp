#include "selfseg/fusion.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "selfseg/errors.hpp"
#include "selfseg/threads.hpp"
#include "selfseg/volume_ops.hpp"

namespace selfseg {

namespace {

/// Number of leading slices (in scan order) forming the head region.
int head_prefix_len(const LabelMap& foreground, const FusionConfig& cfg) {
  const ByteGrid& g = foreground.grid;
  const int n = g.dims()[cfg.axis];
  std::vector<std::size_t> counts(n, 0);
  std::size_t total = 0;
  for (int z = 0; z < g.nz(); ++z) {
    for (int y = 0; y < g.ny(); ++y) {
      for (int x = 0; x < g.nx(); ++x) {
        if (g(x, y, z) == 0) continue;
        const int coord[3] = {x, y, z};
        ++counts[coord[cfg.axis]];
        ++total;
      }
    }
  }
  if (total == 0) return 0;
  // Tiny slack so exact-integer thresholds are not missed to rounding.
  const double threshold = cfg.head_fraction * static_cast<double>(total) -
                           1e-9 * static_cast<double>(total);
  std::size_t cum = 0;
  for (int i = 0; i < n; ++i) {
    const int slice = cfg.direction == SliceDirection::ascending ? i : n - 1 - i;
    cum += counts[slice];
    if (static_cast<double>(cum) >= threshold) return i + 1;
  }
  return n;
}

inline float blend(float a, float b, double w, double cw) {
  if (w == 1.0) return a;
  if (w == 0.0) return b;
  double v = w * static_cast<double>(a) + cw * static_cast<double>(b);
  v = std::clamp(v, static_cast<double>(std::min(a, b)), static_cast<double>(std::max(a, b)));
  return static_cast<float>(v);
}

}  // namespace

const std::string& direction_name(SliceDirection d) {
  static const std::string names[] = {"ascending", "descending"};
  return names[static_cast<int>(d)];
}

SliceDirection parse_direction(const std::string& name) {
  if (name == "ascending") return SliceDirection::ascending;
  if (name == "descending") return SliceDirection::descending;
  throw std::invalid_argument("unknown slice direction '" + name + "'");
}

void FusionConfig::validate() const {
  if (!(omega0 >= 0.0 && omega0 <= 1.0)) throw ConfigError("omega0 must be in [0, 1]");
  if (!(omega1 >= 0.0 && omega1 <= 1.0)) throw ConfigError("omega1 must be in [0, 1]");
  if (!(head_fraction > 0.0 && head_fraction < 1.0))
    throw ConfigError("head_fraction must be in (0, 1)");
  if (axis < 0 || axis > 2) throw ConfigError("axis must be 0, 1 or 2");
}

ByteGrid head_region_mask(const LabelMap& foreground, const FusionConfig& cfg) {
  cfg.validate();
  const ByteGrid& g = foreground.grid;
  ByteGrid mask(g.dims(), g.spacing(), 0);
  const int prefix = head_prefix_len(foreground, cfg);
  if (prefix == 0) return mask;
  const int n = g.dims()[cfg.axis];
  const int lo = cfg.direction == SliceDirection::ascending ? 0 : n - prefix;
  const int hi = cfg.direction == SliceDirection::ascending ? prefix - 1 : n - 1;
  for (int z = 0; z < g.nz(); ++z) {
    for (int y = 0; y < g.ny(); ++y) {
      for (int x = 0; x < g.nx(); ++x) {
        const int coord[3] = {x, y, z};
        const int s = coord[cfg.axis];
        if (s >= lo && s <= hi) mask(x, y, z) = 1;
      }
    }
  }
  return mask;
}

ProbMap fuse_probabilities(const ProbMap& pa, const ProbMap& pb, const ByteGrid& head,
                           const FusionConfig& cfg) {
  cfg.validate();
  if (pa.classes != pb.classes)
    throw std::invalid_argument("fuse_probabilities: class tables differ");
  if (pa.num_classes() != pb.num_classes() || pa.num_classes() == 0)
    throw std::invalid_argument("fuse_probabilities: channel counts differ");
  for (std::size_t c = 0; c < pa.num_classes(); ++c)
    if (!pa.channels[c].same_geometry(pb.channels[c]))
      throw std::invalid_argument("fuse_probabilities: geometry mismatch");
  if (!head.same_shape(pa.channels[0]))
    throw std::invalid_argument("fuse_probabilities: head mask shape mismatch");

  const double w_head = cfg.omega0, cw_head = 1.0 - cfg.omega0;
  const double w_out = 1.0 - cfg.omega1, cw_out = cfg.omega1;

  ProbMap out;
  out.classes = pa.classes;
  for (std::size_t c = 0; c < pa.num_classes(); ++c)
    out.channels.emplace_back(pa.channels[c].dims(), pa.channels[c].spacing());

  const std::size_t n_vox = pa.voxels();
  parallel_for(n_vox, 0, [&](std::size_t v) {
    const bool in_head = head.flat(v) != 0;
    const double w = in_head ? w_head : w_out;
    const double cw = in_head ? cw_head : cw_out;
    for (std::size_t c = 0; c < out.num_classes(); ++c)
      out.channels[c].flat(v) = blend(pa.channels[c].flat(v), pb.channels[c].flat(v), w, cw);
  });
  return out;
}

PseudoLabelResult make_pseudo_labels(const ProbMap& pa, const ProbMap& pb,
                                     const FusionConfig& cfg) {
  cfg.validate();
  // Teacher-symmetric region extent: argmax of the equal-weight mean.
  ProbMap mean;
  mean.classes = pa.classes;
  for (std::size_t c = 0; c < pa.num_classes(); ++c)
    mean.channels.emplace_back(pa.channels[c].dims(), pa.channels[c].spacing());
  if (pa.num_classes() != pb.num_classes())
    throw std::invalid_argument("make_pseudo_labels: channel counts differ");
  for (std::size_t c = 0; c < pa.num_classes(); ++c) {
    if (!pa.channels[c].same_geometry(pb.channels[c]))
      throw std::invalid_argument("make_pseudo_labels: geometry mismatch");
    const std::size_t n_vox = pa.channels[c].size();
    for (std::size_t v = 0; v < n_vox; ++v)
      mean.channels[c].flat(v) = static_cast<float>(
          0.5 * (static_cast<double>(pa.channels[c].flat(v)) + pb.channels[c].flat(v)));
  }
  const LabelMap region_fg = argmax_labels(mean);

  PseudoLabelResult res;
  res.head = head_region_mask(region_fg, cfg);
  const ProbMap fused = fuse_probabilities(pa, pb, res.head, cfg);
  res.pseudo = largest_foreground_component(argmax_labels(fused));

  const int prefix = head_prefix_len(region_fg, cfg);
  const int n = region_fg.grid.dims()[cfg.axis];
  if (prefix == 0) {
    res.diagnostics.head_start = -1;
    res.diagnostics.head_end = -1;
  } else if (cfg.direction == SliceDirection::ascending) {
    res.diagnostics.head_start = 0;
    res.diagnostics.head_end = prefix - 1;
  } else {
    res.diagnostics.head_start = n - prefix;
    res.diagnostics.head_end = n - 1;
  }
  for (std::size_t v = 0; v < res.pseudo.grid.size(); ++v)
    ++res.diagnostics.class_voxels[res.pseudo.grid.flat(v)];
  res.diagnostics.omega0 = cfg.omega0;
  res.diagnostics.omega1 = cfg.omega1;
  return res;
}

}  // namespace selfseg
