#include "selfseg/volume_ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace selfseg {

namespace {

Dims resampled_dims(const Dims& dims, const Spacing& in, const Spacing& out) {
  Dims nd{};
  for (int a = 0; a < 3; ++a) {
    if (!(out[a] > 0.0) || !std::isfinite(out[a]))
      throw std::invalid_argument("resample_to_spacing: target spacing must be positive");
    nd[a] = std::max<int>(1, static_cast<int>(std::llround(dims[a] * in[a] / out[a])));
  }
  return nd;
}

// Continuous input voxel coordinate of an output voxel center, clamped to the
// border voxel centers.
inline double source_coord(int i, double out_sp, double in_sp, int n) {
  const double u = (i + 0.5) * out_sp / in_sp - 0.5;
  return std::clamp(u, 0.0, static_cast<double>(n - 1));
}

template <typename T>
VoxelGrid<T> resample_impl(const VoxelGrid<T>& grid, const Spacing& target, ResampleMode mode) {
  grid.validate();
  const Dims out_dims = resampled_dims(grid.dims(), grid.spacing(), target);
  VoxelGrid<T> out(out_dims, target);

  const Dims& id = grid.dims();
  std::vector<double> ux(out_dims[0]), uy(out_dims[1]), uz(out_dims[2]);
  for (int x = 0; x < out_dims[0]; ++x)
    ux[x] = source_coord(x, target[0], grid.spacing()[0], id[0]);
  for (int y = 0; y < out_dims[1]; ++y)
    uy[y] = source_coord(y, target[1], grid.spacing()[1], id[1]);
  for (int z = 0; z < out_dims[2]; ++z)
    uz[z] = source_coord(z, target[2], grid.spacing()[2], id[2]);

  std::size_t o = 0;
  for (int z = 0; z < out_dims[2]; ++z) {
    for (int y = 0; y < out_dims[1]; ++y) {
      for (int x = 0; x < out_dims[0]; ++x, ++o) {
        if (mode == ResampleMode::nearest) {
          const int sx = static_cast<int>(std::floor(ux[x] + 0.5));
          const int sy = static_cast<int>(std::floor(uy[y] + 0.5));
          const int sz = static_cast<int>(std::floor(uz[z] + 0.5));
          out.data()[o] = grid(std::clamp(sx, 0, id[0] - 1), std::clamp(sy, 0, id[1] - 1),
                               std::clamp(sz, 0, id[2] - 1));
        } else {
          const double fx = ux[x], fy = uy[y], fz = uz[z];
          const int x0 = static_cast<int>(std::floor(fx));
          const int y0 = static_cast<int>(std::floor(fy));
          const int z0 = static_cast<int>(std::floor(fz));
          const int x1 = std::min(x0 + 1, id[0] - 1);
          const int y1 = std::min(y0 + 1, id[1] - 1);
          const int z1 = std::min(z0 + 1, id[2] - 1);
          const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
          const double c000 = grid(x0, y0, z0), c100 = grid(x1, y0, z0);
          const double c010 = grid(x0, y1, z0), c110 = grid(x1, y1, z0);
          const double c001 = grid(x0, y0, z1), c101 = grid(x1, y0, z1);
          const double c011 = grid(x0, y1, z1), c111 = grid(x1, y1, z1);
          const double c00 = c000 + tx * (c100 - c000);
          const double c10 = c010 + tx * (c110 - c010);
          const double c01 = c001 + tx * (c101 - c001);
          const double c11 = c011 + tx * (c111 - c011);
          const double c0 = c00 + ty * (c10 - c00);
          const double c1 = c01 + ty * (c11 - c01);
          out.data()[o] = static_cast<T>(c0 + tz * (c1 - c0));
        }
      }
    }
  }
  return out;
}

constexpr int kOffsets6[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                 {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};

}  // namespace

ImageGrid resample_to_spacing(const ImageGrid& grid, const Spacing& target, ResampleMode mode) {
  return resample_impl(grid, target, mode);
}

ByteGrid resample_to_spacing(const ByteGrid& grid, const Spacing& target, ResampleMode mode) {
  return resample_impl(grid, target, mode);
}

ComponentGrid connected_components(const LabelMap& labels,
                                   const std::set<std::uint8_t>& foreground_classes,
                                   int connectivity) {
  if (connectivity != 6 && connectivity != 26)
    throw std::invalid_argument("connected_components: connectivity must be 6 or 26");

  const ByteGrid& g = labels.grid;
  const Dims& d = g.dims();
  ComponentGrid comp(d, g.spacing(), 0u);

  std::vector<std::array<int, 3>> offsets;
  if (connectivity == 6) {
    for (const auto& o : kOffsets6) offsets.push_back({o[0], o[1], o[2]});
  } else {
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx || dy || dz) offsets.push_back({dx, dy, dz});
  }

  std::vector<bool> fg(256, false);
  for (std::uint8_t c : foreground_classes) fg[c] = true;

  std::uint32_t next_id = 0;
  std::vector<std::size_t> stack;
  std::size_t idx = 0;
  for (int z = 0; z < d[2]; ++z) {
    for (int y = 0; y < d[1]; ++y) {
      for (int x = 0; x < d[0]; ++x, ++idx) {
        if (!fg[g.data()[idx]] || comp.data()[idx] != 0) continue;
        // flood fill from the first-encountered seed of a new component
        comp.data()[idx] = ++next_id;
        stack.assign(1, idx);
        while (!stack.empty()) {
          const std::size_t cur = stack.back();
          stack.pop_back();
          const int cx = static_cast<int>(cur % d[0]);
          const int cy = static_cast<int>((cur / d[0]) % d[1]);
          const int cz = static_cast<int>(cur / (static_cast<std::size_t>(d[0]) * d[1]));
          for (const auto& o : offsets) {
            const int nx = cx + o[0], ny = cy + o[1], nz = cz + o[2];
            if (nx < 0 || ny < 0 || nz < 0 || nx >= d[0] || ny >= d[1] || nz >= d[2]) continue;
            const std::size_t n = g.index(nx, ny, nz);
            if (fg[g.data()[n]] && comp.data()[n] == 0) {
              comp.data()[n] = next_id;
              stack.push_back(n);
            }
          }
        }
      }
    }
  }
  return comp;
}

LabelMap largest_foreground_component(const LabelMap& labels) {
  labels.validate();
  std::set<std::uint8_t> fg;
  for (std::size_t c = 1; c < labels.classes.size(); ++c)
    fg.insert(static_cast<std::uint8_t>(c));

  const ComponentGrid comp = connected_components(labels, fg, 6);
  std::uint32_t max_id = 0;
  for (std::uint32_t c : comp.data()) max_id = std::max(max_id, c);
  if (max_id == 0) return labels;

  std::vector<std::size_t> sizes(max_id + 1, 0);
  for (std::uint32_t c : comp.data()) ++sizes[c];
  std::uint32_t keep = 1;
  for (std::uint32_t c = 2; c <= max_id; ++c)
    if (sizes[c] > sizes[keep]) keep = c;  // strict: ties keep the smaller id

  LabelMap out = labels;
  for (std::size_t v = 0; v < comp.size(); ++v)
    if (comp.data()[v] != 0 && comp.data()[v] != keep) out.grid.data()[v] = 0;
  return out;
}

LabelMap argmax_labels(const ProbMap& probs) {
  probs.validate();
  const std::size_t n = probs.voxels();
  const std::size_t nc = probs.num_classes();
  LabelMap out{ByteGrid(probs.channels[0].dims(), probs.channels[0].spacing(), 0u),
               probs.classes};
  for (std::size_t v = 0; v < n; ++v) {
    std::uint8_t best = 0;
    float best_p = probs.channels[0].data()[v];
    for (std::size_t c = 1; c < nc; ++c) {
      const float p = probs.channels[c].data()[v];
      if (p > best_p) {  // strict: ties keep the lowest class id
        best_p = p;
        best = static_cast<std::uint8_t>(c);
      }
    }
    out.grid.data()[v] = best;
  }
  return out;
}

}  // namespace selfseg
