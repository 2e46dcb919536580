#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace selfseg {

using Dims = std::array<int, 3>;        // (nx, ny, nz)
using Spacing = std::array<double, 3>;  // millimetres per voxel along (x, y, z)

inline std::size_t voxel_count(const Dims& d) {
  return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) *
         static_cast<std::size_t>(d[2]);
}

// Physical position of a voxel center along one axis.
inline double voxel_center_mm(int i, double spacing) { return (i + 0.5) * spacing; }

/// Dense 3D scalar field with physical spacing. Storage is a flat array in
/// x-fastest raster order: index(x, y, z) = x + nx * (y + ny * z).
template <typename T>
class VoxelGrid {
public:
  VoxelGrid() = default;

  VoxelGrid(Dims dims, Spacing spacing, T fill = T{})
      : dims_(dims), spacing_(spacing), data_(checked_size(dims, spacing), fill) {}

  VoxelGrid(Dims dims, Spacing spacing, std::vector<T> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    if (data_.size() != checked_size(dims, spacing))
      throw std::invalid_argument("VoxelGrid: data length does not match dims");
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  int nx() const { return dims_[0]; }
  int ny() const { return dims_[1]; }
  int nz() const { return dims_[2]; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(z));
  }

  T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }

  T& flat(std::size_t i) { return data_[i]; }
  const T& flat(std::size_t i) const { return data_[i]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  template <typename U>
  bool same_shape(const VoxelGrid<U>& o) const {
    return dims_ == o.dims();
  }
  template <typename U>
  bool same_geometry(const VoxelGrid<U>& o) const {
    return dims_ == o.dims() && spacing_ == o.spacing();
  }

  /// Full invariant check: positive dims/spacing, matching length, finite floats.
  void validate() const {
    checked_size(dims_, spacing_);
    if (data_.size() != voxel_count(dims_))
      throw std::invalid_argument("VoxelGrid: data length does not match dims");
    if constexpr (std::is_floating_point_v<T>) {
      for (const T& v : data_)
        if (!std::isfinite(v))
          throw std::invalid_argument("VoxelGrid: non-finite value in float data");
    }
  }

private:
  static std::size_t checked_size(const Dims& d, const Spacing& s) {
    for (int i = 0; i < 3; ++i) {
      if (d[i] <= 0) throw std::invalid_argument("VoxelGrid: dims must be positive");
      if (!(s[i] > 0.0) || !std::isfinite(s[i]))
        throw std::invalid_argument("VoxelGrid: spacing must be positive");
    }
    return voxel_count(d);
  }

  Dims dims_{1, 1, 1};
  Spacing spacing_{1.0, 1.0, 1.0};
  std::vector<T> data_;
};

using ImageGrid = VoxelGrid<float>;
using ByteGrid = VoxelGrid<std::uint8_t>;
using ComponentGrid = VoxelGrid<std::uint32_t>;

/// Ordered class-id table. Ids are contiguous from 0 and id 0 is always
/// "background"; names are unique.
class ClassTable {
public:
  ClassTable() : names_{"background"} {}
  explicit ClassTable(std::vector<std::string> names);

  static const ClassTable& seg3();  // background, pancreas, tumor
  static const ClassTable& ta6();   // background, pancreas + four vessel classes

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::uint8_t id) const;
  int id_of(const std::string& name) const;  // -1 when absent
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const ClassTable& o) const { return names_ == o.names_; }
  bool operator!=(const ClassTable& o) const { return !(*this == o); }

  // Fixed ids shared by SEG3 and TA6.
  static constexpr std::uint8_t kBackground = 0;
  static constexpr std::uint8_t kPancreas = 1;
  static constexpr std::uint8_t kTumor = 2;  // SEG3 only
  // TA6 vessel ids.
  static constexpr std::uint8_t kPortalSplenicVein = 2;
  static constexpr std::uint8_t kSmv = 3;
  static constexpr std::uint8_t kSma = 4;
  static constexpr std::uint8_t kTruncusCoeliacus = 5;

private:
  std::vector<std::string> names_;
};

/// Hard per-voxel class assignment over a class table.
struct LabelMap {
  ByteGrid grid;
  ClassTable classes;

  void validate() const;
};

/// Per-voxel class distribution: one float channel per class, identical geometry.
struct ProbMap {
  std::vector<ImageGrid> channels;
  ClassTable classes;

  std::size_t num_classes() const { return channels.size(); }
  const Dims& dims() const { return channels.at(0).dims(); }
  std::size_t voxels() const { return channels.at(0).size(); }

  void validate(double tol = 1e-5) const;
};

enum class Phase { non_contrast, pancreatic, venous };

inline constexpr std::array<Phase, 3> kAllPhases = {Phase::non_contrast, Phase::pancreatic,
                                                    Phase::venous};

const std::string& phase_name(Phase p);
Phase parse_phase(const std::string& name);  // throws std::invalid_argument

}  // namespace selfseg
