#pragma once

#include <filesystem>
#include <optional>
#include <variant>

#include "selfseg/grid.hpp"

namespace selfseg {

/// One volume loaded from disk. `grid` holds the payload in its native dtype;
/// `classes` is present when the sidecar carried a class table.
struct Rvol {
  std::variant<ImageGrid, ByteGrid> grid;
  std::optional<ClassTable> classes;
};

/// rvol on-disk format: `<name>.rvol` is the raw little-endian payload in
/// x-fastest order; `<name>.json` is a sidecar with dims, spacing, dtype
/// ("f32"|"u8"), order, endian and an optional class table. Round-trips are
/// bit-exact.
void write_rvol(const std::filesystem::path& rvol_path, const ImageGrid& grid,
                const ClassTable* classes = nullptr);
void write_rvol(const std::filesystem::path& rvol_path, const LabelMap& labels);

Rvol read_rvol(const std::filesystem::path& rvol_path);
ImageGrid read_rvol_image(const std::filesystem::path& rvol_path);
LabelMap read_rvol_labels(const std::filesystem::path& rvol_path);

}  // namespace selfseg
