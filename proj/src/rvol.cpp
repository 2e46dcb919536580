#include "selfseg/rvol.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "rvol i/o assumes a little-endian host");

namespace selfseg {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

fs::path sidecar_path(const fs::path& rvol_path) {
  fs::path p = rvol_path;
  p.replace_extension(".json");
  return p;
}

ordered_json class_table_json(const ClassTable& t) {
  ordered_json arr = ordered_json::array();
  for (std::size_t i = 0; i < t.size(); ++i)
    arr.push_back({{"id", i}, {"name", t.name(static_cast<std::uint8_t>(i))}});
  return arr;
}

ClassTable class_table_from_json(const ordered_json& arr) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& e = arr.at(i);
    if (e.at("id").get<std::size_t>() != i)
      throw DatasetError("rvol sidecar: class ids must be contiguous from 0");
    names.push_back(e.at("name").get<std::string>());
  }
  return ClassTable(names);
}

void write_payload(const fs::path& path, const void* bytes, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!out) throw DatasetError("failed writing '" + path.string() + "'");
}

template <typename T>
void write_impl(const fs::path& rvol_path, const VoxelGrid<T>& grid, const char* dtype,
                const ClassTable* classes) {
  grid.validate();
  write_payload(rvol_path, grid.data().data(), grid.size() * sizeof(T));

  ordered_json side;
  side["dims"] = grid.dims();
  side["spacing_mm"] = grid.spacing();
  side["dtype"] = dtype;
  side["order"] = "x-fastest";
  side["endian"] = "little";
  if (classes) side["classes"] = class_table_json(*classes);

  std::ofstream out(sidecar_path(rvol_path), std::ios::trunc);
  if (!out) throw DatasetError("cannot open sidecar for '" + rvol_path.string() + "'");
  out << side.dump(2) << "\n";
}

std::vector<char> read_payload(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DatasetError("cannot open '" + path.string() + "'");
  const std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<char> bytes(static_cast<std::size_t>(n));
  in.read(bytes.data(), n);
  if (!in) throw DatasetError("failed reading '" + path.string() + "'");
  return bytes;
}

}  // namespace

void write_rvol(const fs::path& rvol_path, const ImageGrid& grid, const ClassTable* classes) {
  write_impl(rvol_path, grid, "f32", classes);
}

void write_rvol(const fs::path& rvol_path, const LabelMap& labels) {
  labels.validate();
  write_impl(rvol_path, labels.grid, "u8", &labels.classes);
}

Rvol read_rvol(const fs::path& rvol_path) {
  const fs::path side_path = sidecar_path(rvol_path);
  std::ifstream side_in(side_path);
  if (!side_in) throw DatasetError("missing sidecar '" + side_path.string() + "'");
  ordered_json side;
  try {
    side = ordered_json::parse(side_in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError("bad sidecar '" + side_path.string() + "': " + e.what());
  }

  const auto dims = side.at("dims").get<Dims>();
  const auto spacing = side.at("spacing_mm").get<Spacing>();
  const auto dtype = side.at("dtype").get<std::string>();
  if (side.at("order").get<std::string>() != "x-fastest")
    throw DatasetError("rvol sidecar: unsupported order");
  if (side.at("endian").get<std::string>() != "little")
    throw DatasetError("rvol sidecar: unsupported endianness");

  const std::vector<char> bytes = read_payload(rvol_path);
  const std::size_t n = voxel_count(dims);

  Rvol out;
  if (side.contains("classes")) out.classes = class_table_from_json(side.at("classes"));

  if (dtype == "f32") {
    if (bytes.size() != n * sizeof(float))
      throw DatasetError("rvol payload size mismatch in '" + rvol_path.string() + "'");
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data(), bytes.size());
    out.grid = ImageGrid(dims, spacing, std::move(data));
    std::get<ImageGrid>(out.grid).validate();
  } else if (dtype == "u8") {
    if (bytes.size() != n)
      throw DatasetError("rvol payload size mismatch in '" + rvol_path.string() + "'");
    std::vector<std::uint8_t> data(n);
    std::memcpy(data.data(), bytes.data(), bytes.size());
    out.grid = ByteGrid(dims, spacing, std::move(data));
  } else {
    throw DatasetError("rvol sidecar: unknown dtype '" + dtype + "'");
  }
  return out;
}

ImageGrid read_rvol_image(const fs::path& rvol_path) {
  Rvol r = read_rvol(rvol_path);
  if (!std::holds_alternative<ImageGrid>(r.grid))
    throw DatasetError("'" + rvol_path.string() + "' is not a float volume");
  return std::get<ImageGrid>(std::move(r.grid));
}

LabelMap read_rvol_labels(const fs::path& rvol_path) {
  Rvol r = read_rvol(rvol_path);
  if (!std::holds_alternative<ByteGrid>(r.grid))
    throw DatasetError("'" + rvol_path.string() + "' is not a label volume");
  if (!r.classes)
    throw DatasetError("'" + rvol_path.string() + "' has no class table in its sidecar");
  LabelMap labels{std::get<ByteGrid>(std::move(r.grid)), *r.classes};
  labels.validate();
  return labels;
}

}  // namespace selfseg
