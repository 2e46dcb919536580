#include "selfseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json_util.hpp"
#include "selfseg/errors.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/rvol.hpp"
#include "selfseg/volume_ops.hpp"

namespace selfseg {

namespace {

using detail::get_or;
using detail::get_req;
using detail::ordered_json;
using detail::require_keys;

// Structure bits in the rasterization mask.
constexpr std::uint8_t kBitPancreas = 1;
constexpr std::uint8_t kBitDuct = 2;
constexpr std::uint8_t kBitTumor = 4;
constexpr std::uint8_t kBitPsv = 8;
constexpr std::uint8_t kBitSmv = 16;
constexpr std::uint8_t kBitSma = 32;
constexpr std::uint8_t kBitTc = 64;
constexpr std::uint8_t kBitAnyVessel = kBitPsv | kBitSmv | kBitSma | kBitTc;

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct Raster {
  Dims dims;
  Spacing sp;
  std::vector<std::uint8_t> bits;

  Raster(Dims d, Spacing s) : dims(d), sp(s), bits(voxel_count(d), 0) {}

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
  }

  template <typename Fn>
  void for_ball(const Vec3& c, double r_max, Fn&& fn) {
    const int x0 = std::max(0, (int)std::floor((c.x - r_max) / sp[0] - 0.5));
    const int x1 = std::min(dims[0] - 1, (int)std::ceil((c.x + r_max) / sp[0] - 0.5));
    const int y0 = std::max(0, (int)std::floor((c.y - r_max) / sp[1] - 0.5));
    const int y1 = std::min(dims[1] - 1, (int)std::ceil((c.y + r_max) / sp[1] - 0.5));
    const int z0 = std::max(0, (int)std::floor((c.z - r_max) / sp[2] - 0.5));
    const int z1 = std::min(dims[2] - 1, (int)std::ceil((c.z + r_max) / sp[2] - 0.5));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const Vec3 d{voxel_center_mm(x, sp[0]) - c.x, voxel_center_mm(y, sp[1]) - c.y,
                       voxel_center_mm(z, sp[2]) - c.z};
          fn(x, y, z, d);
        }
  }

  void stamp_sphere(std::uint8_t bit, const Vec3& c, double r) {
    for_ball(c, r, [&](int x, int y, int z, const Vec3& d) {
      if (d.x * d.x + d.y * d.y + d.z * d.z <= r * r) bits[index(x, y, z)] |= bit;
    });
  }
};

struct Centerline {
  double x0, length, cy, cz, bend, tilt, r_head, r_tail, taper_pow, r_scale;

  Vec3 at(double t) const {
    return {x0 + t * length, cy + bend * std::sin(3.14159265358979323846 * t),
            cz + tilt * (t - 0.5)};
  }
  double radius(double t) const {
    return r_scale * (r_tail + (r_head - r_tail) * std::pow(1.0 - t, taper_pow));
  }
};

void stamp_polyline(Raster& r, std::uint8_t bit, const std::vector<Vec3>& pts, double radius) {
  // Dense sphere chain; sample step well under the smallest spacing.
  const double step = 0.5 * std::min({r.sp[0], r.sp[1], r.sp[2]});
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Vec3 &a = pts[i], &b = pts[i + 1];
    const double len = std::sqrt((b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y) +
                                 (b.z - a.z) * (b.z - a.z));
    const int n = std::max(1, (int)std::ceil(len / step));
    for (int k = 0; k <= n; ++k) {
      const double t = static_cast<double>(k) / n;
      r.stamp_sphere(bit, {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z)},
                     radius);
    }
  }
}

struct TumorShape {
  Vec3 center;
  double r0 = 0;
  double amp = 0;
  std::array<double, 6> coef{};

  bool contains(const Vec3& d) const {
    const double dist = std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z);
    if (dist < 1e-9) return true;
    const double ux = d.x / dist, uy = d.y / dist, uz = d.z / dist;
    const double s = coef[0] * ux * uy + coef[1] * uy * uz + coef[2] * uz * ux +
                     coef[3] * (ux * ux - uy * uy) + coef[4] * (uy * uy - uz * uz) +
                     coef[5] * ux * uy * uz;
    const double m = std::clamp(1.0 + amp * s, 0.55, 1.45);
    return dist <= r0 * m;
  }
  double bound() const { return r0 * 1.45; }
};

}  // namespace

double EnhancementTable::mean(const std::string& structure, Phase phase) const {
  const auto it = rows.find(structure);
  if (it == rows.end())
    throw ConfigError("enhancement table: missing structure '" + structure + "'");
  return it->second[static_cast<int>(phase)];
}

const std::vector<std::string>& EnhancementTable::structure_names() {
  static const std::vector<std::string> names = {
      "background", "pancreas", "duct",          "tumor", "tumor_hyper",
      "portal_splenic_vein", "smv",  "sma", "truncus_coeliacus"};
  return names;
}

EnhancementTable EnhancementTable::defaults() {
  EnhancementTable t;
  t.rows["background"] = {20, 25, 30};
  t.rows["pancreas"] = {40, 90, 110};
  t.rows["duct"] = {40, 88, 96};
  t.rows["tumor"] = {42, 50, 85};
  t.rows["tumor_hyper"] = {42, 120, 112};
  t.rows["portal_splenic_vein"] = {55, 78, 118};
  t.rows["smv"] = {55, 80, 100};
  t.rows["sma"] = {55, 140, 112};
  t.rows["truncus_coeliacus"] = {55, 135, 108};
  return t;
}

void EnhancementTable::validate() const {
  for (const std::string& name : structure_names())
    if (!rows.count(name))
      throw ConfigError("enhancement table: missing structure '" + name + "'");
  for (const auto& [name, _] : rows) {
    const auto& known = structure_names();
    if (std::find(known.begin(), known.end(), name) == known.end())
      throw ConfigError("enhancement table: unknown structure '" + name + "'");
  }
  const auto& tumor = rows.at("tumor");
  const auto& panc = rows.at("pancreas");
  const double c_nc = std::abs(tumor[0] - panc[0]);
  const double c_p = std::abs(tumor[1] - panc[1]);
  const double c_v = std::abs(tumor[2] - panc[2]);
  if (!(c_p > c_v && c_v > c_nc))
    throw ConfigError(
        "enhancement table: tumor-pancreas contrast must be strictly ordered "
        "pancreatic > venous > non_contrast");
}

void PhantomSpec::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (dims[i] <= 0) throw ConfigError("phantom dims must be positive");
    if (!(spacing_mm[i] > 0.0)) throw ConfigError("phantom spacing must be positive");
    if (noise_sigma[i] < 0.0) throw ConfigError("noise sigma must be >= 0");
  }
  if (!(pancreas.length_mm > 0) || !(pancreas.radius_head_mm > 0) ||
      !(pancreas.radius_tail_mm > 0))
    throw ConfigError("pancreas geometry must have positive length and radii");
  if (pancreas.radius_head_mm < pancreas.radius_tail_mm)
    throw ConfigError("pancreas head radius must be >= tail radius");
  const double x_extent = dims[0] * spacing_mm[0];
  if (pancreas.margin_x_mm + pancreas.center_jitter_mm + pancreas.length_mm +
          pancreas.radius_tail_mm >
      x_extent)
    throw ConfigError("pancreas does not fit the grid along x");
  if (!(duct.radius_mm > 0)) throw ConfigError("duct radius must be > 0");
  if (!(duct.t_start >= 0 && duct.t_start < duct.t_end && duct.t_end <= 1))
    throw ConfigError("duct centerline range must satisfy 0 <= t_start < t_end <= 1");
  if (!(tumor.radius_min_mm > 0) || tumor.radius_max_mm < tumor.radius_min_mm)
    throw ConfigError("tumor radius range invalid");
  if (tumor.irregularity < 0 || tumor.irregularity > 0.6)
    throw ConfigError("tumor irregularity must be in [0, 0.6]");
  if (!(tumor.head_t_max > 0 && tumor.head_t_max <= 1))
    throw ConfigError("tumor head_t_max must be in (0, 1]");
  if (tumor.hyper_fraction_b < 0 || tumor.hyper_fraction_b > 1)
    throw ConfigError("tumor hyper_fraction_b must be in [0, 1]");
  if (tumor.max_retries < 1) throw ConfigError("tumor max_retries must be >= 1");
  if (!(vessels.radius_psv_mm > 0) || !(vessels.radius_smv_mm > 0) ||
      !(vessels.radius_sma_mm > 0) || !(vessels.radius_tc_mm > 0))
    throw ConfigError("vessel radii must be > 0");
  if (calibration.gain < 0 || calibration.gain >= 0.5)
    throw ConfigError("calibration gain must be in [0, 0.5)");
  if (calibration.shift < 0) throw ConfigError("calibration shift must be >= 0");
  enhancement.validate();
}

CaseOptions role_case_options(const PhantomSpec& spec, Role role) {
  CaseOptions opt;
  switch (role) {
    case Role::A:
    case Role::C:
      opt.location = spec.tumor.location;
      break;
    case Role::B:
      opt.location = TumorLocation::anywhere;
      opt.hyper_prob = spec.tumor.hyper_fraction_b;
      break;
    case Role::D:
      opt.with_tumor = false;
      break;
  }
  return opt;
}

PhantomCase generate_case(const PhantomSpec& spec, std::uint64_t case_seed) {
  CaseOptions opt;
  opt.location = spec.tumor.location;
  return generate_case(spec, case_seed, opt);
}

PhantomCase generate_case(const PhantomSpec& spec, std::uint64_t case_seed,
                          const CaseOptions& options) {
  spec.validate();
  const std::uint64_t base = mix_seed(spec.seed, case_seed);
  Rng geom_rng(mix_seed(base, "geom"));
  Rng tumor_rng(mix_seed(base, "tumor"));
  Rng hyper_rng(mix_seed(base, "hyper"));

  Raster raster(spec.dims, spec.spacing_mm);
  const double mid_y = 0.5 * spec.dims[1] * spec.spacing_mm[1];
  const double mid_z = 0.5 * spec.dims[2] * spec.spacing_mm[2];

  // One fixed draw order keeps every stream stable across options.
  const double jx = geom_rng.uniform(0.0, spec.pancreas.center_jitter_mm);
  const double jy = geom_rng.uniform(-spec.pancreas.center_jitter_mm,
                                     spec.pancreas.center_jitter_mm);
  const double jz = geom_rng.uniform(-spec.pancreas.center_jitter_mm,
                                     spec.pancreas.center_jitter_mm);
  const double jr = geom_rng.uniform(-0.06, 0.06);
  const double duct_jz = geom_rng.uniform(-0.5, 0.5);
  double vessel_jit[8];
  for (double& v : vessel_jit) v = geom_rng.uniform(-1.5, 1.5);

  Centerline cl{spec.pancreas.margin_x_mm + jx,
                spec.pancreas.length_mm,
                mid_y + jy,
                mid_z + jz,
                spec.pancreas.bend_mm,
                spec.pancreas.tilt_mm,
                spec.pancreas.radius_head_mm,
                spec.pancreas.radius_tail_mm,
                1.2,
                1.0 + jr};

  // Pancreas body: dense sphere chain with tapering radius.
  {
    const int n = 3 * spec.dims[0];
    for (int i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / n;
      raster.stamp_sphere(kBitPancreas, cl.at(t), cl.radius(t));
    }
  }

  // Duct: thin tube inside the pancreas, offset in z.
  {
    const int n = 2 * spec.dims[0];
    for (int i = 0; i <= n; ++i) {
      const double t =
          spec.duct.t_start + (spec.duct.t_end - spec.duct.t_start) * static_cast<double>(i) / n;
      Vec3 c = cl.at(t);
      c.z += spec.duct.offset_z_mm + duct_jz;
      raster.stamp_sphere(kBitDuct, c, spec.duct.radius_mm);
    }
  }

  // Vessels: portal/splenic vein hugging the posterior boundary along x, SMV
  // crossing the head vertically, SMA vertical behind the body, truncus
  // coeliacus branching away in y.
  {
    std::vector<Vec3> psv;
    const double xa = cl.x0 - 6.0, xb = cl.x0 + 0.9 * cl.length;
    const int n = 64;
    for (int i = 0; i <= n; ++i) {
      const double x = xa + (xb - xa) * i / n;
      const double t = std::clamp((x - cl.x0) / cl.length, 0.0, 1.0);
      const Vec3 c = cl.at(t);
      psv.push_back({x, c.y + 0.75 * cl.radius(t) + 0.3 * vessel_jit[0],
                     c.z + 1.0 + 0.3 * vessel_jit[1]});
    }
    stamp_polyline(raster, kBitPsv, psv, spec.vessels.radius_psv_mm);

    const double t_smv = 0.18;
    const Vec3 c_smv = cl.at(t_smv);
    stamp_polyline(raster, kBitSmv,
                   {{c_smv.x + vessel_jit[2], c_smv.y + 2.0 + vessel_jit[3], cl.cz - 26.0},
                    {c_smv.x + vessel_jit[2], c_smv.y + 2.0 + vessel_jit[3], cl.cz + 26.0}},
                   spec.vessels.radius_smv_mm);

    const double t_sma = 0.34;
    const Vec3 c_sma = cl.at(t_sma);
    const double y_sma = c_sma.y + 0.8 * cl.radius(t_sma) + 1.0 + 0.5 * vessel_jit[4];
    stamp_polyline(raster, kBitSma,
                   {{c_sma.x + vessel_jit[5], y_sma, cl.cz - 28.0},
                    {c_sma.x + vessel_jit[5], y_sma, cl.cz + 18.0}},
                   spec.vessels.radius_sma_mm);

    const double t_tc = 0.42;
    const Vec3 c_tc = cl.at(t_tc);
    stamp_polyline(raster, kBitTc,
                   {{c_tc.x + vessel_jit[6], c_tc.y + 1.0, c_tc.z + 5.0 + 0.4 * vessel_jit[7]},
                    {c_tc.x + vessel_jit[6], c_tc.y + 20.0, c_tc.z + 5.0 + 0.4 * vessel_jit[7]}},
                   spec.vessels.radius_tc_mm);
  }

  // Tumor: irregular blob centered inside the pancreas, never touching a
  // vessel. Bounded retries, then a generation error naming the case seed.
  bool hyper_tumor = false;
  if (options.with_tumor) {
    // The hyper draw happens exactly once regardless of placement retries.
    hyper_tumor = hyper_rng.uniform() < options.hyper_prob;
    const double t_max =
        options.location == TumorLocation::head ? spec.tumor.head_t_max : 0.94;
    bool placed = false;
    for (int attempt = 0; attempt < spec.tumor.max_retries && !placed; ++attempt) {
      TumorShape shape;
      const double t_c = tumor_rng.uniform(0.06, t_max);
      const double r_here = cl.radius(t_c);
      shape.center = cl.at(t_c);
      shape.center.x += tumor_rng.uniform(-1.0, 1.0) * 0.35 * r_here;
      shape.center.y += tumor_rng.uniform(-1.0, 1.0) * 0.35 * r_here;
      shape.center.z += tumor_rng.uniform(-1.0, 1.0) * 0.25 * r_here;
      shape.r0 = tumor_rng.uniform(spec.tumor.radius_min_mm, spec.tumor.radius_max_mm);
      shape.amp = spec.tumor.irregularity;
      for (double& c : shape.coef) c = tumor_rng.uniform(-1.0, 1.0);

      // Center voxel must lie inside the pancreas.
      const int cx = std::clamp((int)std::floor(shape.center.x / spec.spacing_mm[0]), 0,
                                spec.dims[0] - 1);
      const int cy = std::clamp((int)std::floor(shape.center.y / spec.spacing_mm[1]), 0,
                                spec.dims[1] - 1);
      const int cz = std::clamp((int)std::floor(shape.center.z / spec.spacing_mm[2]), 0,
                                spec.dims[2] - 1);
      if (!(raster.bits[raster.index(cx, cy, cz)] & kBitPancreas)) continue;

      std::vector<std::size_t> voxels;
      bool touches_vessel = false;
      raster.for_ball(shape.center, shape.bound(), [&](int x, int y, int z, const Vec3& d) {
        if (!shape.contains(d)) return;
        const std::size_t idx = raster.index(x, y, z);
        if (raster.bits[idx] & kBitAnyVessel) touches_vessel = true;
        voxels.push_back(idx);
      });
      if (touches_vessel || voxels.empty()) continue;
      for (std::size_t idx : voxels) raster.bits[idx] |= kBitTumor;
      placed = true;
    }
    if (!placed)
      throw GenerationError("tumor placement failed for case_seed " +
                            std::to_string(case_seed));
  }

  // Labels. truth_seg: tumor > vessel(->background) > pancreas. truth_ta:
  // tumor(->pancreas) > vessel class > pancreas.
  PhantomCase out;
  out.truth_seg.classes = ClassTable::seg3();
  out.truth_seg.grid = ByteGrid(spec.dims, spec.spacing_mm, 0);
  out.truth_ta.classes = ClassTable::ta6();
  out.truth_ta.grid = ByteGrid(spec.dims, spec.spacing_mm, 0);

  const std::size_t n_vox = voxel_count(spec.dims);
  std::vector<const char*> structure(n_vox, "background");
  for (std::size_t v = 0; v < n_vox; ++v) {
    const std::uint8_t b = raster.bits[v];
    if (b & kBitTumor) {
      out.truth_seg.grid.flat(v) = ClassTable::kTumor;
      out.truth_ta.grid.flat(v) = ClassTable::kPancreas;
      structure[v] = hyper_tumor ? "tumor_hyper" : "tumor";
    } else if (b & kBitAnyVessel) {
      out.truth_seg.grid.flat(v) = ClassTable::kBackground;
      if (b & kBitPsv) {
        out.truth_ta.grid.flat(v) = ClassTable::kPortalSplenicVein;
        structure[v] = "portal_splenic_vein";
      } else if (b & kBitSmv) {
        out.truth_ta.grid.flat(v) = ClassTable::kSmv;
        structure[v] = "smv";
      } else if (b & kBitSma) {
        out.truth_ta.grid.flat(v) = ClassTable::kSma;
        structure[v] = "sma";
      } else {
        out.truth_ta.grid.flat(v) = ClassTable::kTruncusCoeliacus;
        structure[v] = "truncus_coeliacus";
      }
    } else if (b & kBitDuct) {
      out.truth_seg.grid.flat(v) = ClassTable::kPancreas;
      out.truth_ta.grid.flat(v) = ClassTable::kPancreas;
      structure[v] = "duct";
    } else if (b & kBitPancreas) {
      out.truth_seg.grid.flat(v) = ClassTable::kPancreas;
      out.truth_ta.grid.flat(v) = ClassTable::kPancreas;
      structure[v] = "pancreas";
    }
  }

  // Vessel carving can clip off 1-4 voxel slivers of gland; drop everything
  // outside the largest 6-connected foreground component from both truths so
  // the organ is a single region. Tumors never touch vessels, so they always
  // sit inside the kept component.
  {
    const ComponentGrid comp = connected_components(
        out.truth_seg, {ClassTable::kPancreas, ClassTable::kTumor}, 6);
    std::uint32_t n_comp = 0;
    for (std::size_t v = 0; v < n_vox; ++v) n_comp = std::max(n_comp, comp.flat(v));
    if (n_comp > 1) {
      std::vector<std::size_t> sizes(n_comp + 1, 0);
      for (std::size_t v = 0; v < n_vox; ++v) ++sizes[comp.flat(v)];
      std::uint32_t keep = 1;
      for (std::uint32_t c = 2; c <= n_comp; ++c)
        if (sizes[c] > sizes[keep]) keep = c;
      for (std::size_t v = 0; v < n_vox; ++v) {
        if (comp.flat(v) == 0 || comp.flat(v) == keep) continue;
        out.truth_seg.grid.flat(v) = ClassTable::kBackground;
        out.truth_ta.grid.flat(v) = ClassTable::kBackground;
        structure[v] = "background";
      }
    }
  }

  // Images: per-phase calibration jitter applied to the structure mean, plus
  // Gaussian noise, raster order.
  const std::uint64_t noise_base = mix_seed(base, "noise");
  const std::uint64_t calib_base = mix_seed(base, "calibration");
  for (Phase phase : kAllPhases) {
    const int pi = static_cast<int>(phase);
    Rng calib_rng(mix_seed(calib_base, static_cast<std::uint64_t>(pi)));
    const double g = 1.0 + spec.calibration.gain * calib_rng.uniform(-1.0, 1.0);
    const double o = spec.calibration.shift * calib_rng.uniform(-1.0, 1.0);
    Rng noise_rng(mix_seed(noise_base, static_cast<std::uint64_t>(pi)));
    ImageGrid img(spec.dims, spec.spacing_mm);
    const double sigma = spec.noise_sigma[pi];
    for (std::size_t v = 0; v < n_vox; ++v) {
      const double mean = g * spec.enhancement.mean(structure[v], phase) + o;
      img.flat(v) = static_cast<float>(mean + sigma * noise_rng.normal());
    }
    out.images.emplace(phase, std::move(img));
  }
  return out;
}

DatasetManifest generate_dataset(const PhantomSpec& spec, Role role, int n,
                                 std::uint64_t dataset_seed,
                                 const std::filesystem::path& out_dir, bool overwrite) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");

  namespace fs = std::filesystem;
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    if (!overwrite)
      throw CollisionError("output directory '" + out_dir.string() + "' is not empty");
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir);

  const CaseOptions opt = role_case_options(spec, role);
  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.spec_hash = spec_hash(spec);

  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%s_%03d", role_name(role).c_str(), i);
    const std::string case_id = buf;
    const std::uint64_t case_seed = mix_seed(dataset_seed, case_id);
    PhantomCase pc = generate_case(spec, case_seed, opt);
    pc.case_id = case_id;

    const fs::path case_dir = out_dir / case_id;
    fs::create_directories(case_dir);

    CaseRecord rec;
    rec.case_id = case_id;
    rec.role = role;
    for (Phase phase : kAllPhases) {
      if (role == Role::B && phase != Phase::venous) continue;
      const std::string rel = case_id + "/" + phase_name(phase) + ".rvol";
      write_rvol(case_dir / (phase_name(phase) + ".rvol"), pc.images.at(phase));
      rec.phase_files[phase] = rel;
    }
    write_rvol(case_dir / "truth_seg.rvol", pc.truth_seg);
    write_rvol(case_dir / "truth_ta.rvol", pc.truth_ta);

    if (role == Role::A) {
      // Exposed annotation: tumor voxels only; pancreas demoted to background.
      LabelMap tumor_only = pc.truth_seg;
      for (std::size_t v = 0; v < tumor_only.grid.size(); ++v)
        if (tumor_only.grid.flat(v) == ClassTable::kPancreas)
          tumor_only.grid.flat(v) = ClassTable::kBackground;
      fs::create_directories(case_dir / "ann");
      write_rvol(case_dir / "ann" / "tumor.rvol", tumor_only);
      rec.set_annotation("tumor", case_id + "/ann/tumor.rvol", Provenance::manual);
    } else if (role == Role::B) {
      fs::create_directories(case_dir / "ann");
      write_rvol(case_dir / "ann" / "seg.rvol", pc.truth_seg);
      rec.set_annotation("seg", case_id + "/ann/seg.rvol", Provenance::manual);
    } else if (role == Role::D) {
      fs::create_directories(case_dir / "ann");
      write_rvol(case_dir / "ann" / "ta.rvol", pc.truth_ta);
      rec.set_annotation("ta", case_id + "/ann/ta.rvol", Provenance::manual);
    }
    manifest.cases.push_back(std::move(rec));
  }

  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

namespace {

ordered_json spec_json(const PhantomSpec& s) {
  ordered_json j;
  j["version"] = 1;
  j["seed"] = s.seed;
  j["dims"] = s.dims;
  j["spacing_mm"] = s.spacing_mm;
  j["noise_sigma"] = {{"non_contrast", s.noise_sigma[0]},
                      {"pancreatic", s.noise_sigma[1]},
                      {"venous", s.noise_sigma[2]}};
  j["pancreas"] = {{"length_mm", s.pancreas.length_mm},
                   {"radius_head_mm", s.pancreas.radius_head_mm},
                   {"radius_tail_mm", s.pancreas.radius_tail_mm},
                   {"bend_mm", s.pancreas.bend_mm},
                   {"tilt_mm", s.pancreas.tilt_mm},
                   {"margin_x_mm", s.pancreas.margin_x_mm},
                   {"center_jitter_mm", s.pancreas.center_jitter_mm}};
  j["duct"] = {{"radius_mm", s.duct.radius_mm},
               {"t_start", s.duct.t_start},
               {"t_end", s.duct.t_end},
               {"offset_z_mm", s.duct.offset_z_mm}};
  j["tumor"] = {{"radius_min_mm", s.tumor.radius_min_mm},
                {"radius_max_mm", s.tumor.radius_max_mm},
                {"location", s.tumor.location == TumorLocation::head ? "head" : "anywhere"},
                {"irregularity", s.tumor.irregularity},
                {"head_t_max", s.tumor.head_t_max},
                {"hyper_fraction_b", s.tumor.hyper_fraction_b},
                {"max_retries", s.tumor.max_retries}};
  j["vessels"] = {{"radius_psv_mm", s.vessels.radius_psv_mm},
                  {"radius_smv_mm", s.vessels.radius_smv_mm},
                  {"radius_sma_mm", s.vessels.radius_sma_mm},
                  {"radius_tc_mm", s.vessels.radius_tc_mm}};
  j["calibration"] = {{"gain", s.calibration.gain}, {"shift", s.calibration.shift}};
  ordered_json enh = ordered_json::object();
  for (const std::string& name : EnhancementTable::structure_names())
    if (s.enhancement.rows.count(name)) enh[name] = s.enhancement.rows.at(name);
  j["enhancement"] = std::move(enh);
  return j;
}

}  // namespace

std::string phantom_spec_to_json(const PhantomSpec& spec) { return spec_json(spec).dump(2); }

PhantomSpec phantom_spec_from_json(const std::string& text) {
  const ordered_json j = detail::parse_json_text(text, "phantom spec");
  require_keys(j,
               {"version", "seed", "dims", "spacing_mm", "noise_sigma", "pancreas", "duct",
                "tumor", "vessels", "calibration", "enhancement"},
               "phantom spec");
  if (get_req<int>(j, "version", "phantom spec") != 1)
    throw ConfigError("phantom spec: unsupported version");

  PhantomSpec s;
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed, "phantom spec");
  s.dims = get_or<Dims>(j, "dims", s.dims, "phantom spec");
  s.spacing_mm = get_or<Spacing>(j, "spacing_mm", s.spacing_mm, "phantom spec");
  if (j.contains("noise_sigma")) {
    const auto& jn = j.at("noise_sigma");
    require_keys(jn, {"non_contrast", "pancreatic", "venous"}, "noise_sigma");
    s.noise_sigma[0] = get_or(jn, "non_contrast", s.noise_sigma[0], "noise_sigma");
    s.noise_sigma[1] = get_or(jn, "pancreatic", s.noise_sigma[1], "noise_sigma");
    s.noise_sigma[2] = get_or(jn, "venous", s.noise_sigma[2], "noise_sigma");
  }
  if (j.contains("pancreas")) {
    const auto& jp = j.at("pancreas");
    require_keys(jp,
                 {"length_mm", "radius_head_mm", "radius_tail_mm", "bend_mm", "tilt_mm",
                  "margin_x_mm", "center_jitter_mm"},
                 "pancreas");
    s.pancreas.length_mm = get_or(jp, "length_mm", s.pancreas.length_mm, "pancreas");
    s.pancreas.radius_head_mm =
        get_or(jp, "radius_head_mm", s.pancreas.radius_head_mm, "pancreas");
    s.pancreas.radius_tail_mm =
        get_or(jp, "radius_tail_mm", s.pancreas.radius_tail_mm, "pancreas");
    s.pancreas.bend_mm = get_or(jp, "bend_mm", s.pancreas.bend_mm, "pancreas");
    s.pancreas.tilt_mm = get_or(jp, "tilt_mm", s.pancreas.tilt_mm, "pancreas");
    s.pancreas.margin_x_mm = get_or(jp, "margin_x_mm", s.pancreas.margin_x_mm, "pancreas");
    s.pancreas.center_jitter_mm =
        get_or(jp, "center_jitter_mm", s.pancreas.center_jitter_mm, "pancreas");
  }
  if (j.contains("duct")) {
    const auto& jd = j.at("duct");
    require_keys(jd, {"radius_mm", "t_start", "t_end", "offset_z_mm"}, "duct");
    s.duct.radius_mm = get_or(jd, "radius_mm", s.duct.radius_mm, "duct");
    s.duct.t_start = get_or(jd, "t_start", s.duct.t_start, "duct");
    s.duct.t_end = get_or(jd, "t_end", s.duct.t_end, "duct");
    s.duct.offset_z_mm = get_or(jd, "offset_z_mm", s.duct.offset_z_mm, "duct");
  }
  if (j.contains("tumor")) {
    const auto& jt = j.at("tumor");
    require_keys(jt,
                 {"radius_min_mm", "radius_max_mm", "location", "irregularity", "head_t_max",
                  "hyper_fraction_b", "max_retries"},
                 "tumor");
    s.tumor.radius_min_mm = get_or(jt, "radius_min_mm", s.tumor.radius_min_mm, "tumor");
    s.tumor.radius_max_mm = get_or(jt, "radius_max_mm", s.tumor.radius_max_mm, "tumor");
    const std::string loc = get_or<std::string>(
        jt, "location", s.tumor.location == TumorLocation::head ? "head" : "anywhere", "tumor");
    if (loc == "head")
      s.tumor.location = TumorLocation::head;
    else if (loc == "anywhere")
      s.tumor.location = TumorLocation::anywhere;
    else
      throw ConfigError("tumor: location must be 'head' or 'anywhere'");
    s.tumor.irregularity = get_or(jt, "irregularity", s.tumor.irregularity, "tumor");
    s.tumor.head_t_max = get_or(jt, "head_t_max", s.tumor.head_t_max, "tumor");
    s.tumor.hyper_fraction_b =
        get_or(jt, "hyper_fraction_b", s.tumor.hyper_fraction_b, "tumor");
    s.tumor.max_retries = get_or(jt, "max_retries", s.tumor.max_retries, "tumor");
  }
  if (j.contains("vessels")) {
    const auto& jv = j.at("vessels");
    require_keys(jv, {"radius_psv_mm", "radius_smv_mm", "radius_sma_mm", "radius_tc_mm"},
                 "vessels");
    s.vessels.radius_psv_mm = get_or(jv, "radius_psv_mm", s.vessels.radius_psv_mm, "vessels");
    s.vessels.radius_smv_mm = get_or(jv, "radius_smv_mm", s.vessels.radius_smv_mm, "vessels");
    s.vessels.radius_sma_mm = get_or(jv, "radius_sma_mm", s.vessels.radius_sma_mm, "vessels");
    s.vessels.radius_tc_mm = get_or(jv, "radius_tc_mm", s.vessels.radius_tc_mm, "vessels");
  }
  if (j.contains("calibration")) {
    const auto& jc = j.at("calibration");
    require_keys(jc, {"gain", "shift"}, "calibration");
    s.calibration.gain = get_or(jc, "gain", s.calibration.gain, "calibration");
    s.calibration.shift = get_or(jc, "shift", s.calibration.shift, "calibration");
  }
  if (j.contains("enhancement")) {
    const auto& je = j.at("enhancement");
    if (!je.is_object()) throw ConfigError("enhancement: expected a JSON object");
    s.enhancement.rows.clear();
    for (const auto& item : je.items())
      s.enhancement.rows[item.key()] = item.value().get<std::array<double, 3>>();
  }
  s.validate();
  return s;
}

std::string spec_hash(const PhantomSpec& spec) {
  const std::uint64_t h = fnv1a64(spec_json(spec).dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace selfseg
