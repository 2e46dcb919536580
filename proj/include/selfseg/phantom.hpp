#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "selfseg/grid.hpp"
#include "selfseg/manifest.hpp"

namespace selfseg {

/// Mean intensity per structure per phase, indexed by kAllPhases order
/// (non_contrast, pancreatic, venous).
struct EnhancementTable {
  std::map<std::string, std::array<double, 3>> rows;

  double mean(const std::string& structure, Phase phase) const;
  /// Requires every known structure; enforces that the |tumor - pancreas|
  /// contrast is strictly largest in the pancreatic phase, intermediate in
  /// venous, smallest in non-contrast.
  void validate() const;

  static const std::vector<std::string>& structure_names();
  static EnhancementTable defaults();
};

struct PancreasSpec {
  double length_mm = 52.0;
  double radius_head_mm = 9.0;
  double radius_tail_mm = 5.0;
  double bend_mm = 6.0;        // sagittal-plane bow of the centerline
  double tilt_mm = 6.0;        // z drift head-to-tail
  double margin_x_mm = 10.0;   // head-side gap before the first slice
  double center_jitter_mm = 3.0;
};

struct DuctSpec {
  double radius_mm = 1.1;
  double t_start = 0.12;  // centerline parameter range
  double t_end = 0.92;
  double offset_z_mm = 1.5;
};

enum class TumorLocation { head, anywhere };

struct TumorSpec {
  double radius_min_mm = 4.0;
  double radius_max_mm = 7.0;
  TumorLocation location = TumorLocation::head;
  double irregularity = 0.35;     // boundary modulation amplitude
  double head_t_max = 0.28;       // centerline extent counted as "head"
  double hyper_fraction_b = 0.3;  // hyper-enhancing variant probability (B role)
  int max_retries = 200;
};

struct VesselSpec {
  double radius_psv_mm = 2.4;
  double radius_smv_mm = 2.2;
  double radius_sma_mm = 2.2;
  double radius_tc_mm = 2.0;
};

/// Per-case, per-phase affine intensity calibration jitter. Models scanner
/// and contrast-timing variability between acquisitions: each case draws a
/// gain g ~ U(1-gain, 1+gain) and offset o ~ U(-shift, +shift) per phase, and
/// clean tissue values become g * value + o before noise is added. Zero both
/// fields for exactly reproducible tissue means.
struct CalibrationSpec {
  double gain = 0.05;   // relative amplitude of the multiplicative jitter
  double shift = 4.0;   // absolute amplitude of the additive jitter
};

struct PhantomSpec {
  Dims dims{48, 48, 32};
  Spacing spacing_mm{1.5, 1.5, 3.0};
  std::array<double, 3> noise_sigma{4.0, 6.0, 6.0};  // per phase, kAllPhases order
  PancreasSpec pancreas;
  DuctSpec duct;
  TumorSpec tumor;
  VesselSpec vessels;
  CalibrationSpec calibration;
  EnhancementTable enhancement = EnhancementTable::defaults();
  std::uint64_t seed = 20260824;

  void validate() const;
};

/// Canonical JSON for configs and hashing. Parsing is fail-closed: unknown
/// keys raise ConfigError.
std::string phantom_spec_to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const std::string& text);
/// FNV-1a-64 over the canonical JSON, as 16 hex digits.
std::string spec_hash(const PhantomSpec& spec);

struct PhantomCase {
  std::string case_id;
  std::map<Phase, ImageGrid> images;  // all three phases, pre-aligned
  LabelMap truth_seg;                 // SEG3; vessels rasterize to background
  LabelMap truth_ta;                  // TA6; tumor voxels fold into pancreas
};

/// Per-case generation knobs derived from the dataset role.
struct CaseOptions {
  bool with_tumor = true;
  TumorLocation location = TumorLocation::head;
  double hyper_prob = 0.0;
};

PhantomCase generate_case(const PhantomSpec& spec, std::uint64_t case_seed);
PhantomCase generate_case(const PhantomSpec& spec, std::uint64_t case_seed,
                          const CaseOptions& options);

/// Role policy applied by generate_dataset:
///   A: three phases, head tumors, exposes a tumor-only annotation.
///   B: venous image only, tumors anywhere, hyper variant with probability
///      hyper_fraction_b, exposes the full segmentation annotation.
///   C: three phases, head tumors, exposes nothing.
///   D: three phases, tumor-free, exposes the TA6 annotation.
CaseOptions role_case_options(const PhantomSpec& spec, Role role);

/// Writes `<out_dir>/<case_id>/...` per case plus `<out_dir>/manifest.json`,
/// returning the manifest. Refuses a non-empty out_dir unless overwrite.
DatasetManifest generate_dataset(const PhantomSpec& spec, Role role, int n,
                                 std::uint64_t dataset_seed,
                                 const std::filesystem::path& out_dir, bool overwrite = false);

}  // namespace selfseg
