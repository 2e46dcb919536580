#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "selfseg/grid.hpp"

namespace selfseg {

/// Dataset roles: A = manual tumor annotations, B = venous-only with full
/// segmentation labels, C = unannotated (pseudo-label target), D = vessel
/// reference labels for the teaching assistant.
enum class Role { A, B, C, D };

const std::string& role_name(Role r);
Role parse_role(const std::string& name);  // throws std::invalid_argument

/// Origin of an annotation. `none` is the conceptual state of an annotation
/// kind that is absent from a case; it never appears in files.
enum class Provenance { none, manual, bootstrapped, pseudo, refined_pseudo };

const std::string& provenance_name(Provenance p);
Provenance parse_provenance(const std::string& name);  // throws std::invalid_argument

/// Annotations move only forward: none -> {manual, bootstrapped, pseudo},
/// bootstrapped -> refined_pseudo, pseudo -> refined_pseudo. Manual and
/// refined labels are terminal; manual is never overwritten.
bool provenance_transition_allowed(Provenance from, Provenance to);

struct AnnotationRecord {
  std::string path;  // relative to the manifest root unless absolute
  Provenance provenance = Provenance::none;
};

struct CaseRecord {
  std::string case_id;
  Role role = Role::A;
  std::map<Phase, std::string> phase_files;           // phase -> path
  std::map<std::string, AnnotationRecord> annotations;  // kind ("tumor"|"seg"|"ta") -> record
  std::optional<int> fold;

  /// Adds or replaces an annotation, enforcing the provenance transition
  /// rules; throws DatasetError on an illegal transition.
  void set_annotation(const std::string& kind, const std::string& path, Provenance provenance);
};

struct DatasetManifest {
  std::filesystem::path root;  // directory the relative paths resolve against
  std::vector<CaseRecord> cases;
  std::string spec_hash;  // hash of the generation spec, "" when unknown

  std::filesystem::path resolve(const std::string& path) const;
  const CaseRecord& find_case(const std::string& case_id) const;  // throws DatasetError

  /// Structural check: unique case ids, nonempty paths, referenced files exist.
  void validate() const;
};

/// manifest.json (de)serialization. Loading sets root to the manifest's
/// directory; saving writes root as "." and paths as stored.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace selfseg
