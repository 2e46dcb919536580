#include "selfseg/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"

namespace selfseg {

namespace {
using ordered_json = nlohmann::ordered_json;
constexpr int kManifestVersion = 1;
}  // namespace

const std::string& role_name(Role r) {
  static const std::string names[] = {"A", "B", "C", "D"};
  return names[static_cast<int>(r)];
}

Role parse_role(const std::string& name) {
  for (Role r : {Role::A, Role::B, Role::C, Role::D})
    if (role_name(r) == name) return r;
  throw std::invalid_argument("unknown role '" + name + "'");
}

const std::string& provenance_name(Provenance p) {
  static const std::string names[] = {"none", "manual", "bootstrapped", "pseudo",
                                      "refined_pseudo"};
  return names[static_cast<int>(p)];
}

Provenance parse_provenance(const std::string& name) {
  for (Provenance p : {Provenance::none, Provenance::manual, Provenance::bootstrapped,
                       Provenance::pseudo, Provenance::refined_pseudo})
    if (provenance_name(p) == name) return p;
  throw std::invalid_argument("unknown provenance '" + name + "'");
}

bool provenance_transition_allowed(Provenance from, Provenance to) {
  switch (from) {
    case Provenance::none:
      return to == Provenance::manual || to == Provenance::bootstrapped ||
             to == Provenance::pseudo;
    case Provenance::bootstrapped:
    case Provenance::pseudo:
      return to == Provenance::refined_pseudo;
    case Provenance::manual:
    case Provenance::refined_pseudo:
      return false;
  }
  return false;
}

void CaseRecord::set_annotation(const std::string& kind, const std::string& path,
                                Provenance provenance) {
  if (provenance == Provenance::none)
    throw DatasetError("cannot record annotation '" + kind + "' with provenance none");
  const auto it = annotations.find(kind);
  const Provenance from = it == annotations.end() ? Provenance::none : it->second.provenance;
  if (!provenance_transition_allowed(from, provenance))
    throw DatasetError("case '" + case_id + "': provenance transition " +
                       provenance_name(from) + " -> " + provenance_name(provenance) +
                       " not allowed for annotation '" + kind + "'");
  annotations[kind] = AnnotationRecord{path, provenance};
}

std::filesystem::path DatasetManifest::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : root / p;
}

const CaseRecord& DatasetManifest::find_case(const std::string& case_id) const {
  for (const CaseRecord& c : cases)
    if (c.case_id == case_id) return c;
  throw DatasetError("case '" + case_id + "' not in manifest");
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const CaseRecord& c : cases) {
    if (c.case_id.empty()) throw DatasetError("manifest contains an empty case id");
    if (!ids.insert(c.case_id).second)
      throw DatasetError("duplicate case id '" + c.case_id + "'");
    for (const auto& [phase, path] : c.phase_files) {
      if (!std::filesystem::exists(resolve(path)))
        throw DatasetError("case '" + c.case_id + "': missing " + phase_name(phase) +
                           " file '" + path + "'");
    }
    for (const auto& [kind, ann] : c.annotations) {
      if (ann.provenance == Provenance::none)
        throw DatasetError("case '" + c.case_id + "': annotation '" + kind +
                           "' has provenance none");
      if (!std::filesystem::exists(resolve(ann.path)))
        throw DatasetError("case '" + c.case_id + "': missing annotation file '" + ann.path +
                           "'");
    }
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open manifest '" + path.string() + "'");
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const ordered_json::exception& e) {
    throw ConfigError("malformed manifest '" + path.string() + "': " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "selfseg-dataset")
      throw ConfigError("'" + path.string() + "' is not a dataset manifest");
    if (j.at("version").get<int>() != kManifestVersion)
      throw ConfigError("unsupported manifest version in '" + path.string() + "'");
    DatasetManifest m;
    m.root = std::filesystem::absolute(path).parent_path();
    m.spec_hash = j.value("spec_hash", std::string());
    for (const auto& jc : j.at("cases")) {
      CaseRecord c;
      c.case_id = jc.at("case_id").get<std::string>();
      c.role = parse_role(jc.at("role").get<std::string>());
      for (const auto& [name, file] : jc.at("phases").items())
        c.phase_files[parse_phase(name)] = file.get<std::string>();
      if (jc.contains("annotations")) {
        for (const auto& [kind, ja] : jc.at("annotations").items()) {
          AnnotationRecord a;
          a.path = ja.at("path").get<std::string>();
          a.provenance = parse_provenance(ja.at("provenance").get<std::string>());
          if (a.provenance == Provenance::none)
            throw ConfigError("manifest records provenance 'none'");
          c.annotations[kind] = a;
        }
      }
      if (jc.contains("fold") && !jc.at("fold").is_null()) c.fold = jc.at("fold").get<int>();
      m.cases.push_back(std::move(c));
    }
    return m;
  } catch (const ordered_json::exception& e) {
    throw ConfigError("malformed manifest '" + path.string() + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("malformed manifest '" + path.string() + "': " + e.what());
  }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  ordered_json j;
  j["format"] = "selfseg-dataset";
  j["version"] = kManifestVersion;
  j["root"] = ".";
  j["spec_hash"] = manifest.spec_hash;
  j["cases"] = ordered_json::array();
  for (const CaseRecord& c : manifest.cases) {
    ordered_json jc;
    jc["case_id"] = c.case_id;
    jc["role"] = role_name(c.role);
    jc["phases"] = ordered_json::object();
    for (const auto& [phase, file] : c.phase_files) jc["phases"][phase_name(phase)] = file;
    jc["annotations"] = ordered_json::object();
    for (const auto& [kind, ann] : c.annotations) {
      jc["annotations"][kind] = {{"path", ann.path},
                                 {"provenance", provenance_name(ann.provenance)}};
    }
    if (c.fold)
      jc["fold"] = *c.fold;
    else
      jc["fold"] = nullptr;
    j["cases"].push_back(std::move(jc));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw DatasetError("failed writing manifest '" + path.string() + "'");
}

}  // namespace selfseg
