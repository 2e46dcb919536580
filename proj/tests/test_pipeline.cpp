#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"
#include "selfseg/manifest.hpp"
#include "selfseg/model.hpp"
#include "selfseg/phantom.hpp"
#include "selfseg/pipeline.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/rvol.hpp"

using namespace selfseg;
namespace fs = std::filesystem;

namespace {

DatasetManifest fake_manifest(int n) {
  DatasetManifest m;
  for (int i = 0; i < n; ++i) {
    CaseRecord c;
    c.case_id = "case_" + std::to_string(i);
    c.role = Role::A;
    m.cases.push_back(std::move(c));
  }
  return m;
}

std::map<int, int> fold_sizes(const std::map<std::string, int>& split) {
  std::map<int, int> sizes;
  for (const auto& [id, f] : split) ++sizes[f];
  return sizes;
}

/// Generates the four tiny role datasets once per process.
const fs::path& tiny_dataset_root() {
  static const fs::path root = [] {
    const fs::path r = fs::temp_directory_path() / "selfseg_pipeline_fixture";
    fs::remove_all(r);
    PhantomSpec spec;
    const std::uint64_t base = mix_seed(spec.seed, "dataset");
    generate_dataset(spec, Role::A, 4, mix_seed(base, "A"), r / "A");
    generate_dataset(spec, Role::B, 3, mix_seed(base, "B"), r / "B");
    generate_dataset(spec, Role::C, 2, mix_seed(base, "C"), r / "C");
    generate_dataset(spec, Role::D, 2, mix_seed(base, "D"), r / "D");
    return r;
  }();
  return root;
}

PipelineConfig tiny_config() {
  const fs::path& root = tiny_dataset_root();
  PipelineConfig cfg;
  cfg.manifest_a = (root / "A" / "manifest.json").string();
  cfg.manifest_b = (root / "B" / "manifest.json").string();
  cfg.manifest_c = (root / "C" / "manifest.json").string();
  cfg.manifest_d = (root / "D" / "manifest.json").string();
  for (TrainConfig* tc : {&cfg.teacher_a, &cfg.teacher_b, &cfg.ta, &cfg.student}) {
    tc->epochs = 2;
    tc->steps_per_epoch = 4;
    tc->batch_size = 128;
  }
  cfg.eval.k_folds = 2;
  cfg.seed = 5;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("crossval_split: fold sizes and determinism") {
  const DatasetManifest ten = fake_manifest(10);
  const auto s10 = crossval_split(ten, 5, 1);
  CHECK(fold_sizes(s10) == std::map<int, int>{{0, 2}, {1, 2}, {2, 2}, {3, 2}, {4, 2}});

  const DatasetManifest eleven = fake_manifest(11);
  const auto s11 = crossval_split(eleven, 5, 1);
  const auto sizes = fold_sizes(s11);
  std::multiset<int> counts;
  for (const auto& [f, n] : sizes) counts.insert(n);
  CHECK(counts == std::multiset<int>{2, 2, 2, 2, 3});

  CHECK(crossval_split(eleven, 5, 1) == s11);
  CHECK(crossval_split(eleven, 5, 2) != s11);

  CHECK_THROWS_AS(crossval_split(ten, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(crossval_split(fake_manifest(3), 5, 1), std::invalid_argument);
}

TEST_CASE("compose_bootstrap_label: precedence rules") {
  LabelMap pred;
  pred.classes = ClassTable::seg3();
  pred.grid = ByteGrid({4, 1, 1}, {1, 1, 1}, 0);
  pred.grid(0, 0, 0) = ClassTable::kPancreas;  // predicted pancreas, manual tumor
  pred.grid(1, 0, 0) = ClassTable::kPancreas;  // predicted pancreas only
  pred.grid(2, 0, 0) = ClassTable::kTumor;     // teacher-B tumor, no manual
  LabelMap manual;
  manual.classes = ClassTable::seg3();
  manual.grid = ByteGrid({4, 1, 1}, {1, 1, 1}, 0);
  manual.grid(0, 0, 0) = ClassTable::kTumor;
  manual.grid(3, 0, 0) = ClassTable::kTumor;  // manual tumor over predicted background

  const LabelMap out = compose_bootstrap_label(pred, manual);
  CHECK(out.grid(0, 0, 0) == ClassTable::kTumor);     // manual wins
  CHECK(out.grid(1, 0, 0) == ClassTable::kPancreas);  // prediction kept
  CHECK(out.grid(2, 0, 0) == ClassTable::kBackground);  // teacher-B tumor discarded
  CHECK(out.grid(3, 0, 0) == ClassTable::kTumor);
}

TEST_CASE("provenance: only forward transitions are allowed") {
  CHECK(provenance_transition_allowed(Provenance::none, Provenance::manual));
  CHECK(provenance_transition_allowed(Provenance::none, Provenance::bootstrapped));
  CHECK(provenance_transition_allowed(Provenance::none, Provenance::pseudo));
  CHECK(provenance_transition_allowed(Provenance::bootstrapped, Provenance::refined_pseudo));
  CHECK(provenance_transition_allowed(Provenance::pseudo, Provenance::refined_pseudo));
  CHECK(!provenance_transition_allowed(Provenance::manual, Provenance::pseudo));
  CHECK(!provenance_transition_allowed(Provenance::refined_pseudo, Provenance::pseudo));
  CHECK(!provenance_transition_allowed(Provenance::pseudo, Provenance::manual));

  CaseRecord rec;
  rec.case_id = "x";
  rec.role = Role::A;
  rec.set_annotation("seg", "a.rvol", Provenance::pseudo);
  CHECK_THROWS_AS(rec.set_annotation("seg", "b.rvol", Provenance::manual), DatasetError);
  CHECK_NOTHROW(rec.set_annotation("seg", "c.rvol", Provenance::refined_pseudo));
}

TEST_CASE("pipeline config: JSON round-trip, defaults, fail-closed") {
  PipelineConfig cfg = tiny_config();
  const std::string text = pipeline_config_to_json(cfg);
  const PipelineConfig back = pipeline_config_from_json(text);
  CHECK(pipeline_config_to_json(back) == text);
  CHECK(config_hash(back) == config_hash(cfg));

  // Different seed -> different hash and run directory key.
  PipelineConfig other = cfg;
  other.seed = 6;
  CHECK(config_hash(other) != config_hash(cfg));

  CHECK_THROWS_AS(pipeline_config_from_json("{\"version\":2}"), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json("{\"version\":1,\"manifests\":{},\"x\":1}"),
                  ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json("nope"), ConfigError);
}

TEST_CASE("run_pipeline: default toggles produce the full table and audits") {
  const fs::path out = fs::temp_directory_path() / "selfseg_run_full";
  fs::remove_all(out);
  const PipelineConfig cfg = tiny_config();
  const RunResult res = run_pipeline(cfg, out);

  REQUIRE(res.table.rows.size() == 6);
  CHECK(res.table.rows[0].method == "teacher:non_contrast");
  CHECK(res.table.rows[3].method == "teacher:non_contrast+pancreatic+venous");
  CHECK(res.table.rows[4].method == "student:self-learn");
  CHECK(res.table.rows[5].method == "student:self-learn+ta");
  CHECK(res.table.rows[4].training_roles == "A+C");
  // Pooled per-case values across 2 folds x 2 held-out cases.
  CHECK(res.table.rows[0].tumor_dice.size() == 4);

  using nlohmann::json;
  const json report = json::parse(slurp(res.run_dir / "run_report.json"));
  CHECK(report.at("format") == "selfseg-run-report");
  for (const auto& fold : report.at("folds")) {
    CHECK(fold.at("leakage_audit").at("ok").get<bool>());
    for (const auto& [name, s] : fold.at("students").items()) {
      (void)name;
      CHECK(s.at("fresh_init").get<bool>());
    }
    const auto& totals = fold.at("refinement").at("C_totals");
    CHECK(totals.at("tumor_voxels_changed").get<int>() == 0);
    // Student provenance: self-learn consumes bootstrapped+pseudo, +ta refined.
    CHECK(fold.at("students").at("student_self_learn").at("label_provenance").at("C") ==
          "pseudo");
    CHECK(fold.at("students").at("student_self_learn_ta").at("label_provenance").at("A") ==
          "refined_pseudo");
  }
  CHECK(fs::exists(res.run_dir / "timings.json"));

  // A second run into the same root collides on the same config hash.
  CHECK_THROWS_AS(run_pipeline(cfg, out), CollisionError);
  fs::remove_all(out);
}

TEST_CASE("run_pipeline: identical configs give byte-identical reports") {
  const fs::path out1 = fs::temp_directory_path() / "selfseg_run_det1";
  const fs::path out2 = fs::temp_directory_path() / "selfseg_run_det2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  const PipelineConfig cfg = tiny_config();
  const RunResult r1 = run_pipeline(cfg, out1);
  const RunResult r2 = run_pipeline(cfg, out2);
  CHECK(slurp(r1.run_dir / "run_report.json") == slurp(r2.run_dir / "run_report.json"));
  CHECK(slurp(r1.run_dir / "fold_0" / "models" / "student_self_learn.json") ==
        slurp(r2.run_dir / "fold_0" / "models" / "student_self_learn.json"));
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("run_pipeline: self-learning disabled trains the student on A only") {
  const fs::path out = fs::temp_directory_path() / "selfseg_run_nosl";
  fs::remove_all(out);
  PipelineConfig cfg = tiny_config();
  cfg.ablations.self_learn = false;
  const RunResult res = run_pipeline(cfg, out);

  for (const AblationRow& row : res.table.rows) CHECK(row.method != "student:self-learn");
  const AblationRow& ta_row = res.table.rows.back();
  CHECK(ta_row.method == "student:ta-only");
  CHECK(ta_row.training_roles == "A");

  using nlohmann::json;
  const json report = json::parse(slurp(res.run_dir / "run_report.json"));
  for (const auto& fold : report.at("folds")) {
    const auto& students = fold.at("students");
    CHECK(!students.contains("student_self_learn"));
    const auto& prov = students.at("student_self_learn_ta").at("label_provenance");
    CHECK(prov.at("A") == "refined_pseudo");
    CHECK(!prov.contains("C"));  // no C cases in the student's training set
    // No pseudo-labeling stage ran.
    CHECK(fold.at("pseudo_diagnostics").empty());
  }
  fs::remove_all(out);
}

TEST_CASE("run_pipeline: TA disabled leaves provenance at pseudo") {
  const fs::path out = fs::temp_directory_path() / "selfseg_run_nota";
  fs::remove_all(out);
  PipelineConfig cfg = tiny_config();
  cfg.ablations.self_learn_ta = false;
  const RunResult res = run_pipeline(cfg, out);

  for (const AblationRow& row : res.table.rows) {
    CHECK(row.method != "student:self-learn+ta");
    CHECK(row.method != "student:ta-only");
  }
  CHECK(res.table.rows.back().method == "student:self-learn");

  using nlohmann::json;
  const json report = json::parse(slurp(res.run_dir / "run_report.json"));
  for (const auto& fold : report.at("folds")) {
    const auto& prov = fold.at("students").at("student_self_learn").at("label_provenance");
    CHECK(prov.at("A") == "bootstrapped");
    CHECK(prov.at("C") == "pseudo");
    CHECK(fold.at("refinement").empty());
  }
  fs::remove_all(out);
}

TEST_CASE("run_pipeline: ablation row list follows the config") {
  const fs::path out = fs::temp_directory_path() / "selfseg_run_rows";
  fs::remove_all(out);
  PipelineConfig cfg = tiny_config();
  cfg.ablations.self_learn = false;
  cfg.ablations.self_learn_ta = false;
  cfg.ablations.phase_subsets = {
      {Phase::venous}, {Phase::non_contrast, Phase::pancreatic, Phase::venous}};
  const RunResult res = run_pipeline(cfg, out);
  REQUIRE(res.table.rows.size() == 2);  // exactly the two configured teacher rows
  CHECK(res.table.rows[0].method == "teacher:venous");
  CHECK(res.table.rows[1].method == "teacher:non_contrast+pancreatic+venous");
  fs::remove_all(out);
}

TEST_CASE("bootstrap_pancreas_labels: missing venous cases are skipped") {
  // Train a throwaway teacher B on the tiny fixture, then bootstrap an
  // A manifest whose second case lost its venous phase.
  const fs::path& root = tiny_dataset_root();
  DatasetManifest man_a = load_manifest(root / "A" / "manifest.json");
  DatasetManifest man_b = load_manifest(root / "B" / "manifest.json");

  std::vector<TrainingExample> examples;
  for (const CaseRecord& c : man_b.cases) {
    TrainingExample ex;
    ex.id = c.case_id;
    ex.images.emplace(Phase::venous,
                      read_rvol_image(man_b.resolve(c.phase_files.at(Phase::venous))));
    ex.labels = read_rvol_labels(man_b.resolve(c.annotations.at("seg").path));
    examples.push_back(std::move(ex));
  }
  TrainConfig tc;
  tc.epochs = 2;
  tc.steps_per_epoch = 4;
  tc.batch_size = 128;
  const TrainResult tb =
      train(examples, ClassTable::seg3(), FeatureConfig{1, {Phase::venous}}, tc, LossConfig{});

  man_a.cases[1].phase_files.erase(Phase::venous);
  const fs::path label_dir = fs::temp_directory_path() / "selfseg_boot_labels";
  fs::remove_all(label_dir);
  std::vector<std::string> skipped;
  const DatasetManifest boot = bootstrap_pancreas_labels(man_a, tb.model, label_dir, &skipped);
  REQUIRE(skipped.size() == 1);
  CHECK(skipped[0] == man_a.cases[1].case_id);
  CHECK(boot.cases[0].annotations.count("seg") == 1);
  CHECK(boot.cases[0].annotations.at("seg").provenance == Provenance::bootstrapped);
  CHECK(boot.cases[1].annotations.count("seg") == 0);
  fs::remove_all(label_dir);
}
