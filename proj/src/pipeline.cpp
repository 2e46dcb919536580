#include "selfseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json_util.hpp"
#include "selfseg/errors.hpp"
#include "selfseg/refine.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/rvol.hpp"
#include "selfseg/volume_ops.hpp"

namespace selfseg {

namespace {

using detail::get_or;
using detail::get_req;
using detail::ordered_json;
using detail::require_keys;

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<Phase> canonical_subset(const std::vector<Phase>& phases) {
  std::set<Phase> s(phases.begin(), phases.end());
  if (s.size() != phases.size())
    throw ConfigError("phase subset contains duplicates");
  if (s.empty()) throw ConfigError("phase subset is empty");
  return std::vector<Phase>(s.begin(), s.end());
}

std::string subset_name(const std::vector<Phase>& phases) {
  std::string name;
  for (Phase p : canonical_subset(phases)) {
    if (!name.empty()) name += "+";
    name += phase_name(p);
  }
  return name;
}

bool is_all_phases(const std::vector<Phase>& subset) {
  return canonical_subset(subset).size() == kAllPhases.size();
}

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------

ordered_json train_to_json(const TrainConfig& t) {
  ordered_json j;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["steps_per_epoch"] = t.steps_per_epoch;
  j["lr_initial"] = t.lr.initial;
  j["lr_decay_factor"] = t.lr.decay_factor;
  j["lr_decay_every"] = t.lr.decay_every_epochs;
  j["validation_fraction"] = t.validation_fraction;
  j["class_balanced"] = t.class_balanced;
  std::vector<int> sel(t.selection_class_ids.begin(), t.selection_class_ids.end());
  j["selection_class_ids"] = sel;
  return j;
}

TrainConfig train_from_json(const ordered_json& j, const TrainConfig& defaults,
                            const std::string& context) {
  require_keys(j,
               {"epochs", "batch_size", "steps_per_epoch", "lr_initial", "lr_decay_factor",
                "lr_decay_every", "validation_fraction", "class_balanced",
                "selection_class_ids"},
               context);
  TrainConfig t = defaults;
  t.epochs = get_or(j, "epochs", t.epochs, context);
  t.batch_size = get_or(j, "batch_size", t.batch_size, context);
  t.steps_per_epoch = get_or(j, "steps_per_epoch", t.steps_per_epoch, context);
  t.lr.initial = get_or(j, "lr_initial", t.lr.initial, context);
  t.lr.decay_factor = get_or(j, "lr_decay_factor", t.lr.decay_factor, context);
  t.lr.decay_every_epochs = get_or(j, "lr_decay_every", t.lr.decay_every_epochs, context);
  t.validation_fraction = get_or(j, "validation_fraction", t.validation_fraction, context);
  t.class_balanced = get_or(j, "class_balanced", t.class_balanced, context);
  if (j.contains("selection_class_ids")) {
    t.selection_class_ids.clear();
    for (int id : get_req<std::vector<int>>(j, "selection_class_ids", context)) {
      if (id < 1 || id > 255) throw ConfigError(context + ": selection class id out of range");
      t.selection_class_ids.push_back(static_cast<std::uint8_t>(id));
    }
  }
  return t;
}

ordered_json config_json(const PipelineConfig& c) {
  ordered_json j;
  j["version"] = 1;
  j["seed"] = c.seed;
  j["manifests"] = {{"A", c.manifest_a},
                    {"B", c.manifest_b},
                    {"C", c.manifest_c},
                    {"D", c.manifest_d}};
  j["fusion"] = {{"omega0", c.fusion.omega0},
                 {"omega1", c.fusion.omega1},
                 {"head_fraction", c.fusion.head_fraction},
                 {"axis", c.fusion.axis},
                 {"direction", direction_name(c.fusion.direction)}};
  j["loss"] = {{"dice_weight", c.loss.dice_weight},
               {"ce_weight", c.loss.ce_weight},
               {"epsilon", c.loss.epsilon},
               {"ce_clamp", c.loss.ce_clamp}};
  j["train"] = {{"teacher_a", train_to_json(c.teacher_a)},
                {"teacher_b", train_to_json(c.teacher_b)},
                {"ta", train_to_json(c.ta)},
                {"student", train_to_json(c.student)}};
  j["eval"] = {{"k_folds", c.eval.k_folds}};
  ordered_json subsets = ordered_json::array();
  for (const auto& subset : c.ablations.phase_subsets) {
    ordered_json names = ordered_json::array();
    for (Phase p : canonical_subset(subset)) names.push_back(phase_name(p));
    subsets.push_back(std::move(names));
  }
  j["ablations"] = {{"phase_subsets", std::move(subsets)},
                    {"self_learn", c.ablations.self_learn},
                    {"self_learn_ta", c.ablations.self_learn_ta}};
  return j;
}

}  // namespace

void EvalConfig::validate() const {
  if (k_folds < 2) throw ConfigError("eval: k_folds must be >= 2");
}

AblationConfig AblationConfig::defaults() {
  AblationConfig a;
  a.phase_subsets = {{Phase::non_contrast},
                     {Phase::pancreatic},
                     {Phase::venous},
                     {Phase::non_contrast, Phase::pancreatic, Phase::venous}};
  return a;
}

void PipelineConfig::validate() const {
  if (manifest_a.empty() || manifest_b.empty() || manifest_c.empty() || manifest_d.empty())
    throw ConfigError("pipeline config: all four role manifests are required");
  fusion.validate();
  loss.validate();
  teacher_a.validate();
  teacher_b.validate();
  ta.validate();
  student.validate();
  eval.validate();
  std::set<std::string> names;
  for (const auto& subset : ablations.phase_subsets)
    if (!names.insert(subset_name(subset)).second)
      throw ConfigError("pipeline config: duplicate phase subset");
}

std::string pipeline_config_to_json(const PipelineConfig& cfg) {
  return config_json(cfg).dump(2);
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  const ordered_json j = detail::parse_json_text(text, "pipeline config");
  require_keys(
      j, {"version", "seed", "manifests", "fusion", "loss", "train", "eval", "ablations"},
      "pipeline config");
  if (get_req<int>(j, "version", "pipeline config") != 1)
    throw ConfigError("pipeline config: unsupported version");

  PipelineConfig c;
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "pipeline config");
  {
    const auto& jm = j.at("manifests");
    require_keys(jm, {"A", "B", "C", "D"}, "manifests");
    c.manifest_a = get_req<std::string>(jm, "A", "manifests");
    c.manifest_b = get_req<std::string>(jm, "B", "manifests");
    c.manifest_c = get_req<std::string>(jm, "C", "manifests");
    c.manifest_d = get_req<std::string>(jm, "D", "manifests");
  }
  if (j.contains("fusion")) {
    const auto& jf = j.at("fusion");
    require_keys(jf, {"omega0", "omega1", "head_fraction", "axis", "direction"}, "fusion");
    c.fusion.omega0 = get_or(jf, "omega0", c.fusion.omega0, "fusion");
    c.fusion.omega1 = get_or(jf, "omega1", c.fusion.omega1, "fusion");
    c.fusion.head_fraction = get_or(jf, "head_fraction", c.fusion.head_fraction, "fusion");
    c.fusion.axis = get_or(jf, "axis", c.fusion.axis, "fusion");
    if (jf.contains("direction"))
      c.fusion.direction = parse_direction(get_req<std::string>(jf, "direction", "fusion"));
  }
  if (j.contains("loss")) {
    const auto& jl = j.at("loss");
    require_keys(jl, {"dice_weight", "ce_weight", "epsilon", "ce_clamp"}, "loss");
    c.loss.dice_weight = get_or(jl, "dice_weight", c.loss.dice_weight, "loss");
    c.loss.ce_weight = get_or(jl, "ce_weight", c.loss.ce_weight, "loss");
    c.loss.epsilon = get_or(jl, "epsilon", c.loss.epsilon, "loss");
    c.loss.ce_clamp = get_or(jl, "ce_clamp", c.loss.ce_clamp, "loss");
  }
  if (j.contains("train")) {
    const auto& jt = j.at("train");
    require_keys(jt, {"teacher_a", "teacher_b", "ta", "student"}, "train");
    if (jt.contains("teacher_a"))
      c.teacher_a = train_from_json(jt.at("teacher_a"), c.teacher_a, "train.teacher_a");
    if (jt.contains("teacher_b"))
      c.teacher_b = train_from_json(jt.at("teacher_b"), c.teacher_b, "train.teacher_b");
    if (jt.contains("ta")) c.ta = train_from_json(jt.at("ta"), c.ta, "train.ta");
    if (jt.contains("student"))
      c.student = train_from_json(jt.at("student"), c.student, "train.student");
  }
  if (j.contains("eval")) {
    const auto& je = j.at("eval");
    require_keys(je, {"k_folds"}, "eval");
    c.eval.k_folds = get_or(je, "k_folds", c.eval.k_folds, "eval");
  }
  if (j.contains("ablations")) {
    const auto& ja = j.at("ablations");
    require_keys(ja, {"phase_subsets", "self_learn", "self_learn_ta"}, "ablations");
    if (ja.contains("phase_subsets")) {
      c.ablations.phase_subsets.clear();
      for (const auto& js : ja.at("phase_subsets")) {
        std::vector<Phase> subset;
        for (const auto& name : js) {
          try {
            subset.push_back(parse_phase(name.get<std::string>()));
          } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("ablations: ") + e.what());
          }
        }
        c.ablations.phase_subsets.push_back(std::move(subset));
      }
    }
    c.ablations.self_learn = get_or(ja, "self_learn", c.ablations.self_learn, "ablations");
    c.ablations.self_learn_ta =
        get_or(ja, "self_learn_ta", c.ablations.self_learn_ta, "ablations");
  }
  c.validate();
  return c;
}

std::string config_hash(const PipelineConfig& cfg) {
  return hex16(fnv1a64(config_json(cfg).dump()));
}

std::map<std::string, int> crossval_split(const DatasetManifest& manifest, int k,
                                          std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("crossval_split: k must be >= 2");
  if (manifest.cases.size() < static_cast<std::size_t>(k))
    throw std::invalid_argument("crossval_split: fewer cases than folds");
  std::vector<std::string> ids;
  for (const CaseRecord& c : manifest.cases) ids.push_back(c.case_id);
  Rng rng(mix_seed(seed, "crossval"));
  rng.shuffle(ids);
  std::map<std::string, int> fold;
  for (std::size_t i = 0; i < ids.size(); ++i) fold[ids[i]] = static_cast<int>(i % k);
  return fold;
}

LabelMap compose_bootstrap_label(const LabelMap& teacher_b_pred, const LabelMap& manual_tumor) {
  if (!teacher_b_pred.grid.same_shape(manual_tumor.grid))
    throw DataMismatchError("compose_bootstrap_label: dims mismatch");
  LabelMap out;
  out.classes = ClassTable::seg3();
  out.grid = ByteGrid(teacher_b_pred.grid.dims(), teacher_b_pred.grid.spacing(), 0);
  for (std::size_t v = 0; v < out.grid.size(); ++v) {
    // Teacher-B tumor predictions are untrusted on the A role; only its
    // pancreas channel survives, and the manual tumor overrides everything.
    if (teacher_b_pred.grid.flat(v) == ClassTable::kPancreas)
      out.grid.flat(v) = ClassTable::kPancreas;
    if (manual_tumor.grid.flat(v) == ClassTable::kTumor)
      out.grid.flat(v) = ClassTable::kTumor;
  }
  return out;
}

DatasetManifest bootstrap_pancreas_labels(const DatasetManifest& dataset_a,
                                          const LinearSoftmaxModel& teacher_b,
                                          const std::filesystem::path& label_dir,
                                          std::vector<std::string>* skipped) {
  namespace fs = std::filesystem;
  fs::create_directories(label_dir);
  DatasetManifest out = dataset_a;
  for (CaseRecord& rec : out.cases) {
    const auto venous_it = rec.phase_files.find(Phase::venous);
    if (venous_it == rec.phase_files.end()) {
      if (skipped) skipped->push_back(rec.case_id);
      continue;
    }
    std::map<Phase, ImageGrid> images;
    images.emplace(Phase::venous, read_rvol_image(out.resolve(venous_it->second)));
    const Prediction pred = predict(teacher_b, images, /*postprocess=*/true);
    const auto tumor_it = rec.annotations.find("tumor");
    if (tumor_it == rec.annotations.end())
      throw DatasetError("case '" + rec.case_id + "' lacks the manual tumor annotation");
    const LabelMap manual = read_rvol_labels(out.resolve(tumor_it->second.path));
    const LabelMap composed = compose_bootstrap_label(*pred.labels, manual);
    const fs::path path = label_dir / (rec.case_id + "_seg.rvol");
    write_rvol(path, composed);
    rec.set_annotation("seg", fs::absolute(path).generic_string(), Provenance::bootstrapped);
  }
  return out;
}

// ---------------------------------------------------------------------------
// run_pipeline
// ---------------------------------------------------------------------------

namespace {

struct LoadedCase {
  const CaseRecord* rec = nullptr;
  const DatasetManifest* manifest = nullptr;
};

std::map<Phase, ImageGrid> load_images(const DatasetManifest& m, const CaseRecord& rec,
                                       const std::vector<Phase>& phases) {
  std::map<Phase, ImageGrid> images;
  for (Phase p : phases) {
    const auto it = rec.phase_files.find(p);
    if (it == rec.phase_files.end()) throw MissingPhaseError(phase_name(p));
    images.emplace(p, read_rvol_image(m.resolve(it->second)));
  }
  return images;
}

LabelMap load_annotation(const DatasetManifest& m, const CaseRecord& rec,
                         const std::string& kind) {
  const auto it = rec.annotations.find(kind);
  if (it == rec.annotations.end())
    throw DatasetError("case '" + rec.case_id + "' lacks annotation '" + kind + "'");
  return read_rvol_labels(m.resolve(it->second.path));
}

LabelMap load_truth(const DatasetManifest& m, const std::string& case_id,
                    const std::string& file) {
  return read_rvol_labels(m.root / case_id / file);
}

std::vector<Phase> all_phases_vec() {
  return {Phase::non_contrast, Phase::pancreatic, Phase::venous};
}

struct StageClock {
  ordered_json& timings;
  std::string name;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  ~StageClock() {
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - start)
                        .count();
    timings.push_back({{"stage", name}, {"ms", ms}});
  }
};

struct ModelBundle {
  LinearSoftmaxModel model;
  std::string hash;
};

/// Trains, saves the model + its training log, and records summary/log JSON.
ModelBundle train_and_record(const std::string& name,
                             const std::vector<TrainingExample>& examples,
                             const ClassTable& classes, const FeatureConfig& features,
                             TrainConfig tc, const LossConfig& loss,
                             std::uint64_t fold_seed, const std::filesystem::path& model_dir,
                             ordered_json& training_json) {
  tc.seed = mix_seed(fold_seed, name);
  const TrainResult res = train(examples, classes, features, tc, loss);

  ModelBundle out;
  out.model = res.model;
  out.hash = hex16(weight_hash(res.model));
  save_model(res.model, model_dir / (name + ".json"));

  ordered_json log;
  log["selected_epoch"] = res.log.selected_epoch;
  log["selected_metric"] = res.log.selected_metric;
  log["train_cases"] = res.log.train_case_ids;
  log["val_cases"] = res.log.val_case_ids;
  log["warnings"] = res.log.warnings;
  ordered_json epochs = ordered_json::array();
  for (const EpochRecord& e : res.log.epochs)
    epochs.push_back(
        {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dice", e.val_dice}});
  log["epochs"] = std::move(epochs);
  {
    std::ofstream f(model_dir / (name + ".log.json"), std::ios::binary);
    f << log.dump(2) << '\n';
  }
  ordered_json summary;
  summary["selected_epoch"] = res.log.selected_epoch;
  summary["selected_metric"] = res.log.selected_metric;
  summary["warnings"] = res.log.warnings;
  training_json[name] = std::move(summary);
  return out;
}

std::string zero_init_hash(const ClassTable& classes, const FeatureConfig& features) {
  LinearSoftmaxModel m;
  m.classes = classes;
  m.features = features;
  m.feat_mean.assign(features.feature_count(), 0.0);
  m.feat_std.assign(features.feature_count(), 1.0);
  m.weights.assign(classes.size() * features.feature_count(), 0.0);
  return hex16(weight_hash(m));
}

}  // namespace

RunResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_root) {
  namespace fs = std::filesystem;
  cfg.validate();
  const std::string hash = config_hash(cfg);
  const fs::path run_dir = out_root / ("run-" + hash);
  if (fs::exists(run_dir) && !fs::is_empty(run_dir))
    throw CollisionError("run directory '" + run_dir.string() + "' is not empty");
  fs::create_directories(run_dir);

  ordered_json report;
  report["format"] = "selfseg-run-report";
  report["version"] = 1;
  report["config"] = config_json(cfg);
  report["config_hash"] = hash;
  ordered_json stages = ordered_json::array();
  ordered_json folds_json = ordered_json::array();
  ordered_json timings = ordered_json::array();

  auto run_stage = [&](const std::string& name, const auto& fn) {
    StageClock clock{timings, name};
    try {
      fn();
    } catch (const std::exception& e) {
      stages.push_back({{"name", name}, {"status", "failed"}});
      report["stages"] = stages;
      report["folds"] = folds_json;
      std::ofstream f(run_dir / "run_report.json", std::ios::binary);
      f << report.dump(2) << '\n';
      throw StageError(name, e.what());
    }
    stages.push_back({{"name", name}, {"status", "ok"}});
  };

  // Load and sanity-check the four role manifests.
  DatasetManifest man_a, man_b, man_c, man_d;
  run_stage("load_manifests", [&] {
    man_a = load_manifest(cfg.manifest_a);
    man_b = load_manifest(cfg.manifest_b);
    man_c = load_manifest(cfg.manifest_c);
    man_d = load_manifest(cfg.manifest_d);
    for (const auto* m : {&man_a, &man_b, &man_c, &man_d}) m->validate();
    const auto check_role = [](const DatasetManifest& m, Role want, const char* which) {
      for (const CaseRecord& c : m.cases)
        if (c.role != want)
          throw DataMismatchError(std::string("manifest ") + which + ": case '" + c.case_id +
                                  "' has role " + role_name(c.role));
    };
    check_role(man_a, Role::A, "A");
    check_role(man_b, Role::B, "B");
    check_role(man_c, Role::C, "C");
    check_role(man_d, Role::D, "D");
  });

  const int k = cfg.eval.k_folds;
  std::map<std::string, int> fold_of;
  run_stage("crossval_split", [&] { fold_of = crossval_split(man_a, k, cfg.seed); });
  for (CaseRecord& c : man_a.cases) c.fold = fold_of.at(c.case_id);

  // Row plan: teachers in config order, then the student variants.
  struct RowPlan {
    std::string method;
    std::string roles;
    std::string model_key;        // per-fold model name
    std::vector<Phase> phases;    // inference inputs
  };
  std::vector<RowPlan> plan;
  bool have_all3_subset = false;
  for (const auto& subset : cfg.ablations.phase_subsets) {
    const std::string name = subset_name(subset);
    if (is_all_phases(subset)) have_all3_subset = true;
    plan.push_back({"teacher:" + name, "A", "teacher_" + name, canonical_subset(subset)});
  }
  const bool need_teacher_a = have_all3_subset || cfg.ablations.self_learn;
  if (cfg.ablations.self_learn)
    plan.push_back(
        {"student:self-learn", "A+C", "student_self_learn", all_phases_vec()});
  if (cfg.ablations.self_learn_ta)
    plan.push_back({cfg.ablations.self_learn ? "student:self-learn+ta" : "student:ta-only",
                    cfg.ablations.self_learn ? "A+C" : "A", "student_self_learn_ta",
                    all_phases_vec()});

  std::vector<AblationRow> rows(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    rows[i].method = plan[i].method;
    rows[i].training_roles = plan[i].roles;
  }

  const std::string all3_key = "teacher_" + subset_name(all_phases_vec());

  for (int f = 0; f < k; ++f) {
    const std::string fold_tag = "fold_" + std::to_string(f);
    const fs::path fold_dir = run_dir / fold_tag;
    const fs::path model_dir = fold_dir / "models";
    fs::create_directories(model_dir);
    fs::create_directories(fold_dir / "labels");
    const std::uint64_t fold_seed = mix_seed(mix_seed(cfg.seed, "fold"), (std::uint64_t)f);

    ordered_json fj;
    fj["fold"] = f;
    ordered_json training_json = ordered_json::object();
    ordered_json hashes = ordered_json::object();

    std::vector<const CaseRecord*> test_cases, train_a_cases;
    for (const CaseRecord& c : man_a.cases)
      (c.fold == f ? test_cases : train_a_cases).push_back(&c);
    {
      std::vector<std::string> ids;
      for (auto* c : test_cases) ids.push_back(c->case_id);
      fj["test_cases"] = ids;
      ids.clear();
      for (auto* c : train_a_cases) ids.push_back(c->case_id);
      fj["train_cases"] = ids;
    }

    std::map<std::string, ModelBundle> models;

    // (1) Teacher B on the B role, venous only.
    run_stage(fold_tag + "/teacher_b", [&] {
      std::vector<TrainingExample> examples;
      for (const CaseRecord& c : man_b.cases) {
        TrainingExample ex;
        ex.id = c.case_id;
        ex.images = load_images(man_b, c, {Phase::venous});
        ex.labels = load_annotation(man_b, c, "seg");
        examples.push_back(std::move(ex));
      }
      models["teacher_b"] =
          train_and_record("teacher_b", examples, ClassTable::seg3(),
                           FeatureConfig{1, {Phase::venous}}, cfg.teacher_b, cfg.loss,
                           fold_seed, model_dir, training_json);
    });

    // (2) Bootstrap pancreas labels on the A-role training split.
    DatasetManifest man_a_fold;
    std::vector<std::string> boot_skipped;
    run_stage(fold_tag + "/bootstrap", [&] {
      man_a_fold.root = man_a.root;
      man_a_fold.spec_hash = man_a.spec_hash;
      for (auto* c : train_a_cases) man_a_fold.cases.push_back(*c);
      man_a_fold = bootstrap_pancreas_labels(man_a_fold, models.at("teacher_b").model,
                                             fold_dir / "labels", &boot_skipped);
    });
    fj["bootstrap_skipped"] = boot_skipped;

    // (3) Phase-subset teachers on A (composed labels), incl. Teacher A.
    std::vector<TrainingExample> a_examples;
    run_stage(fold_tag + "/teachers_a", [&] {
      for (const CaseRecord& c : man_a_fold.cases) {
        TrainingExample ex;
        ex.id = c.case_id;
        ex.images = load_images(man_a_fold, c, all_phases_vec());
        ex.labels = load_annotation(man_a_fold, c, "seg");
        a_examples.push_back(std::move(ex));
      }
      for (const auto& subset : cfg.ablations.phase_subsets) {
        const std::string key = "teacher_" + subset_name(subset);
        models[key] =
            train_and_record(key, a_examples, ClassTable::seg3(),
                             FeatureConfig{1, canonical_subset(subset)}, cfg.teacher_a,
                             cfg.loss, fold_seed, model_dir, training_json);
      }
      if (need_teacher_a && !models.count(all3_key))
        models[all3_key] =
            train_and_record(all3_key, a_examples, ClassTable::seg3(),
                             FeatureConfig{1, all_phases_vec()}, cfg.teacher_a, cfg.loss,
                             fold_seed, model_dir, training_json);
    });

    // (4) Pseudo-label the C role by fusing the two teachers.
    DatasetManifest man_c_fold;
    man_c_fold.root = man_c.root;
    man_c_fold.spec_hash = man_c.spec_hash;
    for (const CaseRecord& c : man_c.cases) man_c_fold.cases.push_back(c);
    ordered_json pseudo_diag = ordered_json::object();
    if (cfg.ablations.self_learn) {
      run_stage(fold_tag + "/pseudo_labels", [&] {
        const fs::path pseudo_dir = fold_dir / "pseudo";
        fs::create_directories(pseudo_dir);
        for (CaseRecord& c : man_c_fold.cases) {
          const auto images = load_images(man_c_fold, c, all_phases_vec());
          std::map<Phase, ImageGrid> venous_only;
          venous_only.emplace(Phase::venous, images.at(Phase::venous));
          const ProbMap pa = predict(models.at(all3_key).model, images, false).probs;
          const ProbMap pb = predict(models.at("teacher_b").model, venous_only, false).probs;
          PseudoLabelResult res = make_pseudo_labels(pa, pb, cfg.fusion);
          const fs::path path = pseudo_dir / (c.case_id + "_seg.rvol");
          write_rvol(path, res.pseudo);
          c.set_annotation("seg", fs::absolute(path).generic_string(), Provenance::pseudo);
          ordered_json d;
          d["head_slab"] = {res.diagnostics.head_start, res.diagnostics.head_end};
          ordered_json cv = ordered_json::object();
          for (const auto& [cls, count] : res.diagnostics.class_voxels)
            cv[res.pseudo.classes.name(cls)] = count;
          d["class_voxels"] = std::move(cv);
          d["weights"] = {{"w0", res.diagnostics.omega0}, {"w1", res.diagnostics.omega1}};
          pseudo_diag[c.case_id] = std::move(d);
        }
      });
    }
    fj["pseudo_diagnostics"] = pseudo_diag;

    // (5) Teaching assistant on the D role.
    if (cfg.ablations.self_learn_ta) {
      run_stage(fold_tag + "/teaching_assistant", [&] {
        std::vector<TrainingExample> examples;
        for (const CaseRecord& c : man_d.cases) {
          TrainingExample ex;
          ex.id = c.case_id;
          ex.images = load_images(man_d, c, all_phases_vec());
          ex.labels = load_annotation(man_d, c, "ta");
          examples.push_back(std::move(ex));
        }
        TrainConfig tc = cfg.ta;
        if (tc.selection_class_ids.empty())
          tc.selection_class_ids = {ClassTable::kPortalSplenicVein, ClassTable::kSmv,
                                    ClassTable::kSma, ClassTable::kTruncusCoeliacus};
        models["ta"] = train_and_record("ta", examples, ClassTable::ta6(),
                                        FeatureConfig{1, all_phases_vec()}, tc, cfg.loss,
                                        fold_seed, model_dir, training_json);
      });
    }

    // (6) TA refinement of the C pseudo labels and the A bootstrapped labels.
    DatasetManifest man_a_refined = man_a_fold;
    DatasetManifest man_c_refined = man_c_fold;
    ordered_json refine_json = ordered_json::object();
    if (cfg.ablations.self_learn_ta) {
      run_stage(fold_tag + "/refine", [&] {
        const auto ta_paint = [&](const DatasetManifest& m, const CaseRecord& c) {
          const auto images = load_images(m, c, all_phases_vec());
          // Hardened by argmax only; the vessels are several separate
          // structures, so no largest-component filtering here.
          return argmax_labels(predict(models.at("ta").model, images, false).probs);
        };

        ordered_json ja = ordered_json::object();
        for (CaseRecord& c : man_a_refined.cases) {
          const LabelMap current = load_annotation(man_a_refined, c, "seg");
          const RefineResult res = refine_pseudo(current, ta_paint(man_a_refined, c));
          const fs::path path = fold_dir / "labels" / (c.case_id + "_seg_refined.rvol");
          write_rvol(path, res.refined);
          c.set_annotation("seg", fs::absolute(path).generic_string(),
                           Provenance::refined_pseudo);
          ordered_json masked = ordered_json::object();
          for (const auto& [cls, count] : res.stats.masked_by_class)
            masked[ClassTable::ta6().name(cls)] = count;
          ja[c.case_id] = {{"masked_voxels", res.stats.total_masked()},
                           {"masked_by_class", std::move(masked)}};
        }
        refine_json["A"] = std::move(ja);

        if (cfg.ablations.self_learn) {
          std::size_t overlap_before_total = 0, overlap_after_total = 0;
          std::size_t tumor_changed_total = 0;
          ordered_json jc = ordered_json::object();
          for (CaseRecord& c : man_c_refined.cases) {
            const LabelMap pseudo = load_annotation(man_c_refined, c, "seg");
            const RefineResult res = refine_pseudo(pseudo, ta_paint(man_c_refined, c));
            const fs::path path =
                fold_dir / "pseudo" / (c.case_id + "_seg_refined.rvol");
            write_rvol(path, res.refined);
            c.set_annotation("seg", fs::absolute(path).generic_string(),
                             Provenance::refined_pseudo);

            // Vessel-overlap accounting against the phantom ground truth.
            const LabelMap truth_ta = load_truth(man_c, c.case_id, "truth_ta.rvol");
            std::size_t before = 0, after = 0, tumor_changed = 0;
            for (std::size_t v = 0; v < pseudo.grid.size(); ++v) {
              const bool vessel =
                  truth_ta.grid.flat(v) >= ClassTable::kPortalSplenicVein;
              if (vessel && pseudo.grid.flat(v) == ClassTable::kPancreas) ++before;
              if (vessel && res.refined.grid.flat(v) == ClassTable::kPancreas) ++after;
              const bool was_tumor = pseudo.grid.flat(v) == ClassTable::kTumor;
              const bool is_tumor = res.refined.grid.flat(v) == ClassTable::kTumor;
              if (was_tumor != is_tumor) ++tumor_changed;
            }
            overlap_before_total += before;
            overlap_after_total += after;
            tumor_changed_total += tumor_changed;
            ordered_json masked = ordered_json::object();
            for (const auto& [cls, count] : res.stats.masked_by_class)
              masked[ClassTable::ta6().name(cls)] = count;
            jc[c.case_id] = {{"masked_voxels", res.stats.total_masked()},
                             {"masked_by_class", std::move(masked)},
                             {"truth_vessel_overlap_before", before},
                             {"truth_vessel_overlap_after", after},
                             {"tumor_voxels_changed", tumor_changed}};
          }
          refine_json["C"] = std::move(jc);
          refine_json["C_totals"] = {
              {"truth_vessel_overlap_before", overlap_before_total},
              {"truth_vessel_overlap_after", overlap_after_total},
              {"tumor_voxels_changed", tumor_changed_total}};
        }
      });
    }
    fj["refinement"] = refine_json;

    // (7) Students, always freshly initialized.
    ordered_json students_json = ordered_json::object();
    const auto train_student = [&](const std::string& name, const DatasetManifest& a_man,
                                   const DatasetManifest* c_man, Provenance a_prov,
                                   Provenance c_prov) {
      std::vector<TrainingExample> examples;
      ordered_json consumed = ordered_json::object();
      for (const CaseRecord& c : a_man.cases) {
        const Provenance got = c.annotations.at("seg").provenance;
        if (got != a_prov)
          throw DatasetError("student '" + name + "': A case '" + c.case_id +
                             "' has provenance " + provenance_name(got) + ", expected " +
                             provenance_name(a_prov));
        TrainingExample ex;
        ex.id = c.case_id;
        ex.images = load_images(a_man, c, all_phases_vec());
        ex.labels = load_annotation(a_man, c, "seg");
        examples.push_back(std::move(ex));
      }
      consumed["A"] = provenance_name(a_prov);
      if (c_man != nullptr) {
        for (const CaseRecord& c : c_man->cases) {
          const Provenance got = c.annotations.at("seg").provenance;
          if (got != c_prov)
            throw DatasetError("student '" + name + "': C case '" + c.case_id +
                               "' has provenance " + provenance_name(got) + ", expected " +
                               provenance_name(c_prov));
          TrainingExample ex;
          ex.id = c.case_id;
          ex.images = load_images(*c_man, c, all_phases_vec());
          ex.labels = load_annotation(*c_man, c, "seg");
          examples.push_back(std::move(ex));
        }
        consumed["C"] = provenance_name(c_prov);
      }
      models[name] = train_and_record(name, examples, ClassTable::seg3(),
                                      FeatureConfig{1, all_phases_vec()}, cfg.student,
                                      cfg.loss, fold_seed, model_dir, training_json);

      // Fresh-initialization audit: the student must be a new zero-init fit,
      // not a warm-started or copied teacher.
      const std::string init_hash =
          zero_init_hash(ClassTable::seg3(), FeatureConfig{1, all_phases_vec()});
      bool fresh = models.at(name).hash != init_hash;
      for (const auto& [key, bundle] : models)
        if (key.rfind("teacher", 0) == 0 && bundle.hash == models.at(name).hash)
          fresh = false;
      students_json[name] = {{"init_hash", init_hash},
                             {"fresh_init", fresh},
                             {"label_provenance", std::move(consumed)}};
    };
    if (cfg.ablations.self_learn) {
      run_stage(fold_tag + "/student_self_learn", [&] {
        train_student("student_self_learn", man_a_fold, &man_c_fold, Provenance::bootstrapped,
                      Provenance::pseudo);
      });
    }
    if (cfg.ablations.self_learn_ta) {
      run_stage(fold_tag + "/student_self_learn_ta", [&] {
        train_student("student_self_learn_ta", man_a_refined,
                      cfg.ablations.self_learn ? &man_c_refined : nullptr,
                      Provenance::refined_pseudo, Provenance::refined_pseudo);
      });
    }
    fj["students"] = students_json;

    // Leakage audit: held-out ids must be absent from every training set.
    {
      std::set<std::string> train_ids;
      for (const CaseRecord& c : man_a_fold.cases) train_ids.insert(c.case_id);
      for (const CaseRecord& c : man_b.cases) train_ids.insert(c.case_id);
      for (const CaseRecord& c : man_c.cases) train_ids.insert(c.case_id);
      for (const CaseRecord& c : man_d.cases) train_ids.insert(c.case_id);
      std::vector<std::string> violations;
      for (auto* c : test_cases)
        if (train_ids.count(c->case_id)) violations.push_back(c->case_id);
      fj["leakage_audit"] = {{"ok", violations.empty()}, {"violations", violations}};
      if (!violations.empty())
        throw StageError(fold_tag + "/leakage_audit",
                         "held-out case appears in a training set");
    }

    // (8) Evaluate every planned row on the held-out A cases.
    run_stage(fold_tag + "/evaluate", [&] {
      for (std::size_t i = 0; i < plan.size(); ++i) {
        const ModelBundle& bundle = models.at(plan[i].model_key);
        for (const CaseRecord* c : test_cases) {
          const auto images = load_images(man_a, *c, plan[i].phases);
          const Prediction pred = predict(bundle.model, images, /*postprocess=*/true);
          const LabelMap truth = load_truth(man_a, c->case_id, "truth_seg.rvol");
          rows[i].tumor_dice.push_back(dice(*pred.labels, truth, ClassTable::kTumor));
          rows[i].pancreas_dice.push_back(dice(*pred.labels, truth, ClassTable::kPancreas));
        }
      }
    });

    for (const auto& [key, bundle] : models) hashes[key] = bundle.hash;
    fj["model_hashes"] = std::move(hashes);
    fj["training"] = std::move(training_json);
    folds_json.push_back(std::move(fj));
  }

  AblationTable table;
  table.rows = rows;

  report["stages"] = stages;
  report["folds"] = folds_json;
  report["ablation"] = detail::parse_json_text(report_json(table), "ablation table");
  {
    std::ofstream f(run_dir / "run_report.json", std::ios::binary);
    if (!f) throw DatasetError("cannot write run_report.json");
    f << report.dump(2) << '\n';
  }
  emit_report(table, ReportFormat::markdown, run_dir / "report.md");
  emit_report(table, ReportFormat::csv, run_dir / "report.csv");
  {
    std::ofstream f(run_dir / "timings.json", std::ios::binary);
    f << timings.dump(2) << '\n';
  }
  return RunResult{run_dir, std::move(table)};
}

AblationTable run_ablations(const PipelineConfig& cfg, const std::filesystem::path& out_root) {
  return run_pipeline(cfg, out_root).table;
}

}  // namespace selfseg
