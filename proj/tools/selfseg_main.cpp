// selfseg: phantom generation, pipeline runs, and Dice evaluation.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"
#include "selfseg/metrics.hpp"
#include "selfseg/phantom.hpp"
#include "selfseg/pipeline.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/rvol.hpp"

namespace {

using nlohmann::ordered_json;

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw selfseg::ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, bool overwrite) {
  ordered_json j;
  try {
    j = ordered_json::parse(slurp(config_path));
  } catch (const ordered_json::parse_error& e) {
    throw selfseg::ConfigError(std::string("gen config: ") + e.what());
  }
  if (!j.is_object()) throw selfseg::ConfigError("gen config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key != "version" && key != "spec" && key != "counts")
      throw selfseg::ConfigError("gen config: unknown field '" + key + "'");
  }
  if (!j.contains("version") || !j.at("version").is_number_integer() ||
      j.at("version").get<int>() != 1)
    throw selfseg::ConfigError("gen config: field 'version' must be 1");

  selfseg::PhantomSpec spec;
  if (j.contains("spec")) spec = selfseg::phantom_spec_from_json(j.at("spec").dump());
  spec.validate();

  std::map<std::string, int> counts{{"A", 20}, {"B", 15}, {"C", 20}, {"D", 10}};
  if (j.contains("counts")) {
    for (const auto& [role, n] : j.at("counts").items()) {
      if (!counts.count(role))
        throw selfseg::ConfigError("gen config: unknown role '" + role + "'");
      if (!n.is_number_integer() || n.get<int>() < 1)
        throw selfseg::ConfigError("gen config: counts." + role + " must be a positive integer");
      counts[role] = n.get<int>();
    }
  }

  const std::uint64_t dataset_base = selfseg::mix_seed(spec.seed, "dataset");
  for (const auto& [role_str, n] : counts) {
    const selfseg::Role role = selfseg::parse_role(role_str);
    const std::filesystem::path role_dir = std::filesystem::path(out_dir) / role_str;
    const std::uint64_t dataset_seed = selfseg::mix_seed(dataset_base, role_str);
    selfseg::generate_dataset(spec, role, n, dataset_seed, role_dir, overwrite);
    std::cout << (role_dir / "manifest.json").generic_string() << "\n";
  }
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
  const selfseg::PipelineConfig cfg = selfseg::pipeline_config_from_json(slurp(config_path));
  const selfseg::RunResult res = selfseg::run_pipeline(cfg, out_dir);
  std::cout << selfseg::report_markdown(res.table);
  std::cerr << "run dir: " << res.run_dir.generic_string() << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& truth_path, int class_filter) {
  namespace fs = std::filesystem;
  for (const std::string& p : {pred_path, truth_path})
    if (!fs::exists(p)) throw selfseg::ConfigError("no such file: '" + p + "'");
  const selfseg::LabelMap pred = selfseg::read_rvol_labels(pred_path);
  const selfseg::LabelMap truth = selfseg::read_rvol_labels(truth_path);

  ordered_json out = ordered_json::object();
  for (std::size_t id = 1; id < truth.classes.size(); ++id) {
    const auto cls = static_cast<std::uint8_t>(id);
    if (class_filter >= 0 && cls != class_filter) continue;
    out[truth.classes.name(cls)] = selfseg::dice(pred, truth, cls);
  }
  if (class_filter >= 0 && out.empty())
    throw selfseg::DataMismatchError("class id " + std::to_string(class_filter) +
                                     " is not a foreground class of the truth volume");
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-teacher self-learning segmentation pipeline"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "cap worker threads (0 = hardware)");

  std::string gen_config, gen_out;
  bool gen_overwrite = false;
  CLI::App* gen = app.add_subcommand("gen", "generate phantom role datasets");
  gen->add_option("--config", gen_config, "phantom+roles config (JSON)")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--overwrite", gen_overwrite, "replace existing role datasets");

  std::string run_config, run_out;
  CLI::App* run = app.add_subcommand("run", "execute the full pipeline");
  run->add_option("--config", run_config, "pipeline config (JSON)")->required();
  run->add_option("--out", run_out, "run output root")->required();

  std::string eval_pred, eval_truth;
  int eval_class = -1;
  CLI::App* eval = app.add_subcommand("eval", "Dice between two label volumes");
  eval->add_option("--pred", eval_pred, "predicted labels (rvol)")->required();
  eval->add_option("--truth", eval_truth, "reference labels (rvol)")->required();
  eval->add_option("--class", eval_class, "restrict to one class id");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (threads < 0) {
    std::cerr << "error: --threads must be >= 0\n";
    return 2;
  }
  if (threads > 0) setenv("SELFSEG_THREADS", std::to_string(threads).c_str(), 1);

  try {
    if (gen->parsed()) return cmd_gen(gen_config, gen_out, gen_overwrite);
    if (run->parsed()) return cmd_run(run_config, run_out);
    if (eval->parsed()) return cmd_eval(eval_pred, eval_truth, eval_class);
  } catch (const selfseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const selfseg::CollisionError& e) {
    std::cerr << "collision: " << e.what() << "\n";
    return 3;
  } catch (const selfseg::MissingPhaseError& e) {
    std::cerr << "data mismatch: " << e.what() << "\n";
    return 4;
  } catch (const selfseg::DataMismatchError& e) {
    std::cerr << "data mismatch: " << e.what() << "\n";
    return 4;
  } catch (const selfseg::StageError& e) {
    std::cerr << "stage failed: " << e.stage << "\n" << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
