#include "selfseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"

namespace selfseg {

namespace {
using ordered_json = nlohmann::ordered_json;

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}
}  // namespace

double dice(const LabelMap& pred, const LabelMap& truth, std::uint8_t class_id) {
  if (!pred.grid.same_shape(truth.grid))
    throw std::invalid_argument("dice: dims mismatch");
  if (class_id >= pred.classes.size() || class_id >= truth.classes.size())
    throw std::invalid_argument("dice: unknown class id " + std::to_string(int(class_id)));
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t v = 0; v < pred.grid.size(); ++v) {
    const bool in_p = pred.grid.flat(v) == class_id;
    const bool in_g = truth.grid.flat(v) == class_id;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("summarize: empty list");
  Summary s;
  const double n = static_cast<double>(values.size());
  double acc = 0.0;
  for (double v : values) acc += v;
  s.mean = acc / n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / n);
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  s.median = m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  return s;
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "json") return ReportFormat::json;
  if (name == "markdown") return ReportFormat::markdown;
  if (name == "csv") return ReportFormat::csv;
  throw std::invalid_argument("unknown report format '" + name + "'");
}

namespace {
void require_rows(const AblationTable& table) {
  if (table.rows.empty()) throw std::invalid_argument("report requires a non-empty table");
}
}  // namespace

std::string report_json(const AblationTable& table) {
  require_rows(table);
  ordered_json j;
  j["format"] = "selfseg-report";
  j["version"] = 1;
  j["rows"] = ordered_json::array();
  for (const AblationRow& r : table.rows) {
    const Summary t = r.tumor_summary();
    const Summary p = r.pancreas_summary();
    ordered_json jr;
    jr["method"] = r.method;
    jr["training_roles"] = r.training_roles;
    jr["tumor_dice"] = {{"mean", t.mean},
                        {"std", t.stddev},
                        {"median", t.median},
                        {"per_case", r.tumor_dice}};
    jr["pancreas_dice"] = {{"mean", p.mean},
                           {"std", p.stddev},
                           {"median", p.median},
                           {"per_case", r.pancreas_dice}};
    j["rows"].push_back(std::move(jr));
  }
  return j.dump(2);
}

std::string report_markdown(const AblationTable& table) {
  require_rows(table);
  std::ostringstream os;
  os << "| Method | Training data | Tumor Dice (mean±std) | Tumor Dice (median) | "
        "Pancreas Dice (mean±std) |\n";
  os << "| --- | --- | --- | --- | --- |\n";
  for (const AblationRow& r : table.rows) {
    const Summary t = r.tumor_summary();
    const Summary p = r.pancreas_summary();
    os << "| " << r.method << " | " << r.training_roles << " | " << fmt4(t.mean) << " ± "
       << fmt4(t.stddev) << " | " << fmt4(t.median) << " | " << fmt4(p.mean) << " ± "
       << fmt4(p.stddev) << " |\n";
  }
  return os.str();
}

std::string report_csv(const AblationTable& table) {
  require_rows(table);
  std::ostringstream os;
  os << "method,training_roles,tumor_dice_mean,tumor_dice_std,tumor_dice_median,"
        "pancreas_dice_mean,pancreas_dice_std\n";
  for (const AblationRow& r : table.rows) {
    const Summary t = r.tumor_summary();
    const Summary p = r.pancreas_summary();
    os << r.method << ',' << r.training_roles << ',' << fmt4(t.mean) << ',' << fmt4(t.stddev)
       << ',' << fmt4(t.median) << ',' << fmt4(p.mean) << ',' << fmt4(p.stddev) << '\n';
  }
  return os.str();
}

void emit_report(const AblationTable& table, ReportFormat format,
                 const std::filesystem::path& path) {
  if (table.rows.empty()) throw std::invalid_argument("emit_report: empty table");
  std::string text;
  switch (format) {
    case ReportFormat::json: text = report_json(table) + "\n"; break;
    case ReportFormat::markdown: text = report_markdown(table); break;
    case ReportFormat::csv: text = report_csv(table); break;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DatasetError("failed writing report '" + path.string() + "'");
}

AblationTable report_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("malformed report JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "selfseg-report")
      throw ConfigError("not a report file");
    if (j.at("version").get<int>() != 1) throw ConfigError("unsupported report version");
    AblationTable table;
    for (const auto& jr : j.at("rows")) {
      AblationRow r;
      r.method = jr.at("method").get<std::string>();
      r.training_roles = jr.at("training_roles").get<std::string>();
      r.tumor_dice = jr.at("tumor_dice").at("per_case").get<std::vector<double>>();
      r.pancreas_dice = jr.at("pancreas_dice").at("per_case").get<std::vector<double>>();
      table.rows.push_back(std::move(r));
    }
    return table;
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("malformed report JSON: ") + e.what());
  }
}

AblationTable load_report_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open report '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

}  // namespace selfseg
