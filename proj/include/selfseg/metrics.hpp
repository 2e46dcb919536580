#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "selfseg/grid.hpp"

namespace selfseg {

/// Dice overlap of one class: 2|P∩G| / (|P|+|G|). Both sets empty -> 1.0,
/// exactly one empty -> 0.0. Throws std::invalid_argument on dims mismatch or
/// a class id outside either table.
double dice(const LabelMap& pred, const LabelMap& truth, std::uint8_t class_id);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // population (n) denominator
  double median = 0.0;
};

/// Mean, population std, median (mean of central pair for even n).
/// Throws std::invalid_argument on an empty list.
Summary summarize(const std::vector<double>& values);

struct AblationRow {
  std::string method;
  std::string training_roles;         // e.g. "A" or "A+C"
  std::vector<double> tumor_dice;     // per evaluation case, pooled over folds
  std::vector<double> pancreas_dice;  // same order

  Summary tumor_summary() const { return summarize(tumor_dice); }
  Summary pancreas_summary() const { return summarize(pancreas_dice); }
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

enum class ReportFormat { json, markdown, csv };
ReportFormat parse_report_format(const std::string& name);  // throws std::invalid_argument

/// Renderers. JSON carries per-case values at full precision; markdown and
/// csv show the summary columns rounded to 4 decimals.
std::string report_json(const AblationTable& table);
std::string report_markdown(const AblationTable& table);
std::string report_csv(const AblationTable& table);

void emit_report(const AblationTable& table, ReportFormat format,
                 const std::filesystem::path& path);

/// Re-reads a JSON report produced by emit_report (exact round-trip).
AblationTable load_report_json(const std::filesystem::path& path);
AblationTable report_from_json(const std::string& text);

}  // namespace selfseg
