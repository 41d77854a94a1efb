#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace elvc::eval {

struct EvalRow {
  std::string system_id;
  std::string inputs;
  std::string outputs;
  std::string pretraining;
  double mcd_db = 0.0;
  double cer_pct = 0.0;
  double f0_rmse = 0.0;  ///< cents
  double f0_corr = 0.0;
  std::size_t utterances = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// Fixed-width text table with one row per system.
  std::string render_table() const;
  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
};

/// Throws InvalidInput if any metric is non-finite or out of range.
void validate_row(const EvalRow& row);

}  // namespace elvc::eval
