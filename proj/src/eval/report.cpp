#include "elvc/eval/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "elvc/core/error.hpp"

namespace elvc::eval {

void validate_row(const EvalRow& row) {
  const bool finite = std::isfinite(row.mcd_db) && std::isfinite(row.cer_pct) && std::isfinite(row.f0_rmse) &&
                      std::isfinite(row.f0_corr);
  require(finite, ErrorCode::InvalidInput, row.system_id + ": non-finite metric");
  require(row.cer_pct >= 0.0 && row.mcd_db >= 0.0, ErrorCode::InvalidInput, row.system_id + ": negative metric");
  require(row.f0_corr >= -1.0 && row.f0_corr <= 1.0, ErrorCode::InvalidInput, row.system_id + ": f0_corr out of range");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["f0_rmse_unit"] = "cents";
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"system_id", r.system_id},
                         {"inputs", r.inputs},
                         {"outputs", r.outputs},
                         {"pretraining", r.pretraining},
                         {"mcd_db", r.mcd_db},
                         {"cer_pct", r.cer_pct},
                         {"f0_rmse", r.f0_rmse},
                         {"f0_corr", r.f0_corr},
                         {"utterances", r.utterances}});
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport rep;
  for (const auto& r : j.at("rows")) {
    EvalRow row;
    row.system_id = r.at("system_id").get<std::string>();
    row.inputs = r.at("inputs").get<std::string>();
    row.outputs = r.at("outputs").get<std::string>();
    row.pretraining = r.at("pretraining").get<std::string>();
    row.mcd_db = r.at("mcd_db").get<double>();
    row.cer_pct = r.at("cer_pct").get<double>();
    row.f0_rmse = r.at("f0_rmse").get<double>();
    row.f0_corr = r.at("f0_corr").get<double>();
    row.utterances = r.value("utterances", std::size_t{0});
    rep.rows.push_back(row);
  }
  return rep;
}

std::string EvalReport::render_table() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-14s %-8s %-8s %-12s %9s %8s %15s %9s\n", "System", "Inputs", "Outputs",
                "Pretraining", "MCD(dB)", "CER(%)", "F0 RMSE(cent)", "F0 CORR");
  out += line;
  out += std::string(90, '-') + "\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-14s %-8s %-8s %-12s %9.2f %8.1f %15.1f %9.2f\n", r.system_id.c_str(),
                  r.inputs.c_str(), r.outputs.c_str(), r.pretraining.c_str(), r.mcd_db, r.cer_pct, r.f0_rmse,
                  r.f0_corr);
    out += line;
  }
  return out;
}

void EvalReport::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write report " + path.string());
  out << to_json().dump(2) << '\n';
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open report " + path.string());
  return from_json(nlohmann::json::parse(in));
}

}  // namespace elvc::eval
