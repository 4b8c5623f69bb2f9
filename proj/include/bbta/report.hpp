#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/engine.hpp"

#include <json.hpp>

#ifndef BBTA_BUILD_ID
#define BBTA_BUILD_ID "unknown"
#endif

namespace bbta::report {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

/// Per-epoch metrics CSV. Columns are fully deterministic for a given
/// config and seed — wall time lives in the JSON summary instead, so two
/// identical runs produce byte-identical files regardless of machine
/// load or worker count.
inline std::string metrics_csv(const std::string& run_id,
                               const std::vector<EpochMetrics>& metrics) {
  std::string out = "run_id,epoch,objective,accuracy,queries\n";
  for (const EpochMetrics& m : metrics) {
    out += run_id;
    out += ',';
    out += std::to_string(m.epoch);
    out += ',';
    out += format_double(m.objective);
    out += ',';
    if (!std::isnan(m.accuracy)) out += format_double(m.accuracy);
    out += ',';
    out += std::to_string(m.queries_total);
    out += '\n';
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline nlohmann::json config_json(const std::map<std::string, std::string>& values) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values) j[k] = v;
  return j;
}

/// The JSON summary every command writes: full effective config, build
/// id, totals and whatever per-run results the caller adds on top.
inline nlohmann::json summary_base(const std::string& command, const std::string& run_id,
                                   const std::map<std::string, std::string>& config_values,
                                   std::uint64_t total_queries, double wall_seconds) {
  nlohmann::json j;
  j["command"] = command;
  j["run_id"] = run_id;
  j["build_id"] = BBTA_BUILD_ID;
  j["config"] = config_json(config_values);
  j["total_queries"] = total_queries;
  j["wall_seconds"] = wall_seconds;
  return j;
}

/// Selection report: one row per sample.
inline std::string selection_csv(const std::vector<PseudoLabelRecord>& records,
                                 const std::vector<char>& is_reliable) {
  std::string out = "sample_index,class_id,confidence,reliable\n";
  for (const auto& r : records) {
    out += std::to_string(r.sample_index);
    out += ',';
    out += std::to_string(r.class_id);
    out += ',';
    out += format_double(r.confidence);
    out += ',';
    out += is_reliable[r.sample_index] ? '1' : '0';
    out += '\n';
  }
  return out;
}

}  // namespace bbta::report
