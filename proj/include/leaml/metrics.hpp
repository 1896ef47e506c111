#pragma once

// Append-only JSON Lines metrics stream. One record per line:
//   {"stage": str, "step": int, "values": {name: number}, "wall_seconds": number,
//    "config_hash": hex str, "extra": object (optional)}

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/error.hpp"

namespace leaml {

struct MetricsRecord {
  std::string stage;
  long step = 0;
  std::map<std::string, double> values;
  double wall_seconds = 0.0;
  std::string config_hash;
  nlohmann::json extra;  // null when absent

  bool operator==(const MetricsRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const MetricsRecord& r) {
  j = {{"stage", r.stage},
       {"step", r.step},
       {"values", r.values},
       {"wall_seconds", r.wall_seconds},
       {"config_hash", r.config_hash}};
  if (!r.extra.is_null()) j["extra"] = r.extra;
}

inline void from_json(const nlohmann::json& j, MetricsRecord& r) {
  r.stage = j.at("stage").get<std::string>();
  r.step = j.at("step").get<long>();
  r.values = j.at("values").get<std::map<std::string, double>>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.extra = j.contains("extra") ? j.at("extra") : nlohmann::json();
}

/// Appends records to a file. Steps must not decrease within a stage.
class MetricsLog {
 public:
  MetricsLog(std::filesystem::path path, std::string config_hash)
      : path_(std::move(path)), hash_(std::move(config_hash)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  }

  const std::filesystem::path& path() const { return path_; }
  const std::string& config_hash() const { return hash_; }

  void append(MetricsRecord r) {
    std::lock_guard lock(mu_);
    auto it = last_step_.find(r.stage);
    if (it != last_step_.end() && r.step < it->second) {
      throw InvalidState("metrics step went backwards in stage '" + r.stage + "'");
    }
    last_step_[r.stage] = r.step;
    if (r.config_hash.empty()) r.config_hash = hash_;
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw Error("cannot append to " + path_.string());
    out << nlohmann::json(r).dump() << '\n';
  }

 private:
  std::filesystem::path path_;
  std::string hash_;
  std::mutex mu_;
  std::map<std::string, long> last_step_;
};

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<MetricsRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace leaml
