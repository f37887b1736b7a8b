#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "carkit/metrics.hpp"
#include "carkit/ranking.hpp"
#include "json.hpp"

namespace carkit {

inline constexpr const char* kToolkitName = "carkit";
inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr const char* kReportSchemaId = "carkit.report/v1";

struct Report {
  std::string command;
  nlohmann::ordered_json config;  // resolved, semantically meaningful fields only
  std::string started_at;         // ISO-8601 UTC
  std::string finished_at;
  std::vector<MetricVector> generators;
  std::vector<PredictionRow> correlation;
  std::optional<nlohmann::ordered_json> selection;
  std::vector<std::string> warnings;
};

/// sha256 over the canonical dump of the resolved config.
std::string config_hash(const nlohmann::ordered_json& config);

/// Current time, or the epoch when `reproducible`.
std::string timestamp_utc(bool reproducible);

nlohmann::ordered_json to_json(const Report& report);

std::string format_metrics_table(std::span<const MetricVector> vectors);
std::string format_metrics_csv(std::span<const MetricVector> vectors);

}  // namespace carkit
