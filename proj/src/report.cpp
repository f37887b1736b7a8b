#include "carkit/report.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <set>
#include <sstream>

#include "carkit/hashing.hpp"

namespace carkit {

std::string config_hash(const nlohmann::ordered_json& config) {
  // Key order must not matter: re-dump through the sorted representation.
  return sha256_hex(nlohmann::json(config).dump());
}

std::string timestamp_utc(bool reproducible) {
  std::time_t t = reproducible ? 0 : std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::ordered_json to_json(const Report& report) {
  nlohmann::ordered_json out;
  out["schema"] = kReportSchemaId;
  out["toolkit"] = {{"name", kToolkitName}, {"version", kToolkitVersion}};
  out["run"] = {{"command", report.command},
                {"config_hash", config_hash(report.config)},
                {"started_at", report.started_at},
                {"finished_at", report.finished_at}};
  out["config"] = report.config;
  out["generators"] = nlohmann::ordered_json::array();
  for (const auto& mv : report.generators) out["generators"].push_back(to_json(mv));
  if (!report.correlation.empty()) {
    out["correlation"] = nlohmann::ordered_json::array();
    for (const auto& row : report.correlation) out["correlation"].push_back(to_json(row));
  }
  if (report.selection) out["selection"] = *report.selection;
  out["warnings"] = report.warnings;
  return out;
}

namespace {

std::vector<std::string> reward_models(std::span<const MetricVector> vectors) {
  std::set<std::string> ids;
  for (const auto& v : vectors)
    for (const auto& [rm, value] : v.ar) ids.insert(rm);
  return {ids.begin(), ids.end()};
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> header(std::span<const MetricVector> vectors) {
  std::vector<std::string> h{"generator", "pairs"};
  for (const auto& rm : reward_models(vectors)) h.push_back("AR:" + rm);
  for (const char* c : {"PPL-ref", "PPL-self", "IFD-ref", "IFD-self", "length", "loss", "CAR"}) h.push_back(c);
  return h;
}

std::vector<std::string> row(const MetricVector& v, std::span<const MetricVector> all,
                             std::string (*fmt)(double)) {
  std::vector<std::string> r{v.generator_id, std::to_string(v.pair_count)};
  for (const auto& rm : reward_models(all)) {
    auto it = v.ar.find(rm);
    r.push_back(it == v.ar.end() ? "" : fmt(it->second));
  }
  for (double x : {v.ppl_ref_avg, v.ppl_self_avg, v.ifd_ref_avg, v.ifd_self_avg, v.avg_length, v.loss, v.car})
    r.push_back(fmt(x));
  return r;
}

}  // namespace

std::string format_metrics_table(std::span<const MetricVector> vectors) {
  std::vector<std::vector<std::string>> cells{header(vectors)};
  for (const auto& v : vectors) cells.push_back(row(v, vectors, [](double x) { return fixed(x, 4); }));
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream out;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      const std::string pad(width[i] - line[i].size(), ' ');
      if (i == 0) out << line[i] << pad;
      else out << "  " << pad << line[i];
    }
    out << '\n';
  }
  return out.str();
}

std::string format_metrics_csv(std::span<const MetricVector> vectors) {
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t i = 0; i < line.size(); ++i) out << (i ? "," : "") << line[i];
    out << '\n';
  };
  emit(header(vectors));
  for (const auto& v : vectors) emit(row(v, vectors, full));
  return out.str();
}

}  // namespace carkit
