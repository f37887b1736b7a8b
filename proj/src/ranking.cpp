#include "carkit/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "carkit/error.hpp"
#include "carkit/numeric.hpp"

namespace carkit {

using json = nlohmann::json;

Direction direction_from_string(std::string_view s) {
  if (s == "higher" || s == "higher-is-better") return Direction::kHigherIsBetter;
  if (s == "lower" || s == "lower-is-better") return Direction::kLowerIsBetter;
  throw ConfigError("direction must be 'higher' or 'lower', got '" + std::string(s) + "'");
}

std::string_view to_string(Direction d) {
  return d == Direction::kHigherIsBetter ? "higher-is-better" : "lower-is-better";
}

double average_performance(double ae2_lc, double ah_wr) { return (ae2_lc + ah_wr) / 2.0; }

GroundTruth parse_ground_truth(const json& j) {
  auto number = [](const json& obj, const char* field, const std::string& gen) {
    auto it = obj.find(field);
    if (it == obj.end() || !it->is_number() || !std::isfinite(it->get<double>()))
      throw DataError("ground truth for '" + gen + "': field '" + field + "' must be a finite number");
    return it->get<double>();
  };

  if (!j.is_object()) throw DataError("ground truth must be a JSON object");
  GroundTruth gt;
  if (!j.contains("base_model") || !j["base_model"].is_string())
    throw DataError("ground truth: field 'base_model' must be a string");
  gt.base_model = j["base_model"].get<std::string>();
  if (!j.contains("scores") || !j["scores"].is_object())
    throw DataError("ground truth: field 'scores' must be an object keyed by generator id");
  for (const auto& [gen, entry] : j["scores"].items()) {
    if (!entry.is_object()) throw DataError("ground truth for '" + gen + "' must be an object");
    BenchmarkScores s;
    s.generator_id = gen;
    s.ae2_lc = number(entry, "ae2_lc", gen);
    s.ae2_wr = number(entry, "ae2_wr", gen);
    s.ah_wr = number(entry, "ah_wr", gen);
    s.ap = average_performance(s.ae2_lc, s.ah_wr);
    if (entry.contains("ap")) {
      const double stated = number(entry, "ap", gen);
      // Published AP values are rounded to 2 decimals.
      if (std::abs(stated - s.ap) > 0.005 + 1e-9)
        throw DataError("ground truth for '" + gen + "': stated ap " + entry["ap"].dump() +
                        " disagrees with (ae2_lc + ah_wr) / 2 = " + std::to_string(s.ap));
    }
    gt.scores.push_back(std::move(s));
  }
  std::sort(gt.scores.begin(), gt.scores.end(),
            [](const BenchmarkScores& a, const BenchmarkScores& b) { return a.generator_id < b.generator_id; });
  return gt;
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open ground-truth file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed JSON: " + e.what());
  }
  return parse_ground_truth(j);
}

bool RankVector::has_ties() const {
  std::set<double> seen;
  for (const auto& [id, r] : ranks) {
    if (r != std::floor(r) || !seen.insert(r).second) return true;
  }
  return false;
}

RankVector rank_values(const std::map<std::string, double>& values, Direction direction) {
  if (values.size() < 2) throw ArgumentError("ranking needs at least 2 entries");
  std::vector<std::pair<double, std::string>> order;
  order.reserve(values.size());
  for (const auto& [id, v] : values) {
    if (std::isnan(v)) throw ArgumentError("cannot rank NaN value for '" + id + "'");
    order.emplace_back(v, id);
  }
  std::stable_sort(order.begin(), order.end(), [direction](const auto& a, const auto& b) {
    return direction == Direction::kHigherIsBetter ? a.first > b.first : a.first < b.first;
  });

  RankVector out;
  out.direction = direction;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && order[j + 1].first == order[i].first) ++j;
    // Positions i..j (0-based) share ranks i+1..j+1.
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) out.ranks[order[k].second] = rank;
    i = j + 1;
  }
  return out;
}

double spearman_rank_difference(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ArgumentError("rank vectors must share a length >= 2");
  const double n = static_cast<double>(a.size());
  double d2 = 0.0;  // integer-valued for tie-free ranks, so exact
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ArgumentError("vectors must share a length >= 2");
  const double mean_a = compensated_mean(a);
  const double mean_b = compensated_mean(b);
  CompensatedSum cov, var_a, var_b;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov.add((a[i] - mean_a) * (b[i] - mean_b));
    var_a.add((a[i] - mean_a) * (a[i] - mean_a));
    var_b.add((b[i] - mean_b) * (b[i] - mean_b));
  }
  if (var_a.value() <= 0.0 || var_b.value() <= 0.0) return 0.0;
  return std::clamp(cov.value() / std::sqrt(var_a.value() * var_b.value()), -1.0, 1.0);
}

CorrelationResult spearman(const RankVector& a, const RankVector& b) {
  std::set<std::string> ids_a, ids_b;
  for (const auto& [id, r] : a.ranks) ids_a.insert(id);
  for (const auto& [id, r] : b.ranks) ids_b.insert(id);
  std::vector<std::string> mismatch;
  std::set_symmetric_difference(ids_a.begin(), ids_a.end(), ids_b.begin(), ids_b.end(),
                                std::back_inserter(mismatch));
  if (!mismatch.empty()) {
    std::string names;
    for (const auto& m : mismatch) names += (names.empty() ? "" : ", ") + m;
    throw ArgumentError("rank vectors cover different ids: " + names);
  }
  if (a.n() < 2) throw ArgumentError("spearman needs n >= 2");

  std::vector<double> ra, rb;
  for (const auto& [id, r] : a.ranks) {
    ra.push_back(r);
    rb.push_back(b.ranks.at(id));
  }
  CorrelationResult out;
  out.n = ra.size();
  out.tie_corrected = a.has_ties() || b.has_ties();
  out.rho = out.tie_corrected ? pearson(ra, rb) : spearman_rank_difference(ra, rb);
  return out;
}

namespace {

struct MetricDef {
  std::string name;
  Direction direction;
  double (*extract)(const MetricVector&, const std::string& arg);
  std::string arg;
};

std::vector<MetricDef> metric_catalogue(std::span<const MetricVector> vectors, Direction ppl_direction) {
  std::vector<MetricDef> out;
  std::set<std::string> reward_models;
  for (const auto& v : vectors)
    for (const auto& [rm, value] : v.ar) reward_models.insert(rm);
  for (const auto& rm : reward_models)
    out.push_back({"AR:" + rm, Direction::kHigherIsBetter,
                   [](const MetricVector& v, const std::string& id) {
                     auto it = v.ar.find(id);
                     if (it == v.ar.end())
                       throw DataError("generator '" + v.generator_id + "' has no reward from '" + id + "'");
                     return it->second;
                   },
                   rm});
  out.push_back({"IFD-ref", Direction::kHigherIsBetter,
                 [](const MetricVector& v, const std::string&) { return v.ifd_ref_avg; }, ""});
  out.push_back({"IFD-self", Direction::kHigherIsBetter,
                 [](const MetricVector& v, const std::string&) { return v.ifd_self_avg; }, ""});
  out.push_back({"PPL-ref", ppl_direction,
                 [](const MetricVector& v, const std::string&) { return v.ppl_ref_avg; }, ""});
  out.push_back({"PPL-self", ppl_direction,
                 [](const MetricVector& v, const std::string&) { return v.ppl_self_avg; }, ""});
  out.push_back({"length", Direction::kHigherIsBetter,
                 [](const MetricVector& v, const std::string&) { return v.avg_length; }, ""});
  out.push_back({"CAR", Direction::kHigherIsBetter,
                 [](const MetricVector& v, const std::string&) { return v.car; }, ""});
  return out;
}

}  // namespace

std::vector<std::string> available_metrics(std::span<const MetricVector> vectors) {
  std::vector<std::string> names;
  for (const auto& m : metric_catalogue(vectors, Direction::kLowerIsBetter)) names.push_back(m.name);
  return names;
}

void check_generator_sets(std::span<const std::string> scored_ids, std::span<const BenchmarkScores> ground_truth) {
  std::set<std::string> scored, truth;
  for (const auto& id : scored_ids)
    if (!scored.insert(id).second) throw DataError("generator '" + id + "' scored more than once");
  for (const auto& g : ground_truth)
    if (!truth.insert(g.generator_id).second)
      throw DataError("generator '" + g.generator_id + "' appears twice in the ground truth");
  std::vector<std::string> diff;
  std::set_symmetric_difference(scored.begin(), scored.end(), truth.begin(), truth.end(),
                                std::back_inserter(diff));
  if (!diff.empty()) {
    std::string msg = "generator sets differ:";
    for (const auto& id : diff)
      msg += " " + id + (scored.count(id) ? " (not in ground truth)" : " (not scored)");
    throw GeneratorMismatchError(msg);
  }
}

PredictionRow evaluate_prediction(std::span<const MetricVector> vectors,
                                  std::span<const BenchmarkScores> ground_truth,
                                  const MetricSelector& selector, std::string base_model) {
  std::vector<std::string> ids;
  for (const auto& v : vectors) ids.push_back(v.generator_id);
  check_generator_sets(ids, ground_truth);
  if (vectors.size() < 2) throw DataError("evaluation needs at least 2 generators");

  std::map<std::string, double> ap;
  for (const auto& g : ground_truth) ap[g.generator_id] = g.ap;
  const RankVector truth_ranks = rank_values(ap, Direction::kHigherIsBetter);

  auto catalogue = metric_catalogue(vectors, selector.ppl_direction);
  std::vector<const MetricDef*> chosen;
  if (selector.metrics.empty()) {
    for (const auto& m : catalogue) chosen.push_back(&m);
  } else {
    for (const auto& name : selector.metrics) {
      auto it = std::find_if(catalogue.begin(), catalogue.end(), [&](const MetricDef& s) { return s.name == name; });
      if (it == catalogue.end()) throw ConfigError("unknown metric '" + name + "'");
      chosen.push_back(&*it);
    }
  }

  PredictionRow row;
  row.base_model = std::move(base_model);
  double best = -2.0;
  for (const MetricDef* def : chosen) {
    std::map<std::string, double> values;
    for (const auto& v : vectors) values[v.generator_id] = def->extract(v, def->arg);
    MetricCorrelation mc;
    mc.metric = def->name;
    mc.direction = def->direction;
    mc.result = spearman(rank_values(values, def->direction), truth_ranks);
    if (mc.result.rho > best) {
      best = mc.result.rho;
      row.best_metric = mc.metric;
    }
    row.metrics.push_back(std::move(mc));
  }
  return row;
}

nlohmann::ordered_json to_json(const PredictionRow& row) {
  nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
  for (const auto& m : row.metrics)
    metrics.push_back({{"metric", m.metric},
                       {"direction", std::string(to_string(m.direction))},
                       {"rho", m.result.rho},
                       {"n", m.result.n},
                       {"tie_corrected", m.result.tie_corrected}});
  return {{"base_model", row.base_model}, {"metrics", std::move(metrics)}, {"best_metric", row.best_metric}};
}

namespace {

std::string format_rho(double rho) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", rho);
  return buf;
}

std::vector<std::string> column_names(std::span<const PredictionRow> rows) {
  std::vector<std::string> cols;
  for (const auto& row : rows)
    for (const auto& m : row.metrics)
      if (std::find(cols.begin(), cols.end(), m.metric) == cols.end()) cols.push_back(m.metric);
  return cols;
}

const MetricCorrelation* find_metric(const PredictionRow& row, const std::string& name) {
  for (const auto& m : row.metrics)
    if (m.metric == name) return &m;
  return nullptr;
}

}  // namespace

std::string format_prediction_table(std::span<const PredictionRow> rows) {
  const auto cols = column_names(rows);
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"base_model"});
  for (const auto& c : cols) cells.back().push_back(c);
  for (const auto& row : rows) {
    std::vector<std::string> line{row.base_model};
    for (const auto& c : cols) {
      const auto* m = find_metric(row, c);
      std::string cell = m ? format_rho(m->result.rho) : "-";
      if (m && m->result.tie_corrected) cell += "t";
      if (c == row.best_metric) cell += "*";
      line.push_back(std::move(cell));
    }
    cells.push_back(std::move(line));
  }

  std::vector<std::size_t> width(cols.size() + 1, 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());

  std::ostringstream out;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i == 0) {
        out << line[i] << std::string(width[i] - line[i].size(), ' ');
      } else {
        out << "  " << std::string(width[i] - line[i].size(), ' ') << line[i];
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string format_prediction_csv(std::span<const PredictionRow> rows) {
  const auto cols = column_names(rows);
  std::ostringstream out;
  out << "base_model";
  for (const auto& c : cols) out << ',' << c;
  out << ",best_metric\n";
  for (const auto& row : rows) {
    out << row.base_model;
    for (const auto& c : cols) {
      const auto* m = find_metric(row, c);
      out << ',' << (m ? format_rho(m->result.rho) : "");
    }
    out << ',' << row.best_metric << '\n';
  }
  return out.str();
}

}  // namespace carkit
