#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carkit/metrics.hpp"
#include "json.hpp"

namespace carkit {

enum class Direction { kHigherIsBetter, kLowerIsBetter };

/// Accepts "higher" / "lower" (and the long forms "higher-is-better" /
/// "lower-is-better").
Direction direction_from_string(std::string_view s);
std::string_view to_string(Direction d);

/// Ground-truth fine-tuning outcome for one generator (percentages).
struct BenchmarkScores {
  std::string generator_id;
  double ae2_lc = 0.0;
  double ae2_wr = 0.0;
  double ah_wr = 0.0;
  double ap = 0.0;
};

struct GroundTruth {
  std::string base_model;
  std::vector<BenchmarkScores> scores;  // sorted by generator id
};

/// Mean of AlpacaEval 2 LC win rate and Arena-Hard win rate.
double average_performance(double ae2_lc, double ah_wr);

/// Parses `{"base_model": s, "scores": {gen: {"ae2_lc", "ae2_wr", "ah_wr"[, "ap"]}}}`.
/// A supplied "ap" must agree with the computed mean to within 0.005.
GroundTruth parse_ground_truth(const nlohmann::json& j);
GroundTruth load_ground_truth(const std::filesystem::path& path);

struct RankVector {
  std::map<std::string, double> ranks;  // generator id -> rank (1 = best)
  Direction direction = Direction::kHigherIsBetter;

  std::size_t n() const { return ranks.size(); }
  bool has_ties() const;
};

/// Rank 1 goes to the best value under `direction`; exact ties share the
/// average of the ranks they span. Needs >= 2 finite values.
RankVector rank_values(const std::map<std::string, double>& values, Direction direction);

struct CorrelationResult {
  double rho = 0.0;
  std::size_t n = 0;
  bool tie_corrected = false;
};

/// 1 - 6 * sum(d^2) / (n (n^2 - 1)); valid for tie-free rank vectors.
double spearman_rank_difference(std::span<const double> a, std::span<const double> b);
/// Pearson correlation; 0 when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

/// Spearman's rho over the shared generator ids. Tie-free inputs use the
/// rank-difference formula; inputs with ties use Pearson on the average ranks.
CorrelationResult spearman(const RankVector& a, const RankVector& b);

struct MetricCorrelation {
  std::string metric;
  Direction direction = Direction::kHigherIsBetter;
  CorrelationResult result;
};

/// One Table-4-style row: rho of every selected metric for one base model.
struct PredictionRow {
  std::string base_model;
  std::vector<MetricCorrelation> metrics;
  std::string best_metric;  // highest rho; first in column order on ties
};

struct MetricSelector {
  // Empty means every metric, in the order AR:<rm>..., IFD-ref, IFD-self,
  // PPL-ref, PPL-self, length, CAR.
  std::vector<std::string> metrics;
  Direction ppl_direction = Direction::kLowerIsBetter;
};

/// Metric names available for a set of metric vectors (column order).
std::vector<std::string> available_metrics(std::span<const MetricVector> vectors);

/// Throws GeneratorMismatchError naming the symmetric difference when the
/// scored generators and the ground truth disagree.
/// Throws GeneratorMismatchError naming every id present on only one side.
void check_generator_sets(std::span<const std::string> scored_ids, std::span<const BenchmarkScores> ground_truth);

PredictionRow evaluate_prediction(std::span<const MetricVector> vectors,
                                  std::span<const BenchmarkScores> ground_truth,
                                  const MetricSelector& selector, std::string base_model);

nlohmann::ordered_json to_json(const PredictionRow& row);

/// Aligned columns, one row per base model, rho at 4 decimals; the best
/// metric of each row is marked with '*'.
std::string format_prediction_table(std::span<const PredictionRow> rows);
std::string format_prediction_csv(std::span<const PredictionRow> rows);

}  // namespace carkit
