#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carkit/backends.hpp"
#include "carkit/corpus.hpp"
#include "json.hpp"

namespace carkit {

enum class LossMode { kSum, kPerToken };
enum class Conditioning { kUnconditional, kConditional };
enum class LengthCounter { kBackend, kWhitespace };

LossMode loss_mode_from_string(std::string_view s);
Conditioning conditioning_from_string(std::string_view s);
LengthCounter length_counter_from_string(std::string_view s);
std::string_view to_string(LossMode mode);
std::string_view to_string(Conditioning conditioning);
std::string_view to_string(LengthCounter counter);

inline constexpr double kDegeneratePerplexity = std::numeric_limits<double>::infinity();

/// Per-pair scores under one scoring model (the base model or the reference
/// model). nll_total / nll_per_token come from the scoring selected by the
/// loss conditioning, so nll_per_token == ln(ppl_conditional) when
/// conditioning is conditional and ln(ppl_unconditional) otherwise.
struct PairMetrics {
  std::string instruction_id;
  std::uint32_t sample_index = 0;
  double ppl_conditional = kDegeneratePerplexity;
  double ppl_unconditional = kDegeneratePerplexity;
  double ifd = std::numeric_limits<double>::quiet_NaN();
  double nll_total = 0.0;
  double nll_per_token = 0.0;
  std::size_t token_count = 0;
  std::size_t length_tokens = 0;
  std::map<std::string, double> rewards;
  bool truncated = false;
  bool degenerate = false;
};

/// Dataset-level metrics for one generator against one base model.
struct MetricVector {
  std::string generator_id;
  std::string base_model_id;
  std::map<std::string, double> ar;  // reward model id -> average reward
  double ppl_ref_avg = 0.0;
  double ppl_self_avg = 0.0;
  double ifd_ref_avg = 0.0;
  double ifd_self_avg = 0.0;
  double avg_length = 0.0;
  double loss = 0.0;
  double car = 0.0;
  double beta = 3.0;
  std::string car_reward_model;
  std::size_t pair_count = 0;
  std::size_t degenerate_count = 0;
  std::size_t truncated_count = 0;
};

// --- pure metric functions -------------------------------------------------

/// exp of the mean negative log-probability. Throws DegeneratePairError on an
/// empty sequence.
double response_perplexity(std::span<const double> logprobs);
double response_perplexity(const ScoredSequence& scores);

/// PPL(y|x) / PPL(y). Throws ArgumentError unless ppl_unconditional > 0.
double ifd(double ppl_conditional, double ppl_unconditional);

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// Whitespace word count (runs of ASCII whitespace separate words).
std::size_t whitespace_token_count(std::string_view text);

std::size_t response_length(const ResponseRecord& response, const TokenCounter& counter);

/// Arithmetic mean of one reward model's per-pair rewards, summed in dataset
/// order. `rewards` must hold exactly one value per pair.
double average_reward(const GeneratorDataset& dataset, std::span<const double> rewards);

/// Mean over pairs of nll_total (kSum) or nll_per_token (kPerToken).
double dataset_loss(std::span<const PairMetrics> per_pair, LossMode mode);
/// Same, after checking that `per_pair` scores exactly the pairs of `dataset`.
double dataset_loss(const GeneratorDataset& dataset, std::span<const PairMetrics> per_pair,
                    LossMode mode);

/// Compatibility-adjusted reward: r / (1 + beta * loss).
double car(double reward, double loss, double beta);

/// Builds one PairMetrics from the conditional and unconditional scorings of
/// the same response under one model.
PairMetrics pair_metrics(std::string instruction_id, std::uint32_t sample_index,
                         const ScoredSequence& conditional, const ScoredSequence& unconditional,
                         Conditioning loss_conditioning);

// --- orchestration ---------------------------------------------------------

struct MetricsConfig {
  double beta = 3.0;
  LossMode loss_mode = LossMode::kSum;
  Conditioning loss_conditioning = Conditioning::kUnconditional;
  LengthCounter length_counter = LengthCounter::kBackend;
  bool exclude_truncated = false;
  std::size_t concurrency = 8;
  // Conditional context; every "{instruction}" is replaced by the instruction.
  std::string prompt_template = "{instruction}\n";
  // Reward model feeding CAR; empty selects the first reward endpoint.
  std::string car_reward_model;
};

std::string render_prompt(std::string_view prompt_template, std::string_view instruction);

struct ScoredDataset {
  MetricVector metrics;
  std::vector<PairMetrics> self_pairs;       // base model, canonical order
  std::vector<PairMetrics> reference_pairs;  // reference model, canonical order
};

/// Scores every pair of `dataset` (concurrently, up to config.concurrency
/// pairs in flight) and reduces in canonical order. Degenerate pairs are
/// counted and left out of every average; truncated pairs are included unless
/// config.exclude_truncated. Backend errors are rethrown with the pair id.
ScoredDataset compute_metrics(const GeneratorDataset& dataset, ScoringBackend& backend,
                              const BackendEndpoint& base, const BackendEndpoint& reference,
                              std::span<const BackendEndpoint> reward_endpoints,
                              const MetricsConfig& config);

nlohmann::ordered_json to_json(const MetricVector& metrics);
nlohmann::ordered_json to_json(const PairMetrics& pair);

}  // namespace carkit
