#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "carkit/backends.hpp"
#include "carkit/corpus.hpp"

namespace carkit {

struct Candidate {
  ResponseRecord response;
  std::optional<RewardScore> reward;
};

/// The sampled pool for one instruction.
struct SampledResponseSet {
  std::string instruction_id;
  std::vector<Candidate> candidates;

  std::size_t n() const { return candidates.size(); }
};

/// Highest reward; ties go to the lowest sample_index. Throws ArgumentError
/// on an empty pool and DataError when a candidate lacks a reward.
const ResponseRecord& select_best(const SampledResponseSet& set);
/// Lowest reward; ties go to the lowest sample_index.
const ResponseRecord& select_worst(const SampledResponseSet& set);

struct BestOfNConfig {
  int n = 5;
  double temperature = 0.8;
  double top_p = 1.0;
  std::int64_t seed = 0;
  std::size_t concurrency = 8;
};

struct BestOfNResult {
  GeneratorDataset best;
  GeneratorDataset worst;
  std::vector<SampledResponseSet> pools;  // canonical instruction order
};

/// Samples n responses per instruction from `generator`, scores every sample
/// with `reward_model`, and keeps the best and the worst per instruction.
/// Output datasets are labelled "<generator>/best-of-<n>" and
/// "<generator>/worst-of-<n>".
BestOfNResult build_bon_datasets(std::span<const InstructionRecord> instructions, ScoringBackend& backend,
                                 const BackendEndpoint& generator, const BackendEndpoint& reward_model,
                                 const BestOfNConfig& config);

}  // namespace carkit
