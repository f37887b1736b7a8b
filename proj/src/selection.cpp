#include "carkit/selection.hpp"

#include <algorithm>

#include "carkit/error.hpp"
#include "carkit/parallel.hpp"

namespace carkit {
namespace {

template <typename Better>
const ResponseRecord& select_by(const SampledResponseSet& set, Better better) {
  if (set.candidates.empty()) throw ArgumentError("instruction '" + set.instruction_id + "' has no candidates");
  const Candidate* chosen = nullptr;
  for (const auto& c : set.candidates) {
    if (!c.reward)
      throw DataError("candidate " + std::to_string(c.response.sample_index) + " of instruction '" +
                      set.instruction_id + "' has no reward");
    if (chosen == nullptr || better(c.reward->value, chosen->reward->value) ||
        (c.reward->value == chosen->reward->value && c.response.sample_index < chosen->response.sample_index))
      chosen = &c;
  }
  return chosen->response;
}

}  // namespace

const ResponseRecord& select_best(const SampledResponseSet& set) {
  return select_by(set, [](double a, double b) { return a > b; });
}

const ResponseRecord& select_worst(const SampledResponseSet& set) {
  return select_by(set, [](double a, double b) { return a < b; });
}

BestOfNResult build_bon_datasets(std::span<const InstructionRecord> instructions, ScoringBackend& backend,
                                 const BackendEndpoint& generator, const BackendEndpoint& reward_model,
                                 const BestOfNConfig& config) {
  if (config.n < 1) throw ArgumentError("n must be >= 1");
  std::vector<InstructionRecord> ordered(instructions.begin(), instructions.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const InstructionRecord& a, const InstructionRecord& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < ordered.size(); ++i)
    if (ordered[i].id == ordered[i - 1].id) throw DataError("duplicate instruction id '" + ordered[i].id + "'");

  BestOfNResult result;
  result.pools.resize(ordered.size());
  parallel_for(ordered.size(), config.concurrency, [&](std::size_t i) {
    const InstructionRecord& ins = ordered[i];
    SampledResponseSet& pool = result.pools[i];
    pool.instruction_id = ins.id;
    try {
      GenerationRequest req{ins.text, config.n, config.temperature, config.top_p, config.seed};
      const auto samples = backend.generate_responses(generator, req);
      for (std::size_t k = 0; k < samples.size(); ++k) {
        Candidate c;
        c.response = {ins.id, generator.model_id, samples[k], config.temperature, config.top_p,
                      static_cast<std::uint32_t>(k)};
        c.reward = backend.score_reward(reward_model, ins.text, samples[k]);
        pool.candidates.push_back(std::move(c));
      }
    } catch (const BackendError&) {
      rethrow_backend_error("instruction '" + ins.id + "': ");
    }
  });

  const std::string suffix = "-of-" + std::to_string(config.n);
  result.best.generator_id = generator.model_id + "/best" + suffix;
  result.worst.generator_id = generator.model_id + "/worst" + suffix;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    ResponseRecord best = select_best(result.pools[i]);
    ResponseRecord worst = select_worst(result.pools[i]);
    best.generator_id = result.best.generator_id;
    worst.generator_id = result.worst.generator_id;
    result.best.pairs.push_back({ordered[i], std::move(best)});
    result.worst.pairs.push_back({ordered[i], std::move(worst)});
  }
  return result;
}

}  // namespace carkit
