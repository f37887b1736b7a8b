#include "carkit/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>

#include "carkit/error.hpp"
#include "carkit/numeric.hpp"
#include "carkit/parallel.hpp"

namespace carkit {

LossMode loss_mode_from_string(std::string_view s) {
  if (s == "sum") return LossMode::kSum;
  if (s == "per-token") return LossMode::kPerToken;
  throw ConfigError("loss mode must be 'sum' or 'per-token', got '" + std::string(s) + "'");
}

Conditioning conditioning_from_string(std::string_view s) {
  if (s == "unconditional") return Conditioning::kUnconditional;
  if (s == "conditional") return Conditioning::kConditional;
  throw ConfigError("loss conditioning must be 'unconditional' or 'conditional', got '" + std::string(s) + "'");
}

LengthCounter length_counter_from_string(std::string_view s) {
  if (s == "backend") return LengthCounter::kBackend;
  if (s == "whitespace") return LengthCounter::kWhitespace;
  throw ConfigError("length counter must be 'backend' or 'whitespace', got '" + std::string(s) + "'");
}

std::string_view to_string(LossMode mode) { return mode == LossMode::kSum ? "sum" : "per-token"; }

std::string_view to_string(Conditioning c) {
  return c == Conditioning::kUnconditional ? "unconditional" : "conditional";
}

std::string_view to_string(LengthCounter c) { return c == LengthCounter::kBackend ? "backend" : "whitespace"; }

double response_perplexity(std::span<const double> logprobs) {
  if (logprobs.empty()) throw DegeneratePairError("perplexity of an empty token sequence");
  CompensatedSum nll;
  for (double lp : logprobs) nll.add(-lp);
  return std::exp(nll.mean());
}

double response_perplexity(const ScoredSequence& scores) {
  std::vector<double> lps;
  lps.reserve(scores.scores.size());
  for (const auto& s : scores.scores) lps.push_back(s.logprob);
  return response_perplexity(lps);
}

double ifd(double ppl_conditional, double ppl_unconditional) {
  if (!(ppl_unconditional > 0.0)) throw ArgumentError("unconditional perplexity must be positive");
  if (std::isnan(ppl_conditional)) throw ArgumentError("conditional perplexity is NaN");
  return ppl_conditional / ppl_unconditional;
}

std::size_t whitespace_token_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

std::size_t response_length(const ResponseRecord& response, const TokenCounter& counter) {
  if (response.text.empty()) return 0;
  return counter ? counter(response.text) : whitespace_token_count(response.text);
}

double average_reward(const GeneratorDataset& dataset, std::span<const double> rewards) {
  if (dataset.empty()) throw DegenerateDatasetError("average reward of an empty dataset");
  if (rewards.size() != dataset.size())
    throw ArgumentError("expected " + std::to_string(dataset.size()) + " rewards, got " +
                        std::to_string(rewards.size()));
  return compensated_mean(rewards);
}

double dataset_loss(std::span<const PairMetrics> per_pair, LossMode mode) {
  if (per_pair.empty()) throw DegenerateDatasetError("loss of an empty dataset");
  CompensatedSum sum;
  for (const auto& p : per_pair) {
    if (p.degenerate) throw DegeneratePairError("pair '" + p.instruction_id + "' has no base-model scores");
    sum.add(mode == LossMode::kSum ? p.nll_total : p.nll_per_token);
  }
  return sum.mean();
}

double dataset_loss(const GeneratorDataset& dataset, std::span<const PairMetrics> per_pair, LossMode mode) {
  if (dataset.empty()) throw DegenerateDatasetError("loss of an empty dataset");
  if (per_pair.size() != dataset.size())
    throw DataError("missing base-model scores: " + std::to_string(per_pair.size()) + " of " +
                    std::to_string(dataset.size()) + " pairs scored");
  for (std::size_t i = 0; i < per_pair.size(); ++i) {
    const auto& resp = dataset.pairs[i].response;
    if (per_pair[i].instruction_id != resp.instruction_id || per_pair[i].sample_index != resp.sample_index)
      throw DataError("missing base-model scores for pair '" + resp.instruction_id + "'");
  }
  return dataset_loss(per_pair, mode);
}

double car(double reward, double loss, double beta) {
  if (!std::isfinite(reward)) throw ArgumentError("reward must be finite");
  if (!(loss >= 0.0) || !std::isfinite(loss)) throw ArgumentError("loss must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ArgumentError("beta must be finite and >= 0");
  const double denom = 1.0 + beta * loss;
  if (!(denom > 0.0)) throw ArgumentError("1 + beta * loss must be positive");
  return reward / denom;
}

PairMetrics pair_metrics(std::string instruction_id, std::uint32_t sample_index,
                         const ScoredSequence& conditional, const ScoredSequence& unconditional,
                         Conditioning loss_conditioning) {
  PairMetrics m;
  m.instruction_id = std::move(instruction_id);
  m.sample_index = sample_index;
  m.truncated = conditional.truncated || unconditional.truncated;
  if (conditional.token_count == 0 || unconditional.token_count == 0) {
    m.degenerate = true;
    return m;
  }
  m.ppl_conditional = response_perplexity(conditional);
  m.ppl_unconditional = response_perplexity(unconditional);
  m.ifd = ifd(m.ppl_conditional, m.ppl_unconditional);

  const ScoredSequence& loss_seq =
      loss_conditioning == Conditioning::kConditional ? conditional : unconditional;
  CompensatedSum nll;
  for (const auto& s : loss_seq.scores) nll.add(-s.logprob);
  m.nll_total = nll.value();
  m.nll_per_token = nll.mean();
  m.token_count = loss_seq.token_count;
  return m;
}

std::string render_prompt(std::string_view prompt_template, std::string_view instruction) {
  static constexpr std::string_view kPlaceholder = "{instruction}";
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto hit = prompt_template.find(kPlaceholder, pos);
    out.append(prompt_template.substr(pos, hit - pos));
    if (hit == std::string_view::npos) break;
    out.append(instruction);
    pos = hit + kPlaceholder.size();
  }
  return out;
}

namespace {

struct PairResult {
  PairMetrics self;
  PairMetrics reference;
};

}  // namespace

ScoredDataset compute_metrics(const GeneratorDataset& dataset, ScoringBackend& backend,
                              const BackendEndpoint& base, const BackendEndpoint& reference,
                              std::span<const BackendEndpoint> reward_endpoints,
                              const MetricsConfig& config) {
  if (dataset.empty()) throw DegenerateDatasetError("dataset '" + dataset.generator_id + "' is empty");
  if (reward_endpoints.empty()) throw ConfigError("at least one reward endpoint is required");
  if (!(config.beta >= 0.0)) throw ConfigError("beta must be >= 0");
  const std::string car_model =
      config.car_reward_model.empty() ? reward_endpoints.front().model_id : config.car_reward_model;
  if (std::none_of(reward_endpoints.begin(), reward_endpoints.end(),
                   [&](const BackendEndpoint& e) { return e.model_id == car_model; }))
    throw ConfigError("CAR reward model '" + car_model + "' is not among the reward endpoints");

  std::vector<PairResult> results(dataset.size());
  parallel_for(dataset.size(), config.concurrency, [&](std::size_t i) {
    const Pair& pair = dataset.pairs[i];
    PairResult& out = results[i];
    out.self.instruction_id = out.reference.instruction_id = pair.instruction.id;
    out.self.sample_index = out.reference.sample_index = pair.response.sample_index;
    if (pair.response.degenerate()) {
      out.self.degenerate = out.reference.degenerate = true;
      return;
    }
    try {
      const std::string context = render_prompt(config.prompt_template, pair.instruction.text);
      const std::string& y = pair.response.text;
      const ScoredSequence base_cond = backend.score_logprobs(base, context, y);
      const ScoredSequence base_uncond = backend.score_logprobs(base, "", y);
      const ScoredSequence ref_cond = backend.score_logprobs(reference, context, y);
      const ScoredSequence ref_uncond = backend.score_logprobs(reference, "", y);

      out.self = pair_metrics(pair.instruction.id, pair.response.sample_index, base_cond, base_uncond,
                              config.loss_conditioning);
      out.reference = pair_metrics(pair.instruction.id, pair.response.sample_index, ref_cond, ref_uncond,
                                   config.loss_conditioning);
      if (out.self.degenerate || out.reference.degenerate) {
        out.self.degenerate = out.reference.degenerate = true;
        return;
      }

      TokenCounter counter;
      if (config.length_counter == LengthCounter::kBackend)
        counter = [&](std::string_view) { return base_uncond.token_count; };
      const std::size_t length = response_length(pair.response, counter);
      out.self.length_tokens = out.reference.length_tokens = length;

      for (const auto& rm : reward_endpoints) {
        const double r = backend.score_reward(rm, pair.instruction.text, y).value;
        out.self.rewards[rm.model_id] = r;
        out.reference.rewards[rm.model_id] = r;
      }
    } catch (const BackendError&) {
      rethrow_backend_error("pair '" + pair.instruction.id + "': ");
    }
  });

  ScoredDataset scored;
  MetricVector& mv = scored.metrics;
  mv.generator_id = dataset.generator_id;
  mv.base_model_id = base.model_id;
  mv.beta = config.beta;
  mv.car_reward_model = car_model;

  std::map<std::string, CompensatedSum> reward_sums;
  CompensatedSum ppl_ref, ppl_self, ifd_ref, ifd_self, length;
  std::vector<PairMetrics> included;
  for (auto& r : results) {
    if (r.self.degenerate) {
      ++mv.degenerate_count;
    } else {
      const bool truncated = r.self.truncated || r.reference.truncated;
      if (truncated) ++mv.truncated_count;
      if (!(truncated && config.exclude_truncated)) {
        for (const auto& [model, value] : r.self.rewards) reward_sums[model].add(value);
        ppl_ref.add(r.reference.ppl_conditional);
        ppl_self.add(r.self.ppl_conditional);
        ifd_ref.add(r.reference.ifd);
        ifd_self.add(r.self.ifd);
        length.add(static_cast<double>(r.self.length_tokens));
        included.push_back(r.self);
      }
    }
    scored.self_pairs.push_back(std::move(r.self));
    scored.reference_pairs.push_back(std::move(r.reference));
  }

  if (included.empty())
    throw DegenerateDatasetError("dataset '" + dataset.generator_id + "' has no scoreable pairs (" +
                                 std::to_string(mv.degenerate_count) + " degenerate, " +
                                 std::to_string(mv.truncated_count) + " truncated)");

  mv.pair_count = included.size();
  for (const auto& [model, sum] : reward_sums) mv.ar[model] = sum.mean();
  mv.ppl_ref_avg = ppl_ref.mean();
  mv.ppl_self_avg = ppl_self.mean();
  mv.ifd_ref_avg = ifd_ref.mean();
  mv.ifd_self_avg = ifd_self.mean();
  mv.avg_length = length.mean();
  mv.loss = dataset_loss(included, config.loss_mode);
  mv.car = car(mv.ar.at(car_model), mv.loss, config.beta);
  return scored;
}

nlohmann::ordered_json to_json(const MetricVector& m) {
  nlohmann::ordered_json ar = nlohmann::ordered_json::object();
  for (const auto& [model, value] : m.ar) ar[model] = value;
  return nlohmann::ordered_json{{"generator_id", m.generator_id},
                                {"base_model_id", m.base_model_id},
                                {"ar", std::move(ar)},
                                {"ppl_ref_avg", m.ppl_ref_avg},
                                {"ppl_self_avg", m.ppl_self_avg},
                                {"ifd_ref_avg", m.ifd_ref_avg},
                                {"ifd_self_avg", m.ifd_self_avg},
                                {"avg_length", m.avg_length},
                                {"loss", m.loss},
                                {"car", m.car},
                                {"beta", m.beta},
                                {"car_reward_model", m.car_reward_model},
                                {"pair_count", m.pair_count},
                                {"degenerate_count", m.degenerate_count},
                                {"truncated_count", m.truncated_count}};
}

nlohmann::ordered_json to_json(const PairMetrics& p) {
  auto number_or_null = [](double v) {
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json rewards = nlohmann::ordered_json::object();
  for (const auto& [model, value] : p.rewards) rewards[model] = value;
  return nlohmann::ordered_json{{"instruction_id", p.instruction_id},
                                {"sample_index", p.sample_index},
                                {"ppl_conditional", number_or_null(p.ppl_conditional)},
                                {"ppl_unconditional", number_or_null(p.ppl_unconditional)},
                                {"ifd", number_or_null(p.ifd)},
                                {"nll_total", p.nll_total},
                                {"nll_per_token", p.nll_per_token},
                                {"token_count", p.token_count},
                                {"length_tokens", p.length_tokens},
                                {"rewards", std::move(rewards)},
                                {"truncated", p.truncated},
                                {"degenerate", p.degenerate}};
}

}  // namespace carkit
