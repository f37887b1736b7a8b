#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace carkit {

/// One remote model behind the wire protocol. `model_id` names the base model
/// (loss / self perplexity), the reference model, a reward model, or a
/// response generator depending on where the endpoint is used.
struct BackendEndpoint {
  std::string base_url;  // scheme://host[:port][/prefix]
  std::string model_id;
  std::optional<std::string> auth_token;
  std::size_t max_context_tokens = 4096;
  std::chrono::milliseconds timeout{30'000};
  int max_retries = 3;
  std::chrono::milliseconds retry_backoff{200};  // doubles on every retry
};

struct TokenScore {
  std::string token_text;
  double logprob = 0.0;  // natural log, <= 0

  bool operator==(const TokenScore&) const = default;
};

struct ScoredSequence {
  std::vector<TokenScore> scores;
  std::size_t token_count = 0;
  bool truncated = false;

  bool operator==(const ScoredSequence&) const = default;
};

struct RewardScore {
  std::string reward_model_id;
  double value = 0.0;

  bool operator==(const RewardScore&) const = default;
};

struct GenerationRequest {
  std::string instruction;
  int n = 1;
  double temperature = 0.0;
  double top_p = 1.0;
  std::int64_t seed = 0;
};

enum class Capability { kLogprob, kReward, kGenerate };

std::string_view to_string(Capability capability);

struct CacheKey {
  Capability capability = Capability::kLogprob;
  std::string model_id;
  std::string content_hash;  // sha256 of the canonical request payload

  std::string str() const;
  bool operator==(const CacheKey&) const = default;
};

// ---------------------------------------------------------------------------
// Wire protocol. Request bodies are built by pure functions so that cache
// keys are derived from exactly what goes over the wire.

namespace wire {

using json = nlohmann::json;

/// POST /v1/completions in echo mode: scores prompt = context + continuation.
json logprob_request(const BackendEndpoint& endpoint, std::string_view context,
                     std::string_view continuation);

/// POST /v1/reward
json reward_request(const BackendEndpoint& endpoint, std::string_view instruction,
                    std::string_view response);

/// POST /v1/chat/completions
json generation_request(const BackendEndpoint& endpoint, const GenerationRequest& request);

/// Slices the echoed prompt tokens down to those at byte offset >= the
/// context length, then drops the continuation tail if the whole prompt
/// exceeds `max_context_tokens`. Throws CapabilityError when the payload
/// carries no logprobs and ProtocolError when it is malformed.
ScoredSequence parse_logprob_response(const json& body, std::size_t context_bytes,
                                      std::size_t max_context_tokens);

RewardScore parse_reward_response(const json& body, const std::string& model_id);

std::vector<std::string> parse_generation_response(const json& body, int expected_n);

}  // namespace wire

CacheKey make_cache_key(Capability capability, const BackendEndpoint& endpoint,
                        const nlohmann::json& request);

// ---------------------------------------------------------------------------

/// Argument checks shared by every backend implementation.
void check_logprob_args(std::string_view continuation);
void check_generation_args(const GenerationRequest& request);

/// Client-side view of the three scoring capabilities. Implementations are
/// safe to call from multiple threads.
class ScoringBackend {
 public:
  virtual ~ScoringBackend() = default;

  virtual ScoredSequence score_logprobs(const BackendEndpoint& endpoint, std::string_view context,
                                        std::string_view continuation) = 0;
  virtual RewardScore score_reward(const BackendEndpoint& endpoint, std::string_view instruction,
                                   std::string_view response) = 0;
  virtual std::vector<std::string> generate_responses(const BackendEndpoint& endpoint,
                                                      const GenerationRequest& request) = 0;
};

/// Talks the wire protocol over HTTP with exponential-backoff retries on
/// transport failures, 429 and 5xx.
class HttpBackend final : public ScoringBackend {
 public:
  ScoredSequence score_logprobs(const BackendEndpoint& endpoint, std::string_view context,
                                std::string_view continuation) override;
  RewardScore score_reward(const BackendEndpoint& endpoint, std::string_view instruction,
                           std::string_view response) override;
  std::vector<std::string> generate_responses(const BackendEndpoint& endpoint,
                                              const GenerationRequest& request) override;

  /// Number of HTTP attempts made, including retries.
  std::size_t attempts() const { return attempts_.load(); }

 private:
  nlohmann::json post(const BackendEndpoint& endpoint, const std::string& path,
                      const nlohmann::json& body);

  std::atomic<std::size_t> attempts_{0};
};

/// Append-only record log of (key, result). One JSON object per line; the
/// whole log is loaded on open. Appends are serialized and flushed.
class ScoreCache {
 public:
  /// In-memory only.
  ScoreCache() = default;
  /// Opens (creating if needed) `<directory>/scores.jsonl`. Throws CacheError
  /// with the byte offset of the first unreadable record.
  explicit ScoreCache(const std::string& directory);

  std::optional<nlohmann::json> get(const CacheKey& key) const;
  void put(const CacheKey& key, const nlohmann::json& value);
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, nlohmann::json> entries_;
  std::string log_path_;
};

/// Decorator serving repeated requests from a ScoreCache. Concurrent identical
/// requests are coalesced into one upstream call.
class CachedBackend final : public ScoringBackend {
 public:
  CachedBackend(ScoringBackend& upstream, ScoreCache& store) : upstream_(upstream), store_(store) {}

  ScoredSequence score_logprobs(const BackendEndpoint& endpoint, std::string_view context,
                                std::string_view continuation) override;
  RewardScore score_reward(const BackendEndpoint& endpoint, std::string_view instruction,
                           std::string_view response) override;
  std::vector<std::string> generate_responses(const BackendEndpoint& endpoint,
                                              const GenerationRequest& request) override;

  std::size_t hits() const { return hits_.load(); }
  std::size_t misses() const { return misses_.load(); }

 private:
  template <typename Fn>
  nlohmann::json cached(const CacheKey& key, Fn&& compute);

  ScoringBackend& upstream_;
  ScoreCache& store_;
  std::mutex inflight_mutex_;
  std::map<std::string, std::shared_future<nlohmann::json>> inflight_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

nlohmann::json to_json(const ScoredSequence& seq);
ScoredSequence scored_sequence_from_json(const nlohmann::json& j);

}  // namespace carkit
