#include <cmath>
#include <thread>

#include "carkit/backends.hpp"
#include "carkit/error.hpp"
#include "carkit/hashing.hpp"
#include "httplib.h"

namespace carkit {

using json = nlohmann::json;

std::string_view to_string(Capability capability) {
  switch (capability) {
    case Capability::kLogprob: return "logprob";
    case Capability::kReward: return "reward";
    case Capability::kGenerate: return "generate";
  }
  return "unknown";
}

std::string CacheKey::str() const {
  std::string out(to_string(capability));
  out += '|';
  out += model_id;
  out += '|';
  out += content_hash;
  return out;
}

namespace wire {

json logprob_request(const BackendEndpoint& endpoint, std::string_view context,
                     std::string_view continuation) {
  std::string prompt;
  prompt.reserve(context.size() + continuation.size());
  prompt.append(context).append(continuation);
  return json{{"model", endpoint.model_id},
              {"prompt", std::move(prompt)},
              {"echo", true},
              {"logprobs", 0},
              {"max_tokens", 0}};
}

json reward_request(const BackendEndpoint& endpoint, std::string_view instruction,
                    std::string_view response) {
  return json{{"model", endpoint.model_id},
              {"instruction", std::string(instruction)},
              {"response", std::string(response)}};
}

json generation_request(const BackendEndpoint& endpoint, const GenerationRequest& request) {
  return json{{"model", endpoint.model_id},
              {"messages", json::array({json{{"role", "user"}, {"content", request.instruction}}})},
              {"n", request.n},
              {"temperature", request.temperature},
              {"top_p", request.top_p},
              {"seed", request.seed}};
}

ScoredSequence parse_logprob_response(const json& body, std::size_t context_bytes,
                                      std::size_t max_context_tokens) {
  if (!body.is_object() || !body.contains("choices") || !body["choices"].is_array() ||
      body["choices"].empty())
    throw ProtocolError("completion response has no choices");
  const json& choice = body["choices"][0];
  auto lp = choice.find("logprobs");
  if (lp == choice.end() || lp->is_null())
    throw CapabilityError("backend returned no logprobs for an echo request");
  if (!lp->is_object()) throw ProtocolError("logprobs must be an object");
  const json& tokens = (*lp).value("tokens", json());
  const json& logprobs = (*lp).value("token_logprobs", json());
  const json& offsets = (*lp).value("text_offset", json());
  if (!tokens.is_array() || !logprobs.is_array() || !offsets.is_array() ||
      tokens.size() != logprobs.size() || tokens.size() != offsets.size())
    throw ProtocolError("logprobs block must carry equal-length tokens, token_logprobs, text_offset");

  std::size_t context_tokens = 0;
  ScoredSequence out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!offsets[i].is_number_unsigned() || !tokens[i].is_string())
      throw ProtocolError("malformed token or text_offset at index " + std::to_string(i));
    if (offsets[i].get<std::size_t>() < context_bytes) {
      ++context_tokens;
      continue;
    }
    // The first prompt token has no conditional probability; OpenAI-style
    // servers report null for it.
    if (logprobs[i].is_null()) continue;
    if (!logprobs[i].is_number()) throw ProtocolError("non-numeric token logprob");
    double value = logprobs[i].get<double>();
    if (!std::isfinite(value) || value > 1e-6)
      throw ProtocolError("token logprob must be finite and <= 0, got " + logprobs[i].dump());
    out.scores.push_back({tokens[i].get<std::string>(), std::min(value, 0.0)});
  }

  const std::size_t budget = max_context_tokens > context_tokens ? max_context_tokens - context_tokens : 0;
  if (out.scores.size() > budget) {
    out.scores.resize(budget);
    out.truncated = true;
  }
  out.token_count = out.scores.size();
  return out;
}

RewardScore parse_reward_response(const json& body, const std::string& model_id) {
  auto it = body.is_object() ? body.find("reward") : body.end();
  if (!body.is_object() || it == body.end() || !it->is_number())
    throw ProtocolError("reward response must be {\"reward\": number}");
  double value = it->get<double>();
  if (!std::isfinite(value)) throw ProtocolError("reward is not finite");
  return {model_id, value};
}

std::vector<std::string> parse_generation_response(const json& body, int expected_n) {
  if (!body.is_object() || !body.contains("choices") || !body["choices"].is_array())
    throw ProtocolError("chat completion response has no choices");
  const json& choices = body["choices"];
  if (choices.size() != static_cast<std::size_t>(expected_n))
    throw ProtocolError("expected " + std::to_string(expected_n) + " choices, got " +
                        std::to_string(choices.size()));
  std::vector<std::string> out(choices.size());
  for (std::size_t i = 0; i < choices.size(); ++i) {
    const json& c = choices[i];
    std::size_t index = i;
    if (c.contains("index") && c["index"].is_number_unsigned()) index = c["index"].get<std::size_t>();
    if (index >= out.size()) throw ProtocolError("choice index out of range");
    const json* content = nullptr;
    if (c.contains("message") && c["message"].is_object() && c["message"].contains("content"))
      content = &c["message"]["content"];
    if (content == nullptr || !content->is_string()) throw ProtocolError("choice without message content");
    out[index] = content->get<std::string>();
  }
  return out;
}

}  // namespace wire

CacheKey make_cache_key(Capability capability, const BackendEndpoint& endpoint, const json& request) {
  std::string payload = request.dump();
  // Truncation happens client-side, so the context budget is part of the result.
  if (capability == Capability::kLogprob)
    payload += "\nmax_context_tokens=" + std::to_string(endpoint.max_context_tokens);
  return {capability, endpoint.model_id, sha256_hex(payload)};
}

void check_logprob_args(std::string_view continuation) {
  if (continuation.empty()) throw ArgumentError("continuation must be non-empty");
}

void check_generation_args(const GenerationRequest& request) {
  if (request.n < 1) throw ArgumentError("n must be >= 1");
  if (!std::isfinite(request.temperature) || request.temperature < 0.0)
    throw ArgumentError("temperature must be >= 0");
  if (!std::isfinite(request.top_p) || request.top_p <= 0.0 || request.top_p > 1.0)
    throw ArgumentError("top_p must lie in (0, 1]");
  if (request.temperature == 0.0 && request.n > 1)
    throw ArgumentError("greedy decoding (temperature 0) is deterministic; n must be 1");
}

namespace {

struct ParsedUrl {
  std::string scheme_host_port;
  std::string prefix;
};

ParsedUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint URL '" + url + "' lacks a scheme");
  if (url.compare(0, scheme_end, "http") != 0)
    throw ConfigError("endpoint URL '" + url + "': only http:// is supported");
  auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  out.scheme_host_port = url.substr(0, path_start);
  if (path_start != std::string::npos) {
    out.prefix = url.substr(path_start);
    while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  }
  return out;
}

bool retryable(int status) { return status == 429 || (status >= 500 && status != 501); }

}  // namespace

json HttpBackend::post(const BackendEndpoint& endpoint, const std::string& path, const json& body) {
  const ParsedUrl url = split_url(endpoint.base_url);
  const std::string payload = body.dump();
  const std::string target = url.prefix + path;

  std::string last_failure;
  auto backoff = endpoint.retry_backoff;
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    ++attempts_;

    httplib::Client client(url.scheme_host_port);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(endpoint.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (endpoint.auth_token) headers.emplace("Authorization", "Bearer " + *endpoint.auth_token);

    auto res = client.Post(target, headers, payload, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (retryable(res->status)) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status == 501)
      throw CapabilityError(endpoint.base_url + target + " does not support this request: " + res->body);
    if (res->status != 200)
      throw ProtocolError(endpoint.base_url + target + " answered HTTP " + std::to_string(res->status) +
                          ": " + res->body.substr(0, 200));
    try {
      return json::parse(res->body);
    } catch (const json::exception& e) {
      throw ProtocolError(endpoint.base_url + target + " returned non-JSON body: " + e.what());
    }
  }
  throw BackendUnavailableError(endpoint.base_url + target + " unavailable after " +
                                std::to_string(endpoint.max_retries) + " retries (" + last_failure + ")");
}

ScoredSequence HttpBackend::score_logprobs(const BackendEndpoint& endpoint, std::string_view context,
                                           std::string_view continuation) {
  check_logprob_args(continuation);
  json body = post(endpoint, "/v1/completions", wire::logprob_request(endpoint, context, continuation));
  return wire::parse_logprob_response(body, context.size(), endpoint.max_context_tokens);
}

RewardScore HttpBackend::score_reward(const BackendEndpoint& endpoint, std::string_view instruction,
                                      std::string_view response) {
  json body = post(endpoint, "/v1/reward", wire::reward_request(endpoint, instruction, response));
  return wire::parse_reward_response(body, endpoint.model_id);
}

std::vector<std::string> HttpBackend::generate_responses(const BackendEndpoint& endpoint,
                                                         const GenerationRequest& request) {
  check_generation_args(request);
  json body = post(endpoint, "/v1/chat/completions", wire::generation_request(endpoint, request));
  return wire::parse_generation_response(body, request.n);
}

json to_json(const ScoredSequence& seq) {
  json tokens = json::array();
  json logprobs = json::array();
  for (const auto& s : seq.scores) {
    tokens.push_back(s.token_text);
    logprobs.push_back(s.logprob);
  }
  return json{{"tokens", std::move(tokens)},
              {"logprobs", std::move(logprobs)},
              {"token_count", seq.token_count},
              {"truncated", seq.truncated}};
}

ScoredSequence scored_sequence_from_json(const json& j) {
  ScoredSequence seq;
  const auto& tokens = j.at("tokens");
  const auto& logprobs = j.at("logprobs");
  if (tokens.size() != logprobs.size()) throw std::runtime_error("token/logprob length mismatch");
  for (std::size_t i = 0; i < tokens.size(); ++i)
    seq.scores.push_back({tokens[i].get<std::string>(), logprobs[i].get<double>()});
  seq.token_count = j.at("token_count").get<std::size_t>();
  seq.truncated = j.at("truncated").get<bool>();
  if (seq.token_count != seq.scores.size()) throw std::runtime_error("token_count mismatch");
  return seq;
}

}  // namespace carkit
