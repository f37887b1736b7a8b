#include <filesystem>
#include <fstream>

#include "carkit/backends.hpp"
#include "carkit/error.hpp"

namespace carkit {

using json = nlohmann::json;

ScoreCache::ScoreCache(const std::string& directory) {
  std::filesystem::create_directories(directory);
  log_path_ = (std::filesystem::path(directory) / "scores.jsonl").string();

  std::ifstream in(log_path_, std::ios::binary);
  if (!in) return;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t record_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw CacheError(record_offset, std::string("unreadable record: ") + e.what());
    }
    if (!record.is_object() || !record.contains("key") || !record["key"].is_string() ||
        !record.contains("value"))
      throw CacheError(record_offset, "record must be {\"key\": string, \"value\": ...}");
    entries_[record["key"].get<std::string>()] = std::move(record["value"]);
  }
  if (in.bad()) throw CacheError(offset, "read failure");
}

std::optional<json> ScoreCache::get(const CacheKey& key) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key.str());
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ScoreCache::put(const CacheKey& key, const json& value) {
  std::lock_guard lock(mutex_);
  auto [it, inserted] = entries_.emplace(key.str(), value);
  if (!inserted || log_path_.empty()) return;
  std::ofstream out(log_path_, std::ios::binary | std::ios::app);
  out << json{{"key", it->first}, {"value", value}}.dump() << '\n';
  out.flush();
  if (!out) throw CacheError(0, "cannot append to " + log_path_);
}

std::size_t ScoreCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

template <typename Fn>
json CachedBackend::cached(const CacheKey& key, Fn&& compute) {
  if (auto hit = store_.get(key)) {
    ++hits_;
    return *hit;
  }

  const std::string id = key.str();
  std::promise<json> promise;
  std::shared_future<json> pending;
  {
    std::lock_guard lock(inflight_mutex_);
    if (auto it = inflight_.find(id); it != inflight_.end()) {
      pending = it->second;
    } else {
      // Re-check under the lock: another caller may have finished meanwhile.
      if (auto hit = store_.get(key)) {
        ++hits_;
        return *hit;
      }
      inflight_.emplace(id, promise.get_future().share());
    }
  }
  if (pending.valid()) {
    ++hits_;
    return pending.get();
  }

  ++misses_;
  try {
    json value = compute();
    store_.put(key, value);
    promise.set_value(value);
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(id);
    return value;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(id);
    throw;
  }
}

ScoredSequence CachedBackend::score_logprobs(const BackendEndpoint& endpoint, std::string_view context,
                                             std::string_view continuation) {
  check_logprob_args(continuation);
  auto key = make_cache_key(Capability::kLogprob, endpoint,
                            wire::logprob_request(endpoint, context, continuation));
  return scored_sequence_from_json(
      cached(key, [&] { return to_json(upstream_.score_logprobs(endpoint, context, continuation)); }));
}

RewardScore CachedBackend::score_reward(const BackendEndpoint& endpoint, std::string_view instruction,
                                        std::string_view response) {
  auto key = make_cache_key(Capability::kReward, endpoint,
                            wire::reward_request(endpoint, instruction, response));
  json value = cached(key, [&] {
    return json(upstream_.score_reward(endpoint, instruction, response).value);
  });
  return {endpoint.model_id, value.get<double>()};
}

std::vector<std::string> CachedBackend::generate_responses(const BackendEndpoint& endpoint,
                                                           const GenerationRequest& request) {
  check_generation_args(request);
  auto key = make_cache_key(Capability::kGenerate, endpoint, wire::generation_request(endpoint, request));
  json value = cached(key, [&] { return json(upstream_.generate_responses(endpoint, request)); });
  return value.get<std::vector<std::string>>();
}

}  // namespace carkit
