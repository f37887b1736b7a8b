#include "carkit/mock_server.hpp"

#include <sys/socket.h>

#include <array>
#include <atomic>
#include <bit>
#include <thread>

#include "carkit/error.hpp"
#include "carkit/hashing.hpp"
#include "httplib.h"
#include "json.hpp"

namespace carkit {

using json = nlohmann::json;

namespace mock {

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t start = 0;
  auto emit = [&](std::size_t end) {
    if (end > start) out.push_back({std::string(text.substr(start, end - start)), start});
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == ' ') {
      emit(i);
      start = i + 1;
    } else if (text[i] == '\n') {
      emit(i + 1);
      start = i + 1;
    }
  }
  emit(text.size());
  return out;
}

double token_logprob(std::string_view model_id, std::string_view previous, std::string_view token) {
  std::string key;
  key.reserve(model_id.size() + previous.size() + token.size() + 2);
  key.append(model_id).append(1, '\x1f').append(previous).append(1, '\x1f').append(token);
  return -(1.0 + static_cast<double>(hash64(key) % 1000) / 1000.0);
}

double reward(std::string_view response) {
  return static_cast<double>(response.size() % 7) / 7.0;
}

namespace {

constexpr std::array<std::string_view, 24> kVocabulary = {
    "the",     "answer",  "is",      "a",        "careful", "step",    "by",     "consider",
    "first",   "then",    "we",      "compute",  "result",  "because", "of",     "this",
    "example", "shows",   "clearly", "therefore", "finally", "note",    "simple", "overall"};

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string generate(std::string_view model_id, std::string_view instruction, int sample_index,
                     double temperature, double top_p, std::int64_t seed) {
  std::string key;
  key.append(model_id).push_back('\x1f');
  key.append(instruction);
  if (temperature > 0.0) {
    key += '\x1f' + std::to_string(seed) + '\x1f' + std::to_string(sample_index) + '\x1f' +
           std::to_string(std::bit_cast<std::uint64_t>(temperature)) + '\x1f' +
           std::to_string(std::bit_cast<std::uint64_t>(top_p));
  }
  std::uint64_t state = hash64(key);
  const std::size_t words = 1 + splitmix64(state) % 24;
  std::string out;
  for (std::size_t i = 0; i < words; ++i) {
    if (i > 0) out.push_back(' ');
    out.append(kVocabulary[splitmix64(state) % kVocabulary.size()]);
  }
  out.push_back('.');
  return out;
}

}  // namespace mock

struct MockServer::Impl {
  MockConfig config;
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<std::uint64_t> seen{0};
  std::atomic<std::uint64_t> completions{0};
  std::atomic<std::uint64_t> rewards{0};
  std::atomic<std::uint64_t> chats{0};
  std::atomic<std::uint64_t> injected{0};

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void bad_request(httplib::Response& res, const std::string& message) {
    reply(res, 400, json{{"error", {{"message", message}, {"type", "invalid_request_error"}}}});
  }

  // Parses the body and applies failure injection. Returns false if a reply
  // has already been written.
  bool admit(const httplib::Request& req, httplib::Response& res, json& body) {
    if (seen.fetch_add(1) < static_cast<std::uint64_t>(config.fail_first_requests)) {
      ++injected;
      reply(res, 503, json{{"error", {{"message", "injected failure"}}}});
      return false;
    }
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      bad_request(res, std::string("invalid JSON: ") + e.what());
      return false;
    }
    if (!body.is_object() || !body.contains("model") || !body["model"].is_string()) {
      bad_request(res, "field 'model' must be a string");
      return false;
    }
    return true;
  }

  void completions_handler(const httplib::Request& req, httplib::Response& res) {
    json body;
    if (!admit(req, res, body)) return;
    if (!config.logprobs_supported) {
      reply(res, 501, json{{"error", {{"message", "logprobs are not supported by this model"}}}});
      return;
    }
    if (!body.contains("prompt") || !body["prompt"].is_string()) return bad_request(res, "field 'prompt' must be a string");
    if (body.value("echo", false) != true) return bad_request(res, "only echo=true scoring is supported");
    if (body.value("max_tokens", -1) != 0) return bad_request(res, "only max_tokens=0 scoring is supported");

    const std::string model = body["model"];
    const std::string prompt = body["prompt"];
    json tokens = json::array(), logprobs = json::array(), offsets = json::array();
    std::string previous;
    for (const auto& tok : mock::tokenize(prompt)) {
      logprobs.push_back(config.fixed_logprob ? *config.fixed_logprob
                                              : mock::token_logprob(model, previous, tok.text));
      previous = tok.text;
      tokens.push_back(tok.text);
      offsets.push_back(tok.offset);
    }
    const std::size_t count = tokens.size();
    json choice{{"index", 0},
                {"text", prompt},
                {"logprobs", {{"tokens", std::move(tokens)},
                              {"token_logprobs", std::move(logprobs)},
                              {"text_offset", std::move(offsets)}}},
                {"finish_reason", "length"}};
    ++completions;
    reply(res, 200, json{{"object", "text_completion"},
                         {"model", model},
                         {"choices", json::array({std::move(choice)})},
                         {"usage", {{"prompt_tokens", count}, {"completion_tokens", 0}, {"total_tokens", count}}}});
  }

  void reward_handler(const httplib::Request& req, httplib::Response& res) {
    json body;
    if (!admit(req, res, body)) return;
    if (!body.contains("instruction") || !body["instruction"].is_string() || !body.contains("response") ||
        !body["response"].is_string())
      return bad_request(res, "fields 'instruction' and 'response' must be strings");
    ++rewards;
    reply(res, 200, json{{"reward", mock::reward(body["response"].get<std::string>())}});
  }

  void chat_handler(const httplib::Request& req, httplib::Response& res) {
    json body;
    if (!admit(req, res, body)) return;
    const json& messages = body.value("messages", json());
    if (!messages.is_array() || messages.empty() || !messages.back().is_object() ||
        !messages.back().contains("content") || !messages.back()["content"].is_string())
      return bad_request(res, "field 'messages' must end with a message carrying string content");
    const int n = body.value("n", 1);
    const double temperature = body.value("temperature", 0.0);
    const double top_p = body.value("top_p", 1.0);
    const std::int64_t seed = body.value("seed", std::int64_t{0});
    if (n < 1) return bad_request(res, "n must be >= 1");
    if (temperature < 0.0 || top_p <= 0.0 || top_p > 1.0) return bad_request(res, "invalid sampling parameters");
    if (temperature == 0.0 && n > 1) return bad_request(res, "greedy decoding supports n=1 only");

    const std::string model = body["model"];
    const std::string instruction = messages.back()["content"];
    json choices = json::array();
    for (int i = 0; i < n; ++i) {
      choices.push_back({{"index", i},
                         {"message", {{"role", "assistant"},
                                      {"content", mock::generate(model, instruction, i, temperature, top_p, seed)}}},
                         {"finish_reason", "stop"}});
    }
    ++chats;
    reply(res, 200, json{{"object", "chat.completion"}, {"model", model}, {"choices", std::move(choices)}});
  }
};

MockServer::MockServer(MockConfig config) : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  Impl& impl = *impl_;

  // httplib defaults to SO_REUSEPORT, which would let a second server share
  // the port silently.
  impl.server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  impl.server.Post("/v1/completions", [&impl](const httplib::Request& req, httplib::Response& res) {
    impl.completions_handler(req, res);
  });
  impl.server.Post("/v1/reward", [&impl](const httplib::Request& req, httplib::Response& res) {
    impl.reward_handler(req, res);
  });
  impl.server.Post("/v1/chat/completions", [&impl](const httplib::Request& req, httplib::Response& res) {
    impl.chat_handler(req, res);
  });
  impl.server.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    const MockStats s = stats();
    Impl::reply(res, 200, json{{"requests", s.requests},
                               {"completions", s.completions},
                               {"rewards", s.rewards},
                               {"chat_completions", s.chat_completions},
                               {"injected_failures", s.injected_failures}});
  });

  if (impl.config.port == 0) {
    impl.port = impl.server.bind_to_any_port(impl.config.host);
  } else {
    impl.port = impl.server.bind_to_port(impl.config.host, impl.config.port) ? impl.config.port : -1;
  }
  if (impl.port <= 0)
    throw BackendError("cannot bind mock server to " + impl.config.host + ":" +
                       std::to_string(impl.config.port) + " (port in use?)");
  impl.thread = std::thread([&impl] { impl.server.listen_after_bind(); });
  impl.server.wait_until_ready();
}

MockServer::~MockServer() { stop(); }

int MockServer::port() const { return impl_->port; }

std::string MockServer::base_url() const {
  return "http://" + impl_->config.host + ":" + std::to_string(impl_->port);
}

MockStats MockServer::stats() const {
  MockStats s;
  s.completions = impl_->completions.load();
  s.rewards = impl_->rewards.load();
  s.chat_completions = impl_->chats.load();
  s.requests = s.completions + s.rewards + s.chat_completions;
  s.injected_failures = impl_->injected.load();
  return s;
}

void MockServer::stop() {
  if (impl_->thread.joinable()) {
    impl_->server.stop();
    impl_->thread.join();
  }
}

}  // namespace carkit
