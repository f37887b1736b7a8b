#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace carkit {

/// The deterministic formulas behind the mock server. Exposed so callers can
/// reason about mock output; tests re-derive them independently.
namespace mock {

struct Token {
  std::string text;
  std::size_t offset = 0;  // byte offset into the prompt
};

/// Splits on single spaces; a newline ends the current token and stays
/// attached to it. Empty tokens (from doubled spaces) are dropped.
std::vector<Token> tokenize(std::string_view text);

/// -(1 + (hash64(model_id \x1f previous \x1f token) mod 1000) / 1000), always
/// in [-2, -1]. `previous` is the preceding token text, empty at the start.
double token_logprob(std::string_view model_id, std::string_view previous, std::string_view token);

/// (byte length of response mod 7) / 7.
double reward(std::string_view response);

/// Greedy output (temperature 0) depends only on model and instruction;
/// sampled output additionally on seed, sample index, temperature and top_p.
std::string generate(std::string_view model_id, std::string_view instruction, int sample_index,
                     double temperature, double top_p, std::int64_t seed);

}  // namespace mock

struct MockConfig {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks an ephemeral port
  bool logprobs_supported = true;
  // The first k scoring requests fail with HTTP 503 (exercises client retries).
  int fail_first_requests = 0;  // answer this many requests with 503 first
  std::optional<double> fixed_logprob;  // overrides token_logprob when set
};

struct MockStats {
  std::uint64_t requests = 0;  // successfully served scoring requests
  std::uint64_t completions = 0;
  std::uint64_t rewards = 0;
  std::uint64_t chat_completions = 0;
  std::uint64_t injected_failures = 0;
};

/// In-process HTTP server speaking the scoring wire protocol plus GET /stats.
/// Starts listening in the constructor and stops in the destructor. Throws
/// BackendError if the port cannot be bound.
class MockServer {
 public:
  explicit MockServer(MockConfig config = {});
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const;
  std::string base_url() const;
  MockStats stats() const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace carkit
