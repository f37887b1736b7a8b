#include "carkit/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "carkit/backends.hpp"
#include "carkit/corpus.hpp"
#include "carkit/error.hpp"
#include "carkit/hashing.hpp"
#include "carkit/metrics.hpp"
#include "carkit/mock_server.hpp"
#include "carkit/ranking.hpp"
#include "carkit/report.hpp"
#include "carkit/selection.hpp"

namespace carkit {
namespace {

using ojson = nlohmann::ordered_json;

struct Options {
  std::vector<std::string> datasets;
  std::string instructions;
  std::string base_url, base_model;
  std::string ref_url, ref_model;
  std::vector<std::string> reward_urls;
  std::string gen_url, gen_model;
  std::string api_key;
  std::size_t base_max_context = 4096;
  std::size_t ref_max_context = 1024;
  int timeout_ms = 30'000;
  int max_retries = 3;

  double beta = 3.0;
  std::string loss_mode = "sum";
  std::string loss_conditioning = "unconditional";
  std::string length_counter = "backend";
  bool exclude_truncated = false;
  std::string prompt_template = "{instruction}\n";
  std::string car_reward;

  std::string ppl_direction = "lower";
  std::vector<std::string> metrics;
  std::string ground_truth;

  int n = 5;
  double temperature = 0.8;
  double top_p = 1.0;
  std::int64_t seed = 0;
  std::string out_prefix;

  std::string cache_dir;
  int concurrency = 8;
  std::string format = "json";
  std::string output;
  std::string emit_pair_metrics;
  bool reproducible = false;

  std::string host = "127.0.0.1";
  int port = 0;
  bool no_logprobs = false;
};

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << content;
  if (!f.flush()) throw DataError("cannot write '" + path + "'");
}

BackendEndpoint endpoint(const Options& o, const std::string& url, const std::string& model, std::size_t max_ctx) {
  BackendEndpoint e;
  e.base_url = url;
  e.model_id = model;
  if (!o.api_key.empty()) e.auth_token = o.api_key;
  e.max_context_tokens = max_ctx;
  e.timeout = std::chrono::milliseconds(o.timeout_ms);
  e.max_retries = o.max_retries;
  return e;
}

std::vector<BackendEndpoint> reward_endpoints(const Options& o) {
  std::vector<BackendEndpoint> out;
  for (const auto& arg : o.reward_urls) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == arg.size())
      throw ConfigError("--reward-url expects <id>=<url>, got '" + arg + "'");
    const std::string id = arg.substr(0, eq);
    for (const auto& e : out)
      if (e.model_id == id) throw ConfigError("reward model '" + id + "' given twice");
    out.push_back(endpoint(o, arg.substr(eq + 1), id, 0));
  }
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_common(const Options& o) {
  require(o.concurrency >= 1, "--concurrency must be >= 1");
  require(o.timeout_ms >= 1, "--timeout-ms must be >= 1");
  require(o.max_retries >= 0, "--max-retries must be >= 0");
  require(o.format == "json" || o.format == "table" || o.format == "csv",
          "--format must be json, table or csv");
}

struct ScoringSetup {
  BackendEndpoint base, reference;
  std::vector<BackendEndpoint> rewards;
  MetricsConfig metrics;
};

ScoringSetup scoring_setup(const Options& o) {
  check_common(o);
  require(!o.datasets.empty(), "at least one --dataset is required");
  require(!o.base_url.empty(), "--base-url is required");
  require(!o.base_model.empty(), "--base-model is required");
  require(!o.ref_model.empty(), "--ref-model is required");
  require(o.beta >= 0.0 && std::isfinite(o.beta), "--beta must be a finite number >= 0");
  require(o.base_max_context >= 1 && o.ref_max_context >= 1, "max context must be >= 1");
  require(o.prompt_template.find("{instruction}") != std::string::npos,
          "--prompt-template must contain {instruction}");

  ScoringSetup s;
  s.base = endpoint(o, o.base_url, o.base_model, o.base_max_context);
  s.reference = endpoint(o, o.ref_url.empty() ? o.base_url : o.ref_url, o.ref_model, o.ref_max_context);
  s.rewards = reward_endpoints(o);
  require(!s.rewards.empty(), "at least one --reward-url is required");
  s.metrics.beta = o.beta;
  s.metrics.loss_mode = loss_mode_from_string(o.loss_mode);
  s.metrics.loss_conditioning = conditioning_from_string(o.loss_conditioning);
  s.metrics.length_counter = length_counter_from_string(o.length_counter);
  s.metrics.exclude_truncated = o.exclude_truncated;
  s.metrics.concurrency = static_cast<std::size_t>(o.concurrency);
  s.metrics.prompt_template = o.prompt_template;
  s.metrics.car_reward_model = o.car_reward.empty() ? s.rewards.front().model_id : o.car_reward;
  bool known = false;
  for (const auto& r : s.rewards) known = known || r.model_id == s.metrics.car_reward_model;
  require(known, "--car-reward '" + o.car_reward + "' is not one of the --reward-url ids");
  return s;
}

struct LoadedDataset {
  GeneratorDataset data;
  std::string sha256;
};

std::vector<LoadedDataset> load_datasets(const Options& o, std::ostream& err) {
  std::vector<LoadedDataset> out;
  for (const auto& path : o.datasets) {
    LoadedDataset d;
    d.sha256 = sha256_hex(read_file(path));
    d.data = load_dataset(path);
    const auto report = validate_dataset(d.data);
    if (!report.accepted()) {
      const auto& e = report.errors.front();
      throw DataError(path + ": pair " + std::to_string(e.line) + ": " + e.reason);
    }
    for (const auto& w : report.warnings)
      err << "carkit: warning: " << path << ": pair " << w.line << ": " << one_line(w.reason) << '\n';
    for (const auto& other : out)
      if (other.data.generator_id == d.data.generator_id)
        throw DataError("generator '" + d.data.generator_id + "' appears in more than one dataset");
    out.push_back(std::move(d));
  }
  return out;
}

ojson endpoint_config(const BackendEndpoint& e) {
  return {{"model", e.model_id}, {"max_context_tokens", e.max_context_tokens}};
}

// Only fields that change results go here; URLs, timeouts and concurrency do not.
ojson scoring_config(const ScoringSetup& s, const std::vector<LoadedDataset>& data) {
  ojson c;
  c["datasets"] = ojson::array();
  for (const auto& d : data) c["datasets"].push_back({{"generator", d.data.generator_id}, {"sha256", d.sha256}});
  c["base"] = endpoint_config(s.base);
  c["reference"] = endpoint_config(s.reference);
  c["reward_models"] = ojson::array();
  for (const auto& r : s.rewards) c["reward_models"].push_back(r.model_id);
  c["car_reward_model"] = s.metrics.car_reward_model;
  c["beta"] = s.metrics.beta;
  c["loss_mode"] = to_string(s.metrics.loss_mode);
  c["loss_conditioning"] = to_string(s.metrics.loss_conditioning);
  c["length_counter"] = to_string(s.metrics.length_counter);
  c["exclude_truncated"] = s.metrics.exclude_truncated;
  c["prompt_template"] = s.metrics.prompt_template;
  return c;
}

struct Backends {
  HttpBackend http;
  ScoreCache cache;
  CachedBackend cached{http, cache};

  explicit Backends(const std::string& dir) : cache(dir.empty() ? ScoreCache() : ScoreCache(dir)) {}
};

std::unique_ptr<Backends> make_backends(const std::string& cache_dir) {
  if (cache_dir.empty()) return std::make_unique<Backends>("");
  std::error_code ec;
  std::filesystem::create_directories(cache_dir, ec);
  if (ec) throw DataError("cannot create cache directory '" + cache_dir + "': " + ec.message());
  return std::make_unique<Backends>(cache_dir);
}

std::vector<MetricVector> score_all(const Options& o, const ScoringSetup& s,
                                    const std::vector<LoadedDataset>& data, std::ostream& err,
                                    std::vector<std::string>& warnings) {
  auto backends = make_backends(o.cache_dir);
  std::ostringstream pairs_log;
  std::vector<MetricVector> vectors;
  for (const auto& d : data) {
    err << "carkit: scoring " << d.data.generator_id << " (" << d.data.size() << " pairs)\n";
    ScoredDataset scored = compute_metrics(d.data, backends->cached, s.base, s.reference, s.rewards, s.metrics);
    const MetricVector& mv = scored.metrics;
    if (mv.degenerate_count > 0)
      warnings.push_back(mv.generator_id + ": " + std::to_string(mv.degenerate_count) +
                         " degenerate pair(s) excluded from averages");
    if (mv.truncated_count > 0)
      warnings.push_back(mv.generator_id + ": " + std::to_string(mv.truncated_count) + " truncated pair(s)" +
                         (s.metrics.exclude_truncated ? " excluded from averages" : ""));
    if (!o.emit_pair_metrics.empty()) {
      auto emit = [&](const std::vector<PairMetrics>& rows, const char* model_role, const std::string& model) {
        for (const auto& p : rows) {
          ojson line;
          line["generator"] = mv.generator_id;
          line["scorer"] = model_role;
          line["model"] = model;
          const ojson fields = to_json(p);
          for (const auto& [k, v] : fields.items()) line[k] = v;
          pairs_log << line.dump() << '\n';
        }
      };
      emit(scored.self_pairs, "base", s.base.model_id);
      emit(scored.reference_pairs, "reference", s.reference.model_id);
    }
    vectors.push_back(std::move(scored.metrics));
  }
  err << "carkit: backend requests " << backends->cached.misses() << ", cache hits " << backends->cached.hits()
      << '\n';
  if (!o.emit_pair_metrics.empty()) write_file(o.emit_pair_metrics, pairs_log.str());
  return vectors;
}

void emit(const Options& o, const std::string& text, std::ostream& out) {
  if (o.output.empty()) out << text;
  else write_file(o.output, text);
}

int cmd_score(const Options& o, std::ostream& out, std::ostream& err) {
  Report report;
  report.command = "score";
  report.started_at = timestamp_utc(o.reproducible);
  const ScoringSetup setup = scoring_setup(o);
  const auto data = load_datasets(o, err);
  report.config = scoring_config(setup, data);
  report.generators = score_all(o, setup, data, err, report.warnings);
  report.finished_at = timestamp_utc(o.reproducible);

  if (o.format == "json") emit(o, to_json(report).dump(2) + "\n", out);
  else if (o.format == "table") emit(o, format_metrics_table(report.generators), out);
  else emit(o, format_metrics_csv(report.generators), out);
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  Report report;
  report.command = "evaluate";
  report.started_at = timestamp_utc(o.reproducible);
  const ScoringSetup setup = scoring_setup(o);
  require(!o.ground_truth.empty(), "--ground-truth is required");
  MetricSelector selector;
  selector.metrics = o.metrics;
  selector.ppl_direction = direction_from_string(o.ppl_direction);

  const auto data = load_datasets(o, err);
  const std::string truth_text = read_file(o.ground_truth);
  const GroundTruth truth = load_ground_truth(o.ground_truth);
  std::vector<std::string> ids;
  for (const auto& d : data) ids.push_back(d.data.generator_id);
  check_generator_sets(ids, truth.scores);
  for (const auto& d : data)
    if (d.data.base_model_id && *d.data.base_model_id != truth.base_model)
      throw DataError("dataset '" + d.data.generator_id + "' declares base model '" + *d.data.base_model_id +
                      "' but the ground truth is for '" + truth.base_model + "'");

  report.config = scoring_config(setup, data);
  report.config["ground_truth"] = {{"base_model", truth.base_model}, {"sha256", sha256_hex(truth_text)}};
  report.config["ppl_direction"] = to_string(selector.ppl_direction);
  report.config["metrics"] = selector.metrics;

  report.generators = score_all(o, setup, data, err, report.warnings);
  report.correlation.push_back(evaluate_prediction(report.generators, truth.scores, selector, truth.base_model));
  report.finished_at = timestamp_utc(o.reproducible);

  if (o.format == "json") emit(o, to_json(report).dump(2) + "\n", out);
  else if (o.format == "table") emit(o, format_prediction_table(report.correlation), out);
  else emit(o, format_prediction_csv(report.correlation), out);
  return kExitOk;
}

int cmd_select(const Options& o, std::ostream& out, std::ostream& err) {
  Report report;
  report.command = "select";
  report.started_at = timestamp_utc(o.reproducible);
  check_common(o);
  require(o.format == "json", "select only supports --format json");
  require(!o.instructions.empty(), "--instructions is required");
  require(!o.gen_url.empty(), "--gen-url is required");
  require(!o.gen_model.empty(), "--gen-model is required");
  require(!o.out_prefix.empty(), "--out-prefix is required");
  require(o.n >= 1, "--n must be >= 1");
  require(std::isfinite(o.temperature) && o.temperature >= 0.0, "--temperature must be >= 0");
  require(o.top_p > 0.0 && o.top_p <= 1.0, "--top-p must be in (0, 1]");
  require(!(o.temperature == 0.0 && o.n > 1), "greedy decoding (--temperature 0) cannot sample --n > 1");
  const auto rewards = reward_endpoints(o);
  require(!rewards.empty(), "at least one --reward-url is required");

  BestOfNConfig cfg;
  cfg.n = o.n;
  cfg.temperature = o.temperature;
  cfg.top_p = o.top_p;
  cfg.seed = o.seed;
  cfg.concurrency = static_cast<std::size_t>(o.concurrency);

  const std::string text = read_file(o.instructions);
  const auto instructions = load_instructions(o.instructions);
  if (instructions.empty()) throw DataError(o.instructions + ": no instructions");

  report.config = {{"instructions_sha256", sha256_hex(text)},
                   {"generator", o.gen_model},
                   {"reward_model", rewards.front().model_id},
                   {"n", cfg.n},
                   {"temperature", cfg.temperature},
                   {"top_p", cfg.top_p},
                   {"seed", cfg.seed}};

  auto backends = make_backends(o.cache_dir);
  const BackendEndpoint gen = endpoint(o, o.gen_url, o.gen_model, 0);
  err << "carkit: sampling " << cfg.n << " responses for " << instructions.size() << " instructions\n";
  const BestOfNResult result = build_bon_datasets(instructions, backends->cached, gen, rewards.front(), cfg);

  const std::string best_path = o.out_prefix + ".best.jsonl";
  const std::string worst_path = o.out_prefix + ".worst.jsonl";
  write_file(best_path, write_dataset(result.best));
  write_file(worst_path, write_dataset(result.worst));

  double best_sum = 0, worst_sum = 0;
  for (const auto& pool : result.pools) {
    double hi = -std::numeric_limits<double>::infinity(), lo = std::numeric_limits<double>::infinity();
    for (const auto& c : pool.candidates) {
      hi = std::max(hi, c.reward->value);
      lo = std::min(lo, c.reward->value);
    }
    best_sum += hi;
    worst_sum += lo;
  }
  const double count = static_cast<double>(result.pools.size());
  report.selection = ojson{{"instructions", result.pools.size()},
                           {"best", {{"generator", result.best.generator_id}, {"path", best_path},
                                     {"mean_reward", best_sum / count}}},
                           {"worst", {{"generator", result.worst.generator_id}, {"path", worst_path},
                                      {"mean_reward", worst_sum / count}}}};
  report.finished_at = timestamp_utc(o.reproducible);
  emit(o, to_json(report).dump(2) + "\n", out);
  return kExitOk;
}

int cmd_mock_serve(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.port >= 0 && o.port <= 65535, "--port must be in [0, 65535]");
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  // Block before the server spawns threads so they inherit the mask.
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  MockConfig cfg;
  cfg.host = o.host;
  cfg.port = o.port;
  cfg.logprobs_supported = !o.no_logprobs;
  MockServer server(cfg);
  out << "listening on " << server.base_url() << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  const MockStats stats = server.stats();
  err << "carkit: mock server stopped after " << stats.requests << " requests\n";
  return kExitOk;
}

void add_endpoint_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--api-key", o.api_key, "Bearer token sent to every endpoint")->envname("CARKIT_API_KEY");
  cmd->add_option("--timeout-ms", o.timeout_ms, "Per-request timeout")->envname("CARKIT_TIMEOUT_MS");
  cmd->add_option("--max-retries", o.max_retries, "Retries on transport errors, 429 and 5xx")
      ->envname("CARKIT_MAX_RETRIES");
  cmd->add_option("--reward-url", o.reward_urls, "Reward model as <id>=<url> (repeatable)")
      ->envname("CARKIT_REWARD_URL");
  cmd->add_option("--cache-dir", o.cache_dir, "Persistent score cache directory")->envname("CARKIT_CACHE_DIR");
  cmd->add_option("--concurrency", o.concurrency, "Maximum in-flight backend requests")
      ->envname("CARKIT_CONCURRENCY");
  cmd->add_option("--format", o.format, "json, table or csv")->envname("CARKIT_FORMAT");
  cmd->add_option("--output", o.output, "Write the report here instead of stdout")->envname("CARKIT_OUTPUT");
  cmd->add_flag("--reproducible", o.reproducible, "Zero report timestamps")->envname("CARKIT_REPRODUCIBLE");
}

void add_scoring_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--dataset", o.datasets, "Generator dataset JSONL (repeatable)")->envname("CARKIT_DATASET");
  cmd->add_option("--base-url", o.base_url, "Base model endpoint")->envname("CARKIT_BASE_URL");
  cmd->add_option("--base-model", o.base_model, "Base model id")->envname("CARKIT_BASE_MODEL");
  cmd->add_option("--base-max-context", o.base_max_context, "Base model context window in tokens")
      ->envname("CARKIT_BASE_MAX_CONTEXT");
  cmd->add_option("--ref-url", o.ref_url, "Reference model endpoint (defaults to --base-url)")
      ->envname("CARKIT_REF_URL");
  cmd->add_option("--ref-model", o.ref_model, "Reference model id")->envname("CARKIT_REF_MODEL");
  cmd->add_option("--ref-max-context", o.ref_max_context, "Reference model context window in tokens")
      ->envname("CARKIT_REF_MAX_CONTEXT");
  cmd->add_option("--beta", o.beta, "Loss weight in the CAR denominator")->envname("CARKIT_BETA");
  cmd->add_option("--loss-mode", o.loss_mode, "sum or per-token")->envname("CARKIT_LOSS_MODE");
  cmd->add_option("--loss-conditioning", o.loss_conditioning, "unconditional or conditional")
      ->envname("CARKIT_LOSS_CONDITIONING");
  cmd->add_option("--length-counter", o.length_counter, "backend or whitespace")->envname("CARKIT_LENGTH_COUNTER");
  cmd->add_flag("--exclude-truncated", o.exclude_truncated, "Drop truncated pairs from averages")
      ->envname("CARKIT_EXCLUDE_TRUNCATED");
  cmd->add_option("--prompt-template", o.prompt_template, "Context used for conditional scoring")
      ->envname("CARKIT_PROMPT_TEMPLATE");
  cmd->add_option("--car-reward", o.car_reward, "Reward model id used for CAR (default: first)")
      ->envname("CARKIT_CAR_REWARD");
  cmd->add_option("--emit-pair-metrics", o.emit_pair_metrics, "Write per-pair metrics JSONL here")
      ->envname("CARKIT_EMIT_PAIR_METRICS");
  add_endpoint_options(cmd, o);
}

int exit_for(const std::string& kind, const std::string& msg, std::ostream& err, int code) {
  err << "carkit: error: " << kind << ": " << one_line(msg) << '\n';
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Score, rank and select synthetic instruction-tuning datasets", "carkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolkitName) + " " + kToolkitVersion);

  auto* score = app.add_subcommand("score", "Compute metric vectors for each dataset");
  add_scoring_options(score, o);

  auto* evaluate = app.add_subcommand("evaluate", "Score datasets and correlate metrics with ground truth");
  add_scoring_options(evaluate, o);
  evaluate->add_option("--ground-truth", o.ground_truth, "Benchmark scores JSON")->envname("CARKIT_GROUND_TRUTH");
  evaluate->add_option("--ppl-direction", o.ppl_direction, "Rank direction for PPL and IFD: lower or higher")
      ->envname("CARKIT_PPL_DIRECTION");
  evaluate->add_option("--metric", o.metrics, "Restrict to these metrics (repeatable)")->envname("CARKIT_METRIC");

  auto* select = app.add_subcommand("select", "Build Best-of-N and Worst-of-N datasets");
  select->add_option("--instructions", o.instructions, "Instruction JSONL (id, instruction)")
      ->envname("CARKIT_INSTRUCTIONS");
  select->add_option("--gen-url", o.gen_url, "Generation endpoint")->envname("CARKIT_GEN_URL");
  select->add_option("--gen-model", o.gen_model, "Generator model id")->envname("CARKIT_GEN_MODEL");
  select->add_option("--n", o.n, "Samples per instruction")->envname("CARKIT_N");
  select->add_option("--temperature", o.temperature, "Sampling temperature")->envname("CARKIT_TEMPERATURE");
  select->add_option("--top-p", o.top_p, "Nucleus sampling mass")->envname("CARKIT_TOP_P");
  select->add_option("--seed", o.seed, "Sampling seed")->envname("CARKIT_SEED");
  select->add_option("--out-prefix", o.out_prefix, "Writes <prefix>.best.jsonl and <prefix>.worst.jsonl")
      ->envname("CARKIT_OUT_PREFIX");
  add_endpoint_options(select, o);

  auto* mock_serve = app.add_subcommand("mock-serve", "Run the deterministic mock backend");
  mock_serve->add_option("--host", o.host, "Bind address")->envname("CARKIT_HOST");
  mock_serve->add_option("--port", o.port, "Bind port (0 picks a free one)")->envname("CARKIT_PORT");
  mock_serve->add_flag("--no-logprobs", o.no_logprobs, "Answer logprob requests with 501");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return exit_for("config", e.what(), err, kExitConfig);
  }

  try {
    if (score->parsed()) return cmd_score(o, out, err);
    if (evaluate->parsed()) return cmd_evaluate(o, out, err);
    if (select->parsed()) return cmd_select(o, out, err);
    return cmd_mock_serve(o, out, err);
  } catch (const ConfigError& e) {
    return exit_for("config", e.what(), err, kExitConfig);
  } catch (const ArgumentError& e) {
    return exit_for("config", e.what(), err, kExitConfig);
  } catch (const BackendError& e) {
    return exit_for("backend", e.what(), err, kExitBackend);
  } catch (const CacheError& e) {
    return exit_for("cache", e.what(), err, kExitData);
  } catch (const DataError& e) {
    return exit_for("data", e.what(), err, kExitData);
  }
}

}  // namespace carkit
