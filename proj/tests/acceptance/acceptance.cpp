// Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
// any criterion fails.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/harness.hpp"
#include "../support/oracle.hpp"
#include "carkit/backends.hpp"
#include "carkit/corpus.hpp"
#include "carkit/metrics.hpp"
#include "carkit/mock_server.hpp"
#include "carkit/ranking.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace carkit;
using nlohmann::json;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

// Published benchmark rows: (LC, Arena-Hard WR, stated AP, tolerance).
struct ApRow {
  const char* label;
  double lc, ah, ap, tol;
};

Check criterion_ap() {
  const ApRow rows[] = {
      // GPT-4 vs open models on Llama-3.1-Minitron-4B; AP stated at 2 decimals.
      {"Gemma-2-9b-it", 16.09, 13.7, 14.90, 0.005 + 1e-9},
      {"Gemma-2-27b-it", 13.93, 12.4, 13.17, 0.01},
      {"Llama-3-70b-Instruct", 10.55, 6.7, 8.62, 0.01},
      {"Llama-3.1-70b-Instruct", 9.52, 8.3, 8.91, 0.005 + 1e-9},
      {"Qwen2.5-7B-Instruct", 13.50, 10.6, 12.05, 0.005 + 1e-9},
      {"Qwen2.5-72B-Instruct", 19.20, 13.1, 16.15, 0.005 + 1e-9},
      {"GPT-4", 6.63, 4.8, 5.72, 0.01},
      // Rejection sampling rows.
      {"Minitron-4B Best-of-N", 15.94, 11.9, 13.92, 0.005},
      {"Minitron-4B Worst-of-N", 13.02, 11.0, 12.01, 0.005},
      {"Minitron-4B Sampling", 15.71, 11.8, 13.755, 0.005},
      {"Minitron-4B Greedy", 16.13, 11.0, 13.565, 0.005},
      {"Qwen2.5-3B Best-of-N", 13.83, 21.0, 17.415, 0.005},
      {"Qwen2.5-3B Worst-of-N", 12.37, 17.9, 15.135, 0.005},
      {"Qwen2.5-3B Sampling", 13.43, 20.1, 16.765, 0.005},
      {"Qwen2.5-3B Greedy", 13.78, 19.4, 16.59, 0.005},
  };
  Check c;
  double worst = 0;
  for (const auto& r : rows) {
    const double diff = std::abs(average_performance(r.lc, r.ah) - r.ap);
    worst = std::max(worst, diff);
    c.expect(diff <= r.tol, std::string(r.label) + " off by " + std::to_string(diff));
  }
  if (c.ok) c.detail = "15 rows, max |diff| " + std::to_string(worst);
  return c;
}

RankVector to_ranks(const std::vector<double>& r) {
  RankVector v;
  for (std::size_t i = 0; i < r.size(); ++i) v.ranks["g" + std::to_string(10 + i)] = r[i];
  return v;
}

Check criterion_spearman() {
  Check c;
  std::mt19937_64 rng(20240601);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 3 + rng() % 8;
    std::vector<double> a(n), b(n);
    std::iota(a.begin(), a.end(), 1.0);
    std::iota(b.begin(), b.end(), 1.0);
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    const auto got = spearman(to_ranks(a), to_ranks(b));
    const double want = oracle::pearson(a, b);
    worst = std::max(worst, std::abs(got.rho - want));
    c.expect(!got.tie_corrected, "tie-free case took the tie-corrected path");
    c.expect(std::abs(got.rho - want) <= 1e-12, "tie-free mismatch at case " + std::to_string(t));
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 3 + rng() % 8;
    std::map<std::string, double> x, y;
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string id = "g" + std::to_string(10 + i);
      xs.push_back(x[id] = double(rng() % 3));
      ys.push_back(y[id] = double(rng() % 4));
    }
    const auto got = spearman(rank_values(x, Direction::kHigherIsBetter), rank_values(y, Direction::kHigherIsBetter));
    const double want = oracle::pearson(oracle::average_ranks(xs, true), oracle::average_ranks(ys, true));
    worst = std::max(worst, std::abs(got.rho - want));
    c.expect(std::abs(got.rho - want) <= 1e-12, "tied mismatch at case " + std::to_string(t));
  }
  if (c.ok) c.detail = "1000 tie-free + 200 tied, max |diff| " + std::to_string(worst);
  return c;
}

Check criterion_perplexity() {
  Check c;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-12.0, 0.0);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> lp(1 + rng() % 64);
    for (auto& v : lp) v = u(rng);
    double nll = 0;
    for (double v : lp) nll -= v;
    const double want = std::exp(nll / double(lp.size()));
    const double rel = std::abs(response_perplexity(lp) - want) / want;
    worst = std::max(worst, rel);
    c.expect(rel <= 1e-12, "relative error " + std::to_string(rel));
  }
  for (std::size_t n : {1u, 2u, 5u, 100u, 4096u})
    c.expect(response_perplexity(std::vector<double>(n, 0.0)) == 1.0, "all-zero vector not exactly 1");
  if (c.ok) c.detail = "100 vectors, max rel err " + std::to_string(worst);
  return c;
}

Check criterion_car() {
  Check c;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> r(1e-3, 100), l(0, 100), b(1e-3, 20), bump(1e-3, 10);
  for (int t = 0; t < 1000; ++t) {
    const double rv = r(rng), lv = l(rng), bv = b(rng);
    const double base = car(rv, lv, bv);
    c.expect(car(rv, lv + bump(rng), bv) < base, "not decreasing in loss");
    c.expect(car(rv + bump(rng), lv, bv) > base, "not increasing in reward");
    c.expect(car(rv, 0.0, bv) == rv, "car(r, 0, b) != r");
    c.expect(car(rv, lv, 0.0) == rv, "car(r, L, 0) != r");
  }
  c.expect(car(2.0, 1.0, 3.0) == 0.5, "car(2, 1, 3) != 0.5");
  if (c.ok) c.detail = "1000 triples";
  return c;
}

std::string dataset_jsonl(const std::string& gen, const std::vector<oracle::Pair>& pairs) {
  std::string out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out += json{{"id", "q" + std::to_string(100 + i)},
                {"instruction", pairs[i].instruction},
                {"response", pairs[i].response},
                {"generator", gen}}
               .dump() +
           "\n";
  return out;
}

std::string ground_truth(const std::map<std::string, double>& ap) {
  json scores = json::object();
  for (const auto& [gen, v] : ap) scores[gen] = {{"ae2_lc", v}, {"ae2_wr", v}, {"ah_wr", v}};
  return json{{"base_model", "base"}, {"scores", scores}}.dump();
}

double rho_of(const json& report, const std::string& metric) {
  for (const auto& m : report["correlation"][0]["metrics"])
    if (m["metric"] == metric) return m["rho"].get<double>();
  return std::nan("");
}

std::vector<std::string> scoring_flags(const MockServer& server) {
  return {"--base-url", server.base_url(), "--base-model", "base", "--ref-model", "gpt2", "--reward-url",
          "rm=" + server.base_url(), "--reproducible"};
}

// Token string of `tokens` single-letter words whose byte length is
// congruent to `k` mod 7, so the mock reward is exactly k/7.
std::string planted_response(std::size_t tokens, int k, std::mt19937_64& rng) {
  std::string s;
  for (std::size_t i = 0; i < tokens; ++i) {
    if (i) s += ' ';
    s += char('a' + rng() % 26);
  }
  while (int(s.size() % 7) != k) s += char('a' + rng() % 26);
  return s;
}

Check criterion_planted(const MockServer& server, const harness::TempDir& dir) {
  Check c;
  std::mt19937_64 rng(99);

  // Fixture one: free-form responses; the CAR ordering comes from the oracle.
  std::vector<std::string> args = {"evaluate"};
  std::map<std::string, double> planted;
  for (int g = 0; g < 5; ++g) {
    std::vector<oracle::Pair> pairs;
    for (int i = 0; i < 8; ++i)
      pairs.push_back({"Question " + std::to_string(i) + " about topic " + std::to_string(i * 3),
                       mock::generate("teacher" + std::to_string(g), std::to_string(i), 0, 0.0, 1.0, 0)});
    const std::string gen = "gen" + std::to_string(g);
    const std::string path = dir.file(gen + ".jsonl");
    harness::write_text(path, dataset_jsonl(gen, pairs));
    args.insert(args.end(), {"--dataset", path});
    planted[gen] = 10.0 + 100.0 * oracle::expected(pairs, "base", 4096, "gpt2", 1024, {"rm"}, "rm", 3.0).car;
  }
  harness::write_text(dir.file("gt1.json"), ground_truth(planted));
  args.insert(args.end(), {"--ground-truth", dir.file("gt1.json")});
  for (const auto& f : scoring_flags(server)) args.push_back(f);
  auto r = harness::run(args);
  c.expect(r.code == 0, "fixture one exit " + std::to_string(r.code) + ": " + r.err);
  double rho1 = std::nan("");
  if (r.code == 0) {
    rho1 = rho_of(json::parse(r.out), "CAR");
    c.expect(std::abs(rho1 - 1.0) <= 1e-12, "fixture one rho(CAR) = " + std::to_string(rho1));
  }

  // Fixture two: reward rises and loss rises much faster, so AR and CAR
  // order the generators in opposite directions. AP follows CAR.
  args = {"evaluate"};
  planted.clear();
  const std::size_t lengths[] = {1, 10, 40, 160, 640};
  for (int k = 1; k <= 5; ++k) {
    std::vector<oracle::Pair> pairs;
    for (int i = 0; i < 4; ++i) pairs.push_back({"Task " + std::to_string(i), planted_response(lengths[k - 1], k, rng)});
    const std::string gen = "planted" + std::to_string(k);
    const std::string path = dir.file(gen + ".jsonl");
    harness::write_text(path, dataset_jsonl(gen, pairs));
    args.insert(args.end(), {"--dataset", path});
    planted[gen] = 30.0 - 5.0 * k;
  }
  harness::write_text(dir.file("gt2.json"), ground_truth(planted));
  args.insert(args.end(), {"--ground-truth", dir.file("gt2.json")});
  for (const auto& f : scoring_flags(server)) args.push_back(f);
  r = harness::run(args);
  c.expect(r.code == 0, "fixture two exit " + std::to_string(r.code) + ": " + r.err);
  if (r.code == 0) {
    const auto report = json::parse(r.out);
    const double car_rho = rho_of(report, "CAR"), ar_rho = rho_of(report, "AR:rm");
    c.expect(car_rho > ar_rho, "fixture two rho(CAR) " + std::to_string(car_rho) + " <= rho(AR) " +
                                   std::to_string(ar_rho));
    if (c.ok)
      c.detail = "fixture one rho(CAR)=" + std::to_string(rho1) + "; fixture two rho(CAR)=" +
                 std::to_string(car_rho) + " rho(AR)=" + std::to_string(ar_rho);
  }
  return c;
}

Check criterion_determinism(const MockServer& server, const harness::TempDir& dir) {
  Check c;
  std::vector<std::string> args = {"score", "--cache-dir", dir.file("det-cache")};
  for (int g = 0; g < 3; ++g) {
    std::vector<oracle::Pair> pairs;
    for (int i = 0; i < 40; ++i)
      pairs.push_back({"Prompt " + std::to_string(i), mock::generate("m" + std::to_string(g), std::to_string(i),
                                                                      1, 0.9, 0.95, 3)});
    pairs.push_back({"Empty", ""});
    const std::string path = dir.file("det" + std::to_string(g) + ".jsonl");
    harness::write_text(path, dataset_jsonl("det" + std::to_string(g), pairs));
    args.insert(args.end(), {"--dataset", path});
  }
  for (const auto& f : scoring_flags(server)) args.push_back(f);
  auto with = [&](const char* conc) {
    auto a = args;
    a.insert(a.end(), {"--concurrency", conc});
    return harness::run(a);
  };
  const auto warmup = with("8");
  c.expect(warmup.code == 0, "warm-up exit " + std::to_string(warmup.code) + ": " + warmup.err);
  const auto one = with("1"), many = with("32");
  c.expect(one.code == 0 && many.code == 0, "scoring failed");
  c.expect(!one.out.empty() && one.out == many.out, "reports differ between concurrency 1 and 32");
  if (c.ok) c.detail = std::to_string(one.out.size()) + " identical bytes";
  return c;
}

Check criterion_best_of_n(const MockServer& server, const harness::TempDir& dir) {
  Check c;
  std::string ins;
  std::set<std::string> ids;
  for (int i = 0; i < 50; ++i) {
    const std::string id = "ins" + std::to_string(1000 + i * 37 % 50);
    ids.insert(id);
    ins += json{{"id", id}, {"instruction", "Instruction number " + std::to_string(i)}}.dump() + "\n";
  }
  harness::write_text(dir.file("instructions.jsonl"), ins);
  auto run_select = [&](const std::string& prefix) {
    return harness::run({"select", "--instructions", dir.file("instructions.jsonl"), "--gen-url", server.base_url(),
                         "--gen-model", "gen", "--reward-url", "rm=" + server.base_url(), "--n", "5", "--seed", "7",
                         "--out-prefix", dir.file(prefix), "--reproducible"});
  };
  const auto a = run_select("bon-a"), b = run_select("bon-b");
  c.expect(a.code == 0 && b.code == 0, "select failed: " + a.err);
  if (!c.ok) return c;
  const auto best = parse_dataset(harness::read_text(dir.file("bon-a.best.jsonl")));
  const auto worst = parse_dataset(harness::read_text(dir.file("bon-a.worst.jsonl")));
  for (const auto* d : {&best, &worst}) {
    std::set<std::string> seen;
    for (const auto& p : d->pairs) seen.insert(p.instruction.id);
    c.expect(d->size() == 50 && seen == ids, "coverage is not exact");
  }
  std::size_t strict = 0;
  for (std::size_t i = 0; i < best.size() && c.ok; ++i) {
    const double rb = oracle::reward(best.pairs[i].response.text), rw = oracle::reward(worst.pairs[i].response.text);
    c.expect(best.pairs[i].instruction.id == worst.pairs[i].instruction.id, "datasets out of step");
    c.expect(rb >= rw, "best reward below worst for " + best.pairs[i].instruction.id);
    strict += rb > rw;
  }
  c.expect(harness::read_text(dir.file("bon-a.best.jsonl")) == harness::read_text(dir.file("bon-b.best.jsonl")) &&
               harness::read_text(dir.file("bon-a.worst.jsonl")) == harness::read_text(dir.file("bon-b.worst.jsonl")),
           "rerun not byte-identical");
  if (c.ok) c.detail = "50 instructions, " + std::to_string(strict) + " strictly better";
  return c;
}

Check criterion_round_trip_and_cache(const harness::TempDir& dir) {
  Check c;
  std::mt19937_64 rng(10000);
  const std::vector<std::string> words = {"alpha", "beta", "caf\xc3\xa9", "\xe6\x97\xa5\xe6\x9c\xac", "quote\"d",
                                          "back\\slash", "tab\there", "line\nbreak", "\xf0\x9f\x98\x80", ""};
  std::string text;
  std::vector<std::string> lines;
  for (int i = 0; i < 10000; ++i) {
    const int id = i / 2;
    json j = {{"id", "id" + std::to_string(id)},
              {"instruction", "instruction " + std::to_string(id) + " " + words[id % 9]},
              {"response", words[rng() % words.size()] + " " + std::to_string(rng())},
              {"generator", "gen\xc3\xa9"},
              {"temperature", double(rng() % 100) / 64.0},
              {"top_p", double(1 + rng() % 64) / 64.0},
              {"sample_index", i % 2}};
    if (i % 3 == 0) j["source"] = "src" + std::to_string(i % 5);
    if (i % 4 == 0) j["task_category"] = words[i % 4];
    lines.push_back(j.dump());
  }
  std::shuffle(lines.begin(), lines.end(), rng);
  for (const auto& l : lines) text += l + "\n";
  const auto parsed = parse_dataset(text);
  const std::string written = write_dataset(parsed);
  const auto reparsed = parse_dataset(written);
  c.expect(parsed.size() == 10000, "record count " + std::to_string(parsed.size()));
  c.expect(reparsed == parsed, "parse(write(d)) != d");
  c.expect(write_dataset(reparsed) == written, "second write differs");

  MockServer server;
  HttpBackend http;
  ScoreCache store(dir.file("rt-cache"));
  CachedBackend cached(http, store);
  BackendEndpoint e;
  e.base_url = server.base_url();
  e.model_id = "base";
  std::vector<std::jthread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&] {
      for (int i = 0; i < 5; ++i) cached.score_logprobs(e, "Same context\n", "same continuation every time");
    });
  threads.clear();
  httplib::Client client(server.base_url());
  auto stats = client.Get("/stats");
  c.expect(stats && json::parse(stats->body)["requests"] == 1,
           "backend saw " + (stats ? stats->body : std::string("no stats")));
  if (c.ok) c.detail = "10000 lines round-tripped; 40 identical requests, 1 backend hit";
  return c;
}

}  // namespace

int main() {
  harness::TempDir dir;
  MockServer server;
  const std::vector<std::pair<std::string, std::function<Check()>>> criteria = {
      {"AP arithmetic matches published rows", criterion_ap},
      {"Spearman agrees with Pearson-on-ranks oracle", criterion_spearman},
      {"perplexity closed form", criterion_perplexity},
      {"CAR properties", criterion_car},
      {"planted ordering end to end", [&] { return criterion_planted(server, dir); }},
      {"report determinism across concurrency", [&] { return criterion_determinism(server, dir); }},
      {"Best-of-N dominance and determinism", [&] { return criterion_best_of_n(server, dir); }},
      {"round trip and cache", [&] { return criterion_round_trip_and_cache(dir); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Check c;
    try {
      c = criteria[i].second();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("exception: ") + e.what();
    }
    failures += !c.ok;
    std::printf("criterion %zu %s: %s (%s)\n", i + 1, c.ok ? "PASS" : "FAIL", criteria[i].first.c_str(),
                c.detail.c_str());
  }
  return failures == 0 ? 0 : 1;
}
