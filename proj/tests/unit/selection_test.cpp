#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "carkit/error.hpp"
#include "carkit/mock_server.hpp"
#include "carkit/selection.hpp"

using namespace carkit;

namespace {

SampledResponseSet pool(const std::vector<std::optional<double>>& rewards) {
  SampledResponseSet s;
  s.instruction_id = "q";
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    Candidate c;
    c.response = {"q", "g", "r" + std::to_string(i), 0.8, 1.0, static_cast<std::uint32_t>(i)};
    if (rewards[i]) c.reward = RewardScore{"rm", *rewards[i]};
    s.candidates.push_back(c);
  }
  return s;
}

BackendEndpoint at(const MockServer& server, const std::string& model) {
  BackendEndpoint e;
  e.base_url = server.base_url();
  e.model_id = model;
  return e;
}

std::vector<InstructionRecord> instructions(int n) {
  std::vector<InstructionRecord> v;
  for (int i = n - 1; i >= 0; --i) v.push_back({"ins" + std::to_string(i), "Task " + std::to_string(i), {}, {}});
  return v;
}

}  // namespace

TEST(Select, Examples) {
  EXPECT_EQ(select_best(pool({0.1, 0.9, 0.5})).sample_index, 1u);
  EXPECT_EQ(select_best(pool({0.7, 0.7})).sample_index, 0u);
  EXPECT_EQ(select_best(pool({0.3})).sample_index, 0u);
  EXPECT_EQ(select_worst(pool({0.1, 0.9, 0.5})).sample_index, 0u);
  EXPECT_EQ(select_worst(pool({0.4, 0.4, 0.4})).sample_index, 0u);
  EXPECT_EQ(select_worst(pool({-2.0})).sample_index, 0u);
}

TEST(Select, MissingRewardIsError) {
  EXPECT_THROW(select_best(pool({0.1, std::nullopt})), DataError);
  EXPECT_THROW(select_worst(pool({std::nullopt})), DataError);
}

TEST(Select, PermutationStable) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::optional<double>> r(1 + rng() % 8);
    for (auto& v : r) v = double(rng() % 4);
    auto s = pool(r);
    const auto best = select_best(s).sample_index, worst = select_worst(s).sample_index;
    std::shuffle(s.candidates.begin(), s.candidates.end(), rng);
    EXPECT_EQ(select_best(s).sample_index, best);
    EXPECT_EQ(select_worst(s).sample_index, worst);
  }
}

TEST(BestOfN, DominanceAndCoverage) {
  MockServer server;
  HttpBackend http;
  BestOfNConfig cfg;
  cfg.seed = 7;
  const auto ins = instructions(3);
  const auto res = build_bon_datasets(ins, http, at(server, "gen"), at(server, "rm"), cfg);
  ASSERT_EQ(res.best.size(), 3u);
  ASSERT_EQ(res.worst.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(res.best.pairs[i].instruction.id, "ins" + std::to_string(i));
    EXPECT_GE(mock::reward(res.best.pairs[i].response.text), mock::reward(res.worst.pairs[i].response.text));
    EXPECT_EQ(res.pools[i].n(), 5u);
    bool all_equal = true;
    for (const auto& c : res.pools[i].candidates)
      all_equal = all_equal && c.reward->value == res.pools[i].candidates[0].reward->value;
    EXPECT_EQ(all_equal, mock::reward(res.best.pairs[i].response.text) ==
                             mock::reward(res.worst.pairs[i].response.text));
  }
  EXPECT_EQ(res.best.generator_id, "gen/best-of-5");
  EXPECT_EQ(res.worst.generator_id, "gen/worst-of-5");
  EXPECT_TRUE(validate_dataset(res.best).accepted());
}

TEST(BestOfN, SingleSampleMakesBestEqualWorst) {
  MockServer server;
  HttpBackend http;
  BestOfNConfig cfg;
  cfg.n = 1;
  const auto res = build_bon_datasets(instructions(4), http, at(server, "gen"), at(server, "rm"), cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    auto b = res.best.pairs[i], w = res.worst.pairs[i];
    b.response.generator_id = w.response.generator_id = "";
    EXPECT_EQ(b, w);
  }
}

TEST(BestOfN, DeterministicUnderFixedSeed) {
  MockServer server;
  HttpBackend http;
  BestOfNConfig cfg;
  cfg.seed = 123;
  const auto a = build_bon_datasets(instructions(10), http, at(server, "gen"), at(server, "rm"), cfg);
  cfg.concurrency = 1;
  const auto b = build_bon_datasets(instructions(10), http, at(server, "gen"), at(server, "rm"), cfg);
  EXPECT_EQ(write_dataset(a.best), write_dataset(b.best));
  EXPECT_EQ(write_dataset(a.worst), write_dataset(b.worst));
}

TEST(BestOfN, Errors) {
  MockServer server;
  HttpBackend http;
  BestOfNConfig cfg;
  cfg.n = 0;
  EXPECT_THROW(build_bon_datasets(instructions(2), http, at(server, "gen"), at(server, "rm"), cfg),
               ArgumentError);
  cfg.n = 5;
  BackendEndpoint dead;
  dead.base_url = "http://127.0.0.1:1";
  dead.model_id = "gen";
  dead.max_retries = 0;
  try {
    build_bon_datasets(instructions(2), http, dead, at(server, "rm"), cfg);
    FAIL();
  } catch (const BackendUnavailableError& e) {
    EXPECT_NE(std::string(e.what()).find("instruction 'ins"), std::string::npos);
  }
}
