#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"
#include "rankaudit/score.hpp"
#include "rankaudit/simlab.hpp"

using namespace rankaudit;

namespace {

std::vector<TokenScoreEvent> with_ranks(std::initializer_list<int> ranks) {
  std::vector<TokenScoreEvent> ev;
  for (int r : ranks) ev.push_back({0, -0.5 * r, r, 0.3 * r});
  return ev;
}

std::vector<TokenScoreEvent> random_events(std::mt19937_64& gen, int vocab) {
  std::uniform_int_distribution<int> len(1, 12), rank(1, vocab);
  std::uniform_real_distribution<double> lp(-8.0, 0.0), h(0.0, std::log(vocab));
  std::vector<TokenScoreEvent> ev(len(gen));
  for (auto& e : ev) e = {0, lp(gen), rank(gen), h(gen)};
  return ev;
}

class FailingBackend : public ScoringBackend {
 protected:
  std::vector<TokenScoreEvent> do_score(const PromptRecord&, std::string_view) override {
    throw Error("tokenizer exploded");
  }
};

}  // namespace

TEST(Score, RankExampleTokenRankAndLogRank) {
  const auto ev = with_ranks({1, 3, 9});
  EXPECT_NEAR(aggregate_score(ev, ScoreFunctionKind::TokenRank), 13.0 / 3.0, 1e-15);
  EXPECT_NEAR(aggregate_score(ev, ScoreFunctionKind::LogRank), std::log(3.0), 1e-15);
}

TEST(Score, AllArgmaxGivesZeroLogRankAndGuardedRatio) {
  const std::vector<TokenScoreEvent> ev = {{0, -0.1, 1, 0.5}, {2, -0.2, 1, 0.7}};
  EXPECT_EQ(aggregate_score(ev, ScoreFunctionKind::LogRank), 0.0);
  EXPECT_EQ(aggregate_score(ev, ScoreFunctionKind::LogLikelihoodLogRankRatio), 0.0);
}

TEST(Score, SumAndMeanConventions) {
  const std::vector<TokenScoreEvent> ev = {{0, -1.0, 2, 0.5}, {1, -3.0, 4, 1.5}};
  EXPECT_DOUBLE_EQ(aggregate_score(ev, ScoreFunctionKind::LogLikelihood), -4.0);
  EXPECT_DOUBLE_EQ(aggregate_score(ev, ScoreFunctionKind::Entropy), 1.0);
  EXPECT_DOUBLE_EQ(aggregate_score(ev, ScoreFunctionKind::LogLikelihoodLogRankRatio),
                   -4.0 / (std::log(2.0) + std::log(4.0)));
}

TEST(Score, EmptyEventsRejected) {
  std::vector<TokenScoreEvent> none;
  for (auto k : kAllScoreFunctions) EXPECT_THROW(aggregate_score(none, k), InvalidInput);
  EXPECT_THROW(aggregate_all(none), InvalidInput);
}

TEST(Score, TiesBrokenByAscendingTokenId) {
  const std::vector<double> lp(4, std::log(0.25));
  for (int t = 0; t < 4; ++t) EXPECT_EQ(score_token(lp, t).rank, t + 1);
  const auto e = score_token(lp, 2);
  EXPECT_NEAR(e.entropy, std::log(4.0), 1e-15);
  EXPECT_EQ(e.log_prob, std::log(0.25));
}

TEST(Score, RankCountsStrictlyMoreProbableTokens) {
  const std::vector<double> lp = {std::log(0.1), std::log(0.5), std::log(0.1), std::log(0.3)};
  EXPECT_EQ(score_token(lp, 1).rank, 1);
  EXPECT_EQ(score_token(lp, 3).rank, 2);
  EXPECT_EQ(score_token(lp, 0).rank, 3);
  EXPECT_EQ(score_token(lp, 2).rank, 4);
}

TEST(Score, SingleTokenVocabularyIsDegenerate) {
  const std::vector<double> lp = {0.0};
  const auto e = score_token(lp, 0);
  EXPECT_EQ(e.rank, 1);
  EXPECT_EQ(e.entropy, 0.0);
  EXPECT_EQ(e.log_prob, 0.0);
}

TEST(Score, ValidateEventBounds) {
  EXPECT_NO_THROW(validate_event({0, -0.5, 2, 0.5}, 4));
  EXPECT_THROW(validate_event({0, -0.5, 0, 0.5}), InvalidInput);
  EXPECT_THROW(validate_event({0, 0.1, 1, 0.5}), InvalidInput);
  EXPECT_THROW(validate_event({0, -0.5, 1, -0.1}), InvalidInput);
  EXPECT_THROW(validate_event({0, -0.5, 5, 0.5}, 4), InvalidInput);
  EXPECT_THROW(validate_event({0, -0.5, 1, std::log(4.0) + 0.01}, 4), InvalidInput);
  EXPECT_THROW(score_token(std::vector<double>{0.0}, 1), InvalidInput);
}

TEST(Score, NamesRoundTrip) {
  for (auto k : kAllScoreFunctions) EXPECT_EQ(score_function_from_string(to_string(k)), k);
  EXPECT_EQ(to_string(ScoreFunctionKind::LogRank), "log_rank");
  EXPECT_EQ(to_string(ScoreFunctionKind::LogLikelihoodLogRankRatio), "lrr");
  EXPECT_THROW(score_function_from_string("perplexity"), InvalidInput);
}

TEST(ScoreProperty, BoundsAndZeroLogRankIffAllArgmax) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 2000; ++trial) {
    auto ev = random_events(gen, 5);
    if (trial % 3 == 0) for (auto& e : ev) e.rank = 1;
    const auto a = aggregate_all(ev);
    EXPECT_GE(a[ScoreFunctionKind::LogRank], 0.0);
    EXPECT_GE(a[ScoreFunctionKind::TokenRank], 1.0);
    EXPECT_LE(a[ScoreFunctionKind::LogLikelihood], 0.0);
    EXPECT_GE(a[ScoreFunctionKind::Entropy], 0.0);
    const bool all_one = std::all_of(ev.begin(), ev.end(), [](auto& e) { return e.rank == 1; });
    EXPECT_EQ(a[ScoreFunctionKind::LogRank] == 0.0, all_one);
  }
}

TEST(ScoreProperty, PermutationInvariant) {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 500; ++trial) {
    auto ev = random_events(gen, 9);
    const auto before = aggregate_all(ev);
    std::shuffle(ev.begin(), ev.end(), gen);
    const auto after = aggregate_all(ev);
    for (auto k : kAllScoreFunctions) {
      EXPECT_NEAR(before[k], after[k], 1e-12 * (1.0 + std::abs(before[k])));
    }
  }
}

TEST(ScoreProperty, AggregateAllMatchesSingleKinds) {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 200; ++trial) {
    const auto ev = random_events(gen, 7);
    const auto all = aggregate_all(ev);
    for (auto k : kAllScoreFunctions) EXPECT_EQ(all[k], aggregate_score(ev, k));
  }
}

TEST(ScoreResponse, EmptyResponseRejected) {
  SyntheticScoringBackend backend(SyntheticModel(4, 1, GeneratedLogits{3}));
  PromptRecord p{"p", {{"user", "hi"}}, ""};
  EXPECT_THROW(score_response(p, "", backend), InvalidInput);
}

TEST(ScoreResponse, BackendFailureCarriesPromptId) {
  FailingBackend backend;
  PromptRecord p{"prompt-17", {{"user", "hi"}}, ""};
  try {
    score_response(p, "abc", backend);
    FAIL();
  } catch (const ScoringBackendError& e) {
    EXPECT_EQ(e.prompt_id(), "prompt-17");
    EXPECT_NE(std::string(e.what()).find("tokenizer exploded"), std::string::npos);
  }
}

TEST(ScoreResponse, SelfGeneratedTextMatchesExactConditionals) {
  const SyntheticModel ref(6, 2, GeneratedLogits{21, 1.5}, DecodingParams{0.7, 12});
  SyntheticScoringBackend backend(ref);
  const SyntheticTokenizer tok(6);
  for (int i = 0; i < 20; ++i) {
    PromptRecord p{"p" + std::to_string(i), {{"user", "prompt " + std::to_string(i)}}, ""};
    const auto tokens = sample(ref, prompt_seed_for(p), mix_seed(5, i));
    const auto scored = score_response(p, tok.render(tokens, true), backend);
    const auto expect = oracle::events(ref, prompt_seed_for(p), tokens);
    ASSERT_EQ(scored.events.size(), expect.size());
    for (std::size_t j = 0; j < expect.size(); ++j) {
      EXPECT_EQ(scored.events[j].token_id, tokens[j]);
      EXPECT_NEAR(scored.events[j].log_prob, expect[j].log_prob, 1e-12);
      EXPECT_EQ(scored.events[j].rank, expect[j].rank);
      EXPECT_NEAR(scored.events[j].entropy, expect[j].entropy, 1e-12);
    }
    const auto again = score_response(p, tok.render(tokens, true), backend);
    EXPECT_EQ(again.events, scored.events);
    EXPECT_EQ(again.aggregates, scored.aggregates);
  }
}
