#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>
#include <unistd.h>

#include "rankaudit/apiclient.hpp"
#include "rankaudit/errors.hpp"
#include "rankaudit/mock_endpoint.hpp"

using namespace rankaudit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<PromptRecord> parse(const std::string& text, TurnMode mode = TurnMode::FirstUserTurn) {
  std::istringstream in(text);
  return parse_corpus(in, mode);
}

std::size_t error_line(const std::string& text) {
  try {
    parse(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

std::vector<PromptRecord> prompts(int n) {
  std::vector<PromptRecord> out;
  for (int i = 0; i < n; ++i) out.push_back({"p" + std::to_string(i), {{"user", "question " + std::to_string(i)}}, ""});
  return out;
}

SyntheticModel model(std::uint64_t seed = 1) {
  return SyntheticModel(8, 2, GeneratedLogits{seed}, DecodingParams{0.5, 12});
}

CollectOptions fast(std::size_t budget) {
  CollectOptions o;
  o.budget = budget;
  o.concurrency = 3;
  o.retry.initial_backoff_seconds = 0.001;
  return o;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

class StoreDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rankaudit_api_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST(Corpus, TextAndMessagesRecords) {
  const auto r = parse(
      "{\"id\": \"a\", \"text\": \"hello\"}\n"
      "\n"
      "{\"id\": 7, \"messages\": [{\"role\": \"system\", \"content\": \"s\"}, {\"role\": \"user\", \"content\": \"u1\"},"
      " {\"role\": \"assistant\", \"content\": \"a1\"}, {\"role\": \"user\", \"content\": \"u2\"}], \"source\": \"chat\"}\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].id, "a");
  EXPECT_EQ(r[0].text(), "hello");
  EXPECT_EQ(r[1].id, "7");
  EXPECT_EQ(r[1].source, "chat");
  ASSERT_EQ(r[1].messages.size(), 1u);
  EXPECT_EQ(r[1].messages[0].content, "u1");
}

TEST(Corpus, FullHistoryKeepsEveryTurn) {
  const auto r = parse(
      "{\"id\": \"x\", \"messages\": [{\"role\": \"user\", \"content\": \"u1\"}, {\"role\": \"assistant\", "
      "\"content\": \"a1\"}]}\n",
      TurnMode::FullHistory);
  ASSERT_EQ(r[0].messages.size(), 2u);
  EXPECT_EQ(turn_mode_from_string("full_history"), TurnMode::FullHistory);
  EXPECT_THROW(turn_mode_from_string("last_turn"), InvalidInput);
}

TEST(Corpus, MalformedRecordsReportLineNumbers) {
  EXPECT_EQ(error_line("{\"id\": \"a\", \"text\": \"x\"}\n{broken\n"), 2u);
  EXPECT_EQ(error_line("\n\n{\"text\": \"no id\"}\n"), 3u);
  EXPECT_EQ(error_line("{\"id\": \"a\"}\n"), 1u);
  EXPECT_EQ(error_line("{\"id\": \"a\", \"text\": \"\"}\n"), 1u);
  EXPECT_EQ(error_line("{\"id\": \"a\", \"messages\": [{\"role\": \"assistant\", \"content\": \"x\"}]}\n"), 1u);
  EXPECT_EQ(error_line("[1, 2]\n"), 1u);
}

TEST(Corpus, DuplicateIdsRejected) {
  EXPECT_THROW(parse("{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n"), CorpusIntegrityError);
}

TEST(Sampling, FullSizeIsPermutationAndSeeded) {
  const auto all = prompts(50);
  auto s = sample_prompts(all, 50, 3);
  EXPECT_EQ(s, sample_prompts(all, 50, 3));
  EXPECT_NE(s, sample_prompts(all, 50, 4));
  std::sort(s.begin(), s.end(), [](auto& a, auto& b) { return a.id < b.id; });
  auto sorted = all;
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.id < b.id; });
  EXPECT_EQ(s, sorted);
  EXPECT_THROW(sample_prompts(all, 51, 3), InvalidInput);
}

TEST(Sampling, InclusionFrequencyIsUniform) {
  const auto all = prompts(10000);
  std::map<std::string, int> index;
  for (int i = 0; i < 10000; ++i) index[all[i].id] = i;
  std::vector<int> hits(10000, 0);
  const int reps = 10000;
  for (int rep = 0; rep < reps; ++rep) {
    for (const auto& p : sample_prompts(all, 100, rep)) ++hits[index[p.id]];
  }
  // Each count is Binomial(reps, 0.01): the worst of 10000 cells stays
  // within 5 standard deviations and the cells jointly pass chi-square.
  const double expected = reps * 0.01;
  const double sd = std::sqrt(reps * 0.01 * 0.99);
  double chi2 = 0.0;
  for (int h : hits) {
    ASSERT_LE(std::abs(h - expected), 5 * sd);
    chi2 += (h - expected) * (h - expected) / (expected * 0.99);
  }
  const boost::math::chi_squared dist(static_cast<double>(hits.size() - 1));
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.001);
}

TEST_F(StoreDir, LoadCorpusSamplesFromFile) {
  std::ofstream(dir_ / "c.jsonl") << "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"b\", \"text\": \"y\"}\n"
                                     "{\"id\": \"c\", \"text\": \"z\"}\n";
  const auto all = load_corpus(dir_ / "c.jsonl", std::nullopt, 0);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[0].source, "c");
  EXPECT_EQ(load_corpus(dir_ / "c.jsonl", 2, 5), load_corpus(dir_ / "c.jsonl", 2, 5));
  EXPECT_EQ(load_corpus(dir_ / "c.jsonl", 2, 5).size(), 2u);
  EXPECT_THROW(load_corpus(dir_ / "missing.jsonl", std::nullopt, 0), InvalidInput);
}

TEST(ChatBody, CarriesModelAndDecoding) {
  EndpointConfig ep{"http://x", "/v1/chat/completions", "gpt-test"};
  const auto body = chat_request_body(ep, DecodingParams{0.5, 30}, prompts(1)[0]);
  EXPECT_EQ(body["model"], "gpt-test");
  EXPECT_EQ(body["temperature"], 0.5);
  EXPECT_EQ(body["max_tokens"], 30);
  EXPECT_EQ(body["messages"][0]["content"], "question 0");
  EXPECT_FALSE(body.contains("id"));
}

TEST(ChatBody, ParsesCompletion) {
  EXPECT_EQ(parse_chat_completion(R"({"choices":[{"message":{"role":"assistant","content":" hi"}}]})"), " hi");
  EXPECT_THROW(parse_chat_completion("nope"), TransportError);
  EXPECT_THROW(parse_chat_completion(R"({"choices":[]})"), TransportError);
}

TEST_F(StoreDir, CannedEchoIsCollected) {
  MockChatServer server({.model = model(), .canned_text = std::string("  canned reply")});
  MockChatTransport transport(server);
  ResponseStore store(dir_);
  auto opts = fast(10);
  opts.normalization = {NormalizationRule::StripLeadingWhitespace};
  const auto run = collect({"", "", "m"}, DecodingParams{}, prompts(5), transport, store, opts);
  ASSERT_EQ(run.collected.size(), 5u);
  for (const auto& r : run.collected) {
    EXPECT_EQ(r.raw, "  canned reply");
    EXPECT_EQ(r.normalized, "canned reply");
    EXPECT_EQ(r.meta["normalization"], json::array({"strip_leading_whitespace"}));
    EXPECT_EQ(r.meta["temperature"], 0.5);
    EXPECT_EQ(r.meta["max_tokens"], 30);
  }
  EXPECT_EQ(run.collected[3].prompt_id, "p3");
  EXPECT_EQ(run.billable_requests, 5u);
  EXPECT_EQ(count_lines(store.raw_log_path()), 5u);
}

TEST_F(StoreDir, RateLimitIsRetried) {
  MockChatServer server({.model = model(), .rate_limit_failures = 1});
  MockChatTransport transport(server);
  ResponseStore store(dir_);
  const auto run = collect({"", "", "m"}, DecodingParams{}, prompts(1), transport, store, fast(5));
  ASSERT_EQ(run.collected.size(), 1u);
  EXPECT_EQ(run.retries, 1u);
  EXPECT_EQ(run.successes, 1u);
  EXPECT_EQ(run.billable_requests, run.retries + run.successes);
  EXPECT_EQ(run.collected[0].meta["attempts"], 2);
  EXPECT_EQ(count_lines(store.raw_log_path()), 2u);
  EXPECT_EQ(store.load_responses().size(), 1u);
}

TEST_F(StoreDir, BudgetBelowPromptCountFailsUpFront) {
  MockChatServer server({.model = model()});
  MockChatTransport transport(server);
  ResponseStore store(dir_);
  EXPECT_THROW(collect({"", "", "m"}, DecodingParams{}, prompts(5), transport, store, fast(4)), BudgetError);
  EXPECT_EQ(server.requests(), 0u);
}

TEST_F(StoreDir, RetriesCannotExceedBudget) {
  MockChatServer server({.model = model(), .rate_limit_failures = 2});
  MockChatTransport transport(server);
  ResponseStore store(dir_);
  auto opts = fast(4);
  opts.concurrency = 1;
  EXPECT_THROW(collect({"", "", "m"}, DecodingParams{}, prompts(3), transport, store, opts), BudgetError);
  EXPECT_LE(server.requests(), 4u);
  EXPECT_EQ(count_lines(store.raw_log_path()), server.requests());
}

TEST_F(StoreDir, PersistentFailureIsPartialAndResumable) {
  MockChatServer server({.model = model(), .fail_after_successes = std::size_t{4}});
  MockChatTransport transport(server);
  ResponseStore store(dir_);
  auto opts = fast(100);
  try {
    collect({"", "", "m"}, DecodingParams{}, prompts(10), transport, store, opts);
    FAIL();
  } catch (const PartialRunError& e) {
    EXPECT_EQ(e.collected(), 4u);
  }
  EXPECT_EQ(store.load_responses().size(), 4u);
  server.set_fail_after_successes(std::nullopt);
  const auto run = collect({"", "", "m"}, DecodingParams{}, prompts(10), transport, store, opts);
  EXPECT_EQ(run.resumed, 4u);
  EXPECT_EQ(run.collected.size(), 10u);
  EXPECT_EQ(store.load_responses().size(), 10u);
  EXPECT_EQ(run.billable_requests, count_lines(store.raw_log_path()));
}

TEST_F(StoreDir, ResumedRunEqualsUninterruptedRun) {
  const auto ps = prompts(30);
  auto opts = fast(200);

  MockChatServer clean_server({.model = model(), .seed = 9});
  MockChatTransport clean_transport(clean_server);
  ResponseStore clean_store(dir_ / "clean");
  const auto clean = collect({"", "", "m"}, DecodingParams{}, ps, clean_transport, clean_store, opts);

  MockChatServer server({.model = model(), .fail_after_successes = std::size_t{11}, .seed = 9});
  MockChatTransport transport(server);
  ResponseStore store(dir_ / "resumed");
  EXPECT_THROW(collect({"", "", "m"}, DecodingParams{}, ps, transport, store, opts), PartialRunError);
  server.set_fail_after_successes(std::nullopt);
  const auto resumed = collect({"", "", "m"}, DecodingParams{}, ps, transport, store, opts);

  ASSERT_EQ(resumed.collected.size(), clean.collected.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(resumed.collected[i].prompt_id, clean.collected[i].prompt_id);
    EXPECT_EQ(resumed.collected[i].raw, clean.collected[i].raw);
    EXPECT_EQ(resumed.collected[i].normalized, clean.collected[i].normalized);
  }
  EXPECT_EQ(store.load_responses().size(), ps.size());
}

TEST_F(StoreDir, TornFinalLineIsIgnored) {
  ResponseStore store(dir_);
  store.append_response({"a", "x", "x", json::object()});
  std::ofstream(store.responses_path(), std::ios::app) << "{\"prompt_id\": \"b\", \"ra";
  const auto loaded = store.load_responses();
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].prompt_id, "a");
}

TEST_F(StoreDir, RawRecordsAreNotNormalized) {
  MockChatServer server({.model = model(), .canned_text = std::string(" raw text")});
  MockChatTransport transport(server);
  ResponseStore store(dir_);
  auto opts = fast(3);
  opts.normalization = {NormalizationRule::StripLeadingWhitespace};
  collect({"", "", "m"}, DecodingParams{}, prompts(1), transport, store, opts);
  std::ifstream in(store.raw_log_path());
  std::string line;
  std::getline(in, line);
  const auto raw = json::parse(line);
  EXPECT_EQ(parse_chat_completion(raw["body"].get<std::string>()), " raw text");
  EXPECT_EQ(json::parse(raw["request"].get<std::string>())["temperature"], 0.5);
}

TEST(MockEndpoint, DeterministicPerConversation) {
  MockChatServer a({.model = model(), .seed = 4});
  MockChatServer b({.model = model(), .seed = 4});
  EndpointConfig ep{"", "", "m"};
  const auto body = chat_request_body(ep, DecodingParams{0.5, 12}, prompts(1)[0]).dump();
  const auto first = parse_chat_completion(a.handle(body).body);
  EXPECT_EQ(first, parse_chat_completion(b.handle(body).body));
  EXPECT_EQ(first.size(), 13u);  // leading space + 12 tokens
  const auto second = parse_chat_completion(a.handle(body).body);
  EXPECT_EQ(second, parse_chat_completion(b.handle(body).body));
  EXPECT_EQ(a.handle("not json").status, 400);
  EXPECT_EQ(a.handle(R"({"messages": [], "model": "m"})").status, 400);
}

TEST(MockEndpoint, HonorsMaxTokens) {
  MockChatServer server({.model = model(), .leading_space = false});
  const auto body = chat_request_body({"", "", "m"}, DecodingParams{0.5, 5}, prompts(1)[0]).dump();
  EXPECT_EQ(parse_chat_completion(server.handle(body).body).size(), 5u);
}

TEST_F(StoreDir, CollectOverHttp) {
  MockChatServer server({.model = model(), .rate_limit_failures = 1, .seed = 2});
  server.start();
  EndpointConfig ep{server.base_url(), "/v1/chat/completions", "m", "", 10.0};
  HttpChatTransport transport(ep);
  ResponseStore store(dir_);
  const auto run = collect(ep, DecodingParams{}, prompts(6), transport, store, fast(20));
  server.stop();
  EXPECT_EQ(run.collected.size(), 6u);
  EXPECT_EQ(run.retries, 6u);
  EXPECT_EQ(run.billable_requests, 12u);

  MockChatServer offline({.model = model(), .seed = 2});
  for (const auto& r : run.collected) {
    PromptRecord p{r.prompt_id, {{"user", "question " + r.prompt_id.substr(1)}}, ""};
    EXPECT_EQ(r.raw, parse_chat_completion(offline.handle(chat_request_body(ep, DecodingParams{}, p).dump()).body));
  }
}

TEST(HttpTransport, MissingKeyVariableIsConfigError) {
  ::unsetenv("RANKAUDIT_TEST_KEY_UNSET");
  EXPECT_THROW(HttpChatTransport({"http://127.0.0.1:1", "/v1/chat/completions", "m", "RANKAUDIT_TEST_KEY_UNSET"}),
               ConfigError);
}

TEST(HttpTransport, UnreachableHostIsStatusZero) {
  HttpChatTransport t({"http://127.0.0.1:1", "/v1/chat/completions", "m", "", 2.0});
  const auto r = t.post("{}");
  EXPECT_EQ(r.status, 0);
  EXPECT_FALSE(r.error.empty());
}
