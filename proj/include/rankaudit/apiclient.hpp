#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rankaudit/normalize.hpp"
#include "rankaudit/prompt.hpp"
#include "rankaudit/simlab.hpp"

namespace rankaudit {

enum class TurnMode {
  FirstUserTurn,  // keep only the first user message
  FullHistory,    // keep every message
};

TurnMode turn_mode_from_string(std::string_view name);
std::string_view to_string(TurnMode mode);

/// Parses line-delimited corpus records {id, messages | text[, source]}.
/// Blank lines are skipped. Throws ParseError (with the 1-based line) on a
/// malformed record and CorpusIntegrityError on a duplicate id.
std::vector<PromptRecord> parse_corpus(std::istream& in, TurnMode mode = TurnMode::FirstUserTurn,
                                       const std::string& default_source = {});

/// Uniform sample of n records without replacement. The result depends only
/// on (records, n, seed).
std::vector<PromptRecord> sample_prompts(std::span<const PromptRecord> records, std::size_t n,
                                         std::uint64_t seed);

/// parse_corpus on a file followed by sample_prompts when sample_n is set.
std::vector<PromptRecord> load_corpus(const std::filesystem::path& path,
                                      std::optional<std::size_t> sample_n, std::uint64_t seed,
                                      TurnMode mode = TurnMode::FirstUserTurn);

struct EndpointConfig {
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string api_key_env;  // name of the environment variable holding the key; empty for none
  double timeout_seconds = 60.0;
};

// Chat-completions request body for one prompt.
nlohmann::json chat_request_body(const EndpointConfig& endpoint, const DecodingParams& decoding,
                                 const PromptRecord& prompt);

// choices[0].message.content of a chat-completions response body.
std::string parse_chat_completion(const std::string& body);

struct HttpResult {
  int status = 0;  // 0 when no response arrived
  std::string body;
  std::string error;  // transport-level failure description
};

/// Sends one request body and returns the raw outcome. Implementations must
/// allow concurrent calls.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual HttpResult post(const std::string& body) = 0;
};

/// ChatTransport over HTTP(S) with bearer authentication.
class HttpChatTransport final : public ChatTransport {
 public:
  explicit HttpChatTransport(EndpointConfig endpoint);
  HttpResult post(const std::string& body) override;

 private:
  EndpointConfig endpoint_;
  std::string auth_header_;
};

struct RetryPolicy {
  int max_attempts = 3;
  double initial_backoff_seconds = 1.0;
  double backoff_multiplier = 2.0;
};

struct CollectOptions {
  std::size_t budget = 0;  // hard cap on billable requests, including earlier sessions
  int concurrency = 4;
  double max_requests_per_second = 0.0;  // 0: unlimited
  double pacing_jitter_seconds = 0.0;    // extra uniform delay before each request
  std::uint64_t order_seed = 0;          // send order is a seeded shuffle of the prompts
  RetryPolicy retry;
  std::vector<NormalizationRule> normalization;
};

struct CollectedResponse {
  std::string prompt_id;
  std::string raw;
  std::string normalized;
  nlohmann::json meta = nlohmann::json::object();
};

nlohmann::json to_json(const CollectedResponse& r);
CollectedResponse collected_response_from_json(const nlohmann::json& j);

/// Append-only responses.jsonl plus raw_requests.jsonl (one line per
/// billable request, written before the response is normalized). Writes
/// are serialized and flushed per line.
class ResponseStore {
 public:
  explicit ResponseStore(std::filesystem::path directory);

  const std::filesystem::path& directory() const { return directory_; }
  std::filesystem::path responses_path() const { return directory_ / "responses.jsonl"; }
  std::filesystem::path raw_log_path() const { return directory_ / "raw_requests.jsonl"; }

  // Previously persisted responses, in file order. A torn final line from
  // an interrupted write is ignored.
  std::vector<CollectedResponse> load_responses() const;
  std::size_t count_raw_requests() const;

  void append_raw(const nlohmann::json& record);
  void append_response(const CollectedResponse& response);

 private:
  std::filesystem::path directory_;
  std::mutex mutex_;
};

struct AuditRun {
  EndpointConfig endpoint;
  DecodingParams decoding;
  std::size_t budget = 0;
  std::vector<CollectedResponse> collected;  // ordered like the requested prompts
  std::size_t billable_requests = 0;         // including earlier sessions
  std::size_t successes = 0;                 // in this session
  std::size_t retries = 0;                   // requests in this session without a completion
  std::size_t resumed = 0;                   // prompts skipped as already collected
};

/// Queries the endpoint once per prompt not yet in the store. Retries on
/// 429, 5xx and transport failures with exponential backoff. Throws
/// BudgetError when the budget cannot cover the remaining prompts or is
/// used up by retries, and PartialRunError when a prompt fails after all
/// retries. Every completed response is persisted first, so a rerun against
/// the same store resumes.
AuditRun collect(const EndpointConfig& endpoint, const DecodingParams& decoding,
                 std::span<const PromptRecord> prompts, ChatTransport& transport,
                 ResponseStore& store, const CollectOptions& options);

}  // namespace rankaudit
