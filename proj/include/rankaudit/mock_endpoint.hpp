#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "rankaudit/apiclient.hpp"
#include "rankaudit/simlab.hpp"

namespace rankaudit {

struct MockEndpointOptions {
  SyntheticModel model;
  // Substitution adversary: each completion comes from alt with this probability.
  std::optional<SyntheticModel> alt;
  double substitution_rate = 0.0;
  std::optional<std::string> canned_text;  // served verbatim instead of sampling
  bool leading_space = true;               // false reproduces an endpoint that drops it
  int rate_limit_failures = 0;             // 429s before the first success of each conversation
  std::optional<std::size_t> fail_after_successes;  // 503 for everything after this many
  std::uint64_t seed = 0;
};

/// Deterministic chat-completions server backed by a synthetic model.
/// The n-th successful completion for a given conversation is a function of
/// (seed, conversation, n, temperature, max_tokens) only.
/// Serves POST /v1/chat/completions.
class MockChatServer {
 public:
  explicit MockChatServer(MockEndpointOptions options);
  ~MockChatServer();

  MockChatServer(const MockChatServer&) = delete;
  MockChatServer& operator=(const MockChatServer&) = delete;

  // Request handling without a socket. Thread-safe.
  HttpResult handle(const std::string& body);

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Serves on the calling thread until stop() is called from elsewhere.
  void listen(const std::string& host, int port);
  void stop();

  std::string base_url() const;
  std::size_t requests() const { return requests_; }
  std::size_t successes() const { return successes_; }
  void set_fail_after_successes(std::optional<std::size_t> k);

 private:
  struct Server;

  MockEndpointOptions options_;
  SyntheticTokenizer tokenizer_;
  std::mutex mutex_;
  std::map<std::string, std::size_t> served_;
  std::map<std::string, int> throttled_;
  std::atomic<std::size_t> requests_{0};
  std::atomic<std::size_t> successes_{0};
  std::unique_ptr<Server> server_;
  std::thread thread_;
  std::string host_;
  int port_ = 0;
};

/// ChatTransport calling a MockChatServer in process.
class MockChatTransport final : public ChatTransport {
 public:
  explicit MockChatTransport(MockChatServer& server) : server_(server) {}
  HttpResult post(const std::string& body) override { return server_.handle(body); }

 private:
  MockChatServer& server_;
};

}  // namespace rankaudit
