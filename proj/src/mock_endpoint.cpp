#include <httplib.h>

#include "rankaudit/mock_endpoint.hpp"

#include <nlohmann/json.hpp>

#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"

namespace rankaudit {

using nlohmann::json;

struct MockChatServer::Server {
  httplib::Server http;
};

MockChatServer::MockChatServer(MockEndpointOptions options)
    : options_(std::move(options)), tokenizer_(options_.model.vocab_size()) {
  if (!(options_.substitution_rate >= 0.0 && options_.substitution_rate <= 1.0)) {
    throw InvalidInput("substitution rate must lie in [0, 1]");
  }
  if (options_.alt && options_.alt->vocab_size() != options_.model.vocab_size()) {
    throw InvalidInput("mock alternative model has a different vocabulary");
  }
}

MockChatServer::~MockChatServer() { stop(); }

void MockChatServer::set_fail_after_successes(std::optional<std::size_t> k) {
  std::lock_guard lock(mutex_);
  options_.fail_after_successes = k;
}

HttpResult MockChatServer::handle(const std::string& body) {
  ++requests_;
  json request;
  try {
    request = json::parse(body);
  } catch (const json::parse_error&) {
    return {400, R"({"error":{"message":"invalid JSON"}})", {}};
  }
  if (!request.is_object() || !request.contains("messages") || !request["messages"].is_array() ||
      request["messages"].empty()) {
    return {400, R"({"error":{"message":"messages required"}})", {}};
  }
  PromptRecord prompt;
  try {
    for (const auto& m : request["messages"]) {
      prompt.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    }
  } catch (const json::exception&) {
    return {400, R"({"error":{"message":"malformed message"}})", {}};
  }
  DecodingParams decoding = options_.model.decoding();
  try {
    if (request.contains("temperature")) decoding.temperature = request["temperature"].get<double>();
    if (request.contains("max_tokens")) decoding.max_tokens = request["max_tokens"].get<int>();
    decoding.validate();
  } catch (const std::exception&) {
    return {400, R"({"error":{"message":"invalid decoding parameters"}})", {}};
  }

  const std::string key = request["messages"].dump();
  std::size_t index = 0;
  {
    std::lock_guard lock(mutex_);
    if (options_.fail_after_successes && successes_ >= *options_.fail_after_successes) {
      return {503, R"({"error":{"message":"service unavailable"}})", {}};
    }
    int& throttled = throttled_[key];
    if (served_[key] == 0 && throttled < options_.rate_limit_failures) {
      ++throttled;
      return {429, R"({"error":{"message":"rate limited"}})", {}};
    }
    index = served_[key]++;
    ++successes_;
  }

  std::string text;
  if (options_.canned_text) {
    text = *options_.canned_text;
  } else {
    const std::uint64_t rng_seed = mix_seed(mix_seed(options_.seed, fnv1a64(key)), index);
    const std::uint64_t prompt_seed = prompt_seed_for(prompt);
    const bool alt = options_.alt && route_coin(prompt_seed, rng_seed) < options_.substitution_rate;
    const auto model = (alt ? *options_.alt : options_.model).with_decoding(decoding);
    text = tokenizer_.render(sample(model, prompt_seed, rng_seed), options_.leading_space);
  }
  json response = {
      {"id", "mock-" + std::to_string(index)},
      {"object", "chat.completion"},
      {"model", request.value("model", std::string("mock"))},
      {"choices", json::array({{{"index", 0},
                                {"message", {{"role", "assistant"}, {"content", text}}},
                                {"finish_reason", "length"}}})}};
  return {200, response.dump(), {}};
}

namespace {

void install_routes(httplib::Server& http, MockChatServer& mock) {
  http.Post("/v1/chat/completions", [&mock](const httplib::Request& req, httplib::Response& res) {
    const auto r = mock.handle(req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
}

}  // namespace

int MockChatServer::start(const std::string& host, int port) {
  if (server_) throw InvalidInput("mock server already running");
  server_ = std::make_unique<Server>();
  install_routes(server_->http, *this);
  host_ = host;
  port_ = port == 0 ? server_->http.bind_to_any_port(host) : (server_->http.bind_to_port(host, port) ? port : -1);
  if (port_ < 0) {
    server_.reset();
    throw TransportError("cannot bind mock server to " + host + ":" + std::to_string(port));
  }
  thread_ = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  return port_;
}

void MockChatServer::listen(const std::string& host, int port) {
  if (server_) throw InvalidInput("mock server already running");
  server_ = std::make_unique<Server>();
  install_routes(server_->http, *this);
  host_ = host;
  port_ = port;
  if (!server_->http.listen(host, port)) {
    throw TransportError("cannot listen on " + host + ":" + std::to_string(port));
  }
}

void MockChatServer::stop() {
  if (server_) server_->http.stop();
  if (thread_.joinable()) thread_.join();
}

std::string MockChatServer::base_url() const { return "http://" + host_ + ":" + std::to_string(port_); }

}  // namespace rankaudit
