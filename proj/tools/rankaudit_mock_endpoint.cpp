// Deterministic chat-completions server over a synthetic model, for
// exercising `rankaudit audit` against a live HTTP endpoint.

#include <csignal>
#include <fstream>
#include <iostream>

#include <unistd.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rankaudit/mock_endpoint.hpp"

namespace {

rankaudit::MockChatServer* running = nullptr;

void on_signal(int) {
  if (running != nullptr) running->stop();
}

rankaudit::SyntheticModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return rankaudit::model_from_json(nlohmann::json::parse(in));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mock chat-completions endpoint backed by a synthetic model"};
  std::string model_path;
  std::string alt_path;
  std::string host = "127.0.0.1";
  int port = 8080;
  double rate = 0.0;
  std::uint64_t seed = 0;
  int rate_limit_failures = 0;
  std::optional<std::size_t> fail_after;
  bool no_leading_space = false;
  std::optional<std::string> canned;
  app.add_option("--model", model_path, "Model JSON served by the endpoint")->required()->check(CLI::ExistingFile);
  app.add_option("--alt", alt_path, "Model JSON substituted with probability --substitution-rate")
      ->check(CLI::ExistingFile);
  app.add_option("--substitution-rate", rate, "Probability of serving the alternative model");
  app.add_option("--host", host, "Bind address");
  app.add_option("--port", port, "Port (0 picks a free one)");
  app.add_option("--seed", seed, "Sampling seed");
  app.add_option("--rate-limit-failures", rate_limit_failures, "429 responses before each conversation's first success");
  app.add_option("--fail-after", fail_after, "Answer 503 once this many completions have been served");
  app.add_flag("--no-leading-space", no_leading_space, "Drop the leading space from completions");
  app.add_option("--canned", canned, "Serve this text instead of sampling");
  CLI11_PARSE(app, argc, argv);

  try {
    rankaudit::MockEndpointOptions options{.model = load_model(model_path)};
    if (!alt_path.empty()) options.alt = load_model(alt_path);
    options.substitution_rate = rate;
    options.canned_text = canned;
    options.leading_space = !no_leading_space;
    options.rate_limit_failures = rate_limit_failures;
    options.fail_after_successes = fail_after;
    options.seed = seed;
    rankaudit::MockChatServer server(std::move(options));
    running = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    const int bound = server.start(host, port);
    std::cout << "http://" << host << ":" << bound << std::endl;
    pause();
    server.stop();
  } catch (const std::exception& e) {
    std::cerr << "rankaudit-mock-endpoint: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
