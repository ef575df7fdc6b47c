#include "rankaudit/protocol.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "rankaudit/errors.hpp"

namespace rankaudit::protocol {

using nlohmann::json;

std::string encode_request(const PromptRecord& prompt, std::string_view response) {
  json j;
  if (prompt.messages.size() == 1 && prompt.messages.front().role == "user") {
    j["prompt"] = prompt.messages.front().content;
  } else {
    json msgs = json::array();
    for (const auto& m : prompt.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    j["prompt"] = std::move(msgs);
  }
  j["response"] = std::string(response);
  return j.dump() + "\n";
}

ScoreRequest decode_request(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw InvalidInput("request is not a JSON object");
  if (!j.contains("response") || !j["response"].is_string()) {
    throw InvalidInput("request field 'response' must be a string");
  }
  ScoreRequest req;
  req.response = j["response"].get<std::string>();
  const auto& p = j.contains("prompt") ? j["prompt"] : json();
  if (p.is_string()) {
    req.prompt.messages.push_back({"user", p.get<std::string>()});
  } else if (p.is_array()) {
    for (const auto& m : p) {
      if (!m.is_object() || !m.contains("role") || !m.contains("content") ||
          !m["role"].is_string() || !m["content"].is_string()) {
        throw InvalidInput("request field 'prompt' has a malformed message");
      }
      req.prompt.messages.push_back({m["role"].get<std::string>(), m["content"].get<std::string>()});
    }
  } else {
    throw InvalidInput("request field 'prompt' must be a string or a message list");
  }
  return req;
}

std::string encode_response(std::span<const TokenScoreEvent> events) {
  json tokens = json::array();
  for (const auto& e : events) {
    tokens.push_back({{"id", e.token_id}, {"logprob", e.log_prob}, {"rank", e.rank}, {"entropy", e.entropy}});
  }
  return json{{"tokens", std::move(tokens)}}.dump() + "\n";
}

std::string encode_error(std::string_view message) {
  return json{{"error", std::string(message)}}.dump() + "\n";
}

std::vector<TokenScoreEvent> decode_response(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw InvalidInput("response is not a JSON object");
  if (j.contains("error")) {
    throw Error(j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump());
  }
  if (!j.contains("tokens") || !j["tokens"].is_array()) {
    throw InvalidInput("response field 'tokens' must be an array");
  }
  std::vector<TokenScoreEvent> events;
  events.reserve(j["tokens"].size());
  for (const auto& t : j["tokens"]) {
    if (!t.is_object() || !t.contains("id") || !t.contains("logprob") || !t.contains("rank") ||
        !t.contains("entropy") || !t["id"].is_number_integer() || !t["rank"].is_number_integer() ||
        !t["logprob"].is_number() || !t["entropy"].is_number()) {
      throw InvalidInput("response token record is malformed");
    }
    TokenScoreEvent e{t["id"].get<int>(), t["logprob"].get<double>(), t["rank"].get<int>(),
                      t["entropy"].get<double>()};
    validate_event(e);
    events.push_back(e);
  }
  return events;
}

ProcessScoringBackend::ProcessScoringBackend(std::vector<std::string> argv) {
  if (argv.empty()) throw InvalidInput("scoring backend command is empty");
  int in_pipe[2];
  int out_pipe[2];
  if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) {
    throw Error(std::string("pipe: ") + std::strerror(errno));
  }
  pid_ = fork();
  if (pid_ < 0) throw Error(std::string("fork: ") + std::strerror(errno));
  if (pid_ == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    std::vector<char*> args;
    for (auto& a : argv) args.push_back(a.data());
    args.push_back(nullptr);
    execvp(args[0], args.data());
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  fcntl(to_child_, F_SETFD, FD_CLOEXEC);
  fcntl(from_child_, F_SETFD, FD_CLOEXEC);
}

ProcessScoringBackend::~ProcessScoringBackend() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    waitpid(pid_, &status, 0);
  }
}

std::string ProcessScoringBackend::read_line() {
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    char chunk[4096];
    const ssize_t got = read(from_child_, chunk, sizeof(chunk));
    if (got < 0 && errno == EINTR) continue;
    if (got <= 0) throw Error("scoring backend closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(got));
  }
}

std::vector<TokenScoreEvent> ProcessScoringBackend::do_score(const PromptRecord& prompt,
                                                             std::string_view response) {
  const std::string request = encode_request(prompt, response);
  std::size_t written = 0;
  // A dead child must surface as an error, not kill the auditor.
  std::signal(SIGPIPE, SIG_IGN);
  while (written < request.size()) {
    const ssize_t n = write(to_child_, request.data() + written, request.size() - written);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw ScoringBackendError(prompt.id, "write to scoring backend failed");
    written += static_cast<std::size_t>(n);
  }
  try {
    return decode_response(read_line());
  } catch (const std::exception& e) {
    throw ScoringBackendError(prompt.id, e.what());
  }
}

}  // namespace rankaudit::protocol
