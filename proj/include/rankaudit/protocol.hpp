#pragma once

// Line-delimited JSON protocol spoken by scoring backends.
//
//   request:  {"prompt": <string | [{"role": .., "content": ..}, ..]>, "response": <string>}
//   response: {"tokens": [{"id": int, "logprob": float, "rank": int, "entropy": float}, ..]}
//   failure:  {"error": <string>}
//
// One response line per request line, in request order. UTF-8, '\n'-terminated.

#include <string>
#include <string_view>
#include <vector>

#include <sys/types.h>

#include "rankaudit/prompt.hpp"
#include "rankaudit/score.hpp"

namespace rankaudit::protocol {

struct ScoreRequest {
  PromptRecord prompt;  // id and source are not transmitted
  std::string response;
};

std::string encode_request(const PromptRecord& prompt, std::string_view response);
ScoreRequest decode_request(std::string_view line);

std::string encode_response(std::span<const TokenScoreEvent> events);
std::string encode_error(std::string_view message);

// Throws InvalidInput on malformed lines and Error carrying the backend's
// message on error objects.
std::vector<TokenScoreEvent> decode_response(std::string_view line);

// Runs a scoring backend as a child process speaking the protocol on its
// stdin/stdout. Requests are strictly sequential.
class ProcessScoringBackend final : public ScoringBackend {
 public:
  explicit ProcessScoringBackend(std::vector<std::string> argv);
  ~ProcessScoringBackend() override;

  ProcessScoringBackend(const ProcessScoringBackend&) = delete;
  ProcessScoringBackend& operator=(const ProcessScoringBackend&) = delete;

 protected:
  std::vector<TokenScoreEvent> do_score(const PromptRecord& prompt,
                                        std::string_view response) override;

 private:
  std::string read_line();

  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

}  // namespace rankaudit::protocol
