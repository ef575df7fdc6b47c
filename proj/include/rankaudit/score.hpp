#pragma once

#include <array>
#include <cstddef>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rankaudit/prompt.hpp"

namespace rankaudit {

enum class ScoreFunctionKind {
  LogLikelihood,
  TokenRank,
  LogRank,
  Entropy,
  LogLikelihoodLogRankRatio,
};

inline constexpr std::size_t kScoreFunctionCount = 5;

inline constexpr std::array<ScoreFunctionKind, kScoreFunctionCount> kAllScoreFunctions = {
    ScoreFunctionKind::LogLikelihood, ScoreFunctionKind::TokenRank, ScoreFunctionKind::LogRank,
    ScoreFunctionKind::Entropy, ScoreFunctionKind::LogLikelihoodLogRankRatio};

// Stable serialized names: log_likelihood, token_rank, log_rank, entropy, lrr.
std::string_view to_string(ScoreFunctionKind kind);
ScoreFunctionKind score_function_from_string(std::string_view name);

/// One response token scored under the reference model's next-token
/// distribution at that position.
struct TokenScoreEvent {
  int token_id = 0;
  double log_prob = 0.0;  // natural log, <= 0
  int rank = 1;           // 1-based, descending probability, ties by ascending id
  double entropy = 0.0;   // nats

  bool operator==(const TokenScoreEvent&) const = default;
};

// Throws InvalidInput when an event violates its bounds. The vocabulary
// bounds (rank <= V, entropy <= ln V) are checked only when V is known.
void validate_event(const TokenScoreEvent& event, std::optional<int> vocab_size = std::nullopt);

/// Scores a realized token against a full next-token distribution given as
/// natural-log probabilities.
TokenScoreEvent score_token(std::span<const double> log_probs, int token_id);

// Pieces of score_token, exposed so precomputed tables match it bit for bit.
double distribution_entropy(std::span<const double> log_probs);
int token_rank(std::span<const double> log_probs, int token_id);

double aggregate_score(std::span<const TokenScoreEvent> events, ScoreFunctionKind kind);

// The five aggregates, indexed by ScoreFunctionKind.
struct ScoreAggregates {
  std::array<double, kScoreFunctionCount> values{};

  double operator[](ScoreFunctionKind kind) const { return values[static_cast<std::size_t>(kind)]; }
  double& operator[](ScoreFunctionKind kind) { return values[static_cast<std::size_t>(kind)]; }

  bool operator==(const ScoreAggregates&) const = default;
};

ScoreAggregates aggregate_all(std::span<const TokenScoreEvent> events);

// Aggregates from running sums. Shared by aggregate_all and the simulation
// fast path so both produce identical values for identical event streams.
struct ScoreAccumulator {
  double sum_log_prob = 0.0;
  double sum_rank = 0.0;
  double sum_log_rank = 0.0;
  double sum_entropy = 0.0;
  std::size_t count = 0;

  void add(double log_prob, int rank, double log_rank, double entropy) {
    sum_log_prob += log_prob;
    sum_rank += rank;
    sum_log_rank += log_rank;
    sum_entropy += entropy;
    ++count;
  }

  double value(ScoreFunctionKind kind) const;
  ScoreAggregates finish() const;
};

struct ScoredResponse {
  std::string prompt_id;
  std::string text;
  std::vector<TokenScoreEvent> events;
  ScoreAggregates aggregates;
};

// Anything that can tokenize a response under the reference vocabulary and
// score it token by token. Calls into a backend that is not reentrant are
// serialized by score().
class ScoringBackend {
 public:
  virtual ~ScoringBackend() = default;

  std::vector<TokenScoreEvent> score(const PromptRecord& prompt, std::string_view response) {
    if (reentrant()) return do_score(prompt, response);
    std::lock_guard lock(call_mutex_);
    return do_score(prompt, response);
  }

  virtual bool reentrant() const { return false; }

 protected:
  virtual std::vector<TokenScoreEvent> do_score(const PromptRecord& prompt,
                                                std::string_view response) = 0;

 private:
  std::mutex call_mutex_;
};

ScoredResponse score_response(const PromptRecord& prompt, std::string_view response,
                              ScoringBackend& scorer);

}  // namespace rankaudit
