#include "rankaudit/score.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rankaudit/errors.hpp"

namespace rankaudit {

const std::string& PromptRecord::text() const {
  static const std::string empty;
  for (const auto& m : messages) {
    if (m.role == "user") return m.content;
  }
  return messages.empty() ? empty : messages.front().content;
}

std::string_view to_string(ScoreFunctionKind kind) {
  switch (kind) {
    case ScoreFunctionKind::LogLikelihood: return "log_likelihood";
    case ScoreFunctionKind::TokenRank: return "token_rank";
    case ScoreFunctionKind::LogRank: return "log_rank";
    case ScoreFunctionKind::Entropy: return "entropy";
    case ScoreFunctionKind::LogLikelihoodLogRankRatio: return "lrr";
  }
  return "unknown";
}

ScoreFunctionKind score_function_from_string(std::string_view name) {
  for (auto kind : kAllScoreFunctions) {
    if (to_string(kind) == name) return kind;
  }
  throw InvalidInput("unknown score function '" + std::string(name) + "'");
}

void validate_event(const TokenScoreEvent& event, std::optional<int> vocab_size) {
  if (event.token_id < 0) throw InvalidInput("token id must be nonnegative");
  if (event.rank < 1) throw InvalidInput("token rank must be >= 1");
  if (!(event.log_prob <= 0.0)) throw InvalidInput("log probability must be <= 0");
  if (!(event.entropy >= 0.0)) throw InvalidInput("entropy must be >= 0");
  if (vocab_size) {
    if (event.token_id >= *vocab_size) throw InvalidInput("token id outside vocabulary");
    if (event.rank > *vocab_size) throw InvalidInput("token rank exceeds vocabulary size");
    // Summation error in the entropy of a near-uniform distribution.
    const double bound = std::log(static_cast<double>(*vocab_size)) * (1.0 + 1e-12) + 1e-15;
    if (event.entropy > bound) throw InvalidInput("entropy exceeds ln(vocabulary size)");
  }
}

double distribution_entropy(std::span<const double> log_probs) {
  double entropy = 0.0;
  for (double lp : log_probs) {
    if (lp > -std::numeric_limits<double>::infinity()) entropy -= std::exp(lp) * lp;
  }
  return std::max(entropy, 0.0);
}

int token_rank(std::span<const double> log_probs, int token_id) {
  const double own = log_probs[static_cast<std::size_t>(token_id)];
  int rank = 1;
  for (std::size_t j = 0; j < log_probs.size(); ++j) {
    const double lp = log_probs[j];
    if (lp > own || (lp == own && j < static_cast<std::size_t>(token_id))) ++rank;
  }
  return rank;
}

TokenScoreEvent score_token(std::span<const double> log_probs, int token_id) {
  if (log_probs.empty()) throw InvalidInput("empty next-token distribution");
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= log_probs.size()) {
    throw InvalidInput("token id outside vocabulary");
  }
  const double own = log_probs[static_cast<std::size_t>(token_id)];
  return {token_id, std::min(own, 0.0), token_rank(log_probs, token_id),
          distribution_entropy(log_probs)};
}

double ScoreAccumulator::value(ScoreFunctionKind kind) const {
  if (count == 0) throw InvalidInput("cannot aggregate an empty event list");
  const double n = static_cast<double>(count);
  switch (kind) {
    case ScoreFunctionKind::LogLikelihood: return sum_log_prob;
    case ScoreFunctionKind::TokenRank: return sum_rank / n;
    case ScoreFunctionKind::LogRank: return sum_log_rank / n;
    case ScoreFunctionKind::Entropy: return sum_entropy / n;
    case ScoreFunctionKind::LogLikelihoodLogRankRatio:
      // All tokens at rank 1: the ratio is defined as 0.
      return sum_log_rank == 0.0 ? 0.0 : sum_log_prob / sum_log_rank;
  }
  throw InvalidInput("unknown score function");
}

ScoreAggregates ScoreAccumulator::finish() const {
  ScoreAggregates out;
  for (auto kind : kAllScoreFunctions) out[kind] = value(kind);
  return out;
}

namespace {

ScoreAccumulator accumulate(std::span<const TokenScoreEvent> events) {
  ScoreAccumulator acc;
  for (const auto& e : events) {
    acc.add(e.log_prob, e.rank, std::log(static_cast<double>(e.rank)), e.entropy);
  }
  return acc;
}

}  // namespace

double aggregate_score(std::span<const TokenScoreEvent> events, ScoreFunctionKind kind) {
  for (const auto& e : events) validate_event(e);
  return accumulate(events).value(kind);
}

ScoreAggregates aggregate_all(std::span<const TokenScoreEvent> events) {
  for (const auto& e : events) validate_event(e);
  return accumulate(events).finish();
}

ScoredResponse score_response(const PromptRecord& prompt, std::string_view response,
                              ScoringBackend& scorer) {
  if (response.empty()) {
    throw InvalidInput("empty response for prompt '" + prompt.id + "'");
  }
  std::vector<TokenScoreEvent> events;
  try {
    events = scorer.score(prompt, response);
  } catch (const ScoringBackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw ScoringBackendError(prompt.id, e.what());
  }
  if (events.empty()) throw InvalidInput("response for prompt '" + prompt.id + "' has no tokens");
  ScoredResponse out{prompt.id, std::string(response), std::move(events), {}};
  out.aggregates = aggregate_all(out.events);
  return out;
}

}  // namespace rankaudit
