#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "rankaudit/prompt.hpp"
#include "rankaudit/score.hpp"
#include "rankaudit/score_cdf.hpp"

namespace rankaudit {

struct DecodingParams {
  double temperature = 0.5;
  int max_tokens = 30;

  void validate() const;
  bool operator==(const DecodingParams&) const = default;
};

// Logits drawn as scale * N(0,1), hashed from (seed, prompt, context, token).
// A positive prompt_scale_spread multiplies the scale of each prompt by
// exp(spread * N(0,1)), making some prompts sharply peaked and others flat.
struct GeneratedLogits {
  std::uint64_t seed = 0;
  double scale = 1.0;
  double prompt_scale_spread = 0.0;
};

// Explicit prompt-independent logits, one row per context index.
struct TableLogits {
  std::vector<std::vector<double>> rows;
};

using LogitSource = std::variant<GeneratedLogits, TableLogits>;

// Rounds every logit to the nearest multiple of 2^(1-bits) * scale. A
// nonpositive scale means the model's nominal logit scale.
struct Quantize {
  int bits = 4;
  double scale = 0.0;
  bool operator==(const Quantize&) const = default;
};

// Adds a fixed vector to the logits of every context.
struct PromptBias {
  std::vector<double> bias;
  bool operator==(const PromptBias&) const = default;
};

using LogitPerturbation = std::variant<Quantize, PromptBias>;

/// Small-vocabulary autoregressive categorical model. The next-token logits
/// depend on a prompt seed and the last context_order tokens (with a
/// begin-of-sequence sentinel padding short histories), so every output
/// distribution can be enumerated exactly.
class SyntheticModel {
 public:
  SyntheticModel(int vocab_size, int context_order, LogitSource source,
                 DecodingParams decoding = {}, std::string name = {});

  int vocab_size() const { return vocab_size_; }
  int context_order() const { return context_order_; }
  const DecodingParams& decoding() const { return decoding_; }
  const std::string& name() const { return name_; }
  const LogitSource& source() const { return source_; }
  const std::vector<LogitPerturbation>& perturbations() const { return perturbations_; }

  // Scale used by Quantize when none is given: the generator scale, or the
  // largest absolute table entry.
  double nominal_scale() const;

  std::size_t context_count() const { return context_count_; }
  std::size_t initial_context() const { return context_count_ - 1; }
  std::size_t next_context(std::size_t context, int token) const;

  std::vector<double> logits(std::uint64_t prompt_seed, std::size_t context) const;
  // log softmax(logits / temperature)
  std::vector<double> log_probs(std::uint64_t prompt_seed, std::size_t context) const;

  SyntheticModel with_decoding(DecodingParams decoding) const;
  SyntheticModel with_name(std::string name) const;
  SyntheticModel with_perturbation(LogitPerturbation p) const;

 private:
  int vocab_size_;
  int context_order_;
  std::size_t context_count_;
  LogitSource source_;
  DecodingParams decoding_;
  std::string name_;
  std::vector<LogitPerturbation> perturbations_;
};

// Cumulative next-token probabilities used by every sampler, so table-based
// and direct sampling draw identical tokens.
std::vector<double> cumulative_probs(std::span<const double> log_probs);
int draw_token(std::span<const double> cumulative, double u);

/// Precomputed next-token tables of one model for one prompt.
class ConditionalTable {
 public:
  ConditionalTable(const SyntheticModel& model, std::uint64_t prompt_seed);

  int vocab_size() const { return vocab_; }
  std::size_t initial_context() const { return initial_; }
  std::size_t next_context(std::size_t context, int token) const {
    return (context * static_cast<std::size_t>(vocab_ + 1) + static_cast<std::size_t>(token)) %
           contexts_;
  }

  int draw(std::size_t context, double u) const {
    return draw_token({cumulative_.data() + context * vocab_, static_cast<std::size_t>(vocab_)}, u);
  }

  std::span<const double> log_probs(std::size_t context) const {
    return {log_prob_.data() + context * vocab_, static_cast<std::size_t>(vocab_)};
  }

  // Adds the score event of `token` at `context` to acc.
  void accumulate(std::size_t context, int token, ScoreAccumulator& acc) const {
    const std::size_t i = context * vocab_ + static_cast<std::size_t>(token);
    acc.add(log_prob_[i], rank_[i], log_rank_[i], entropy_[context]);
  }

  TokenScoreEvent event(std::size_t context, int token) const;

 private:
  int vocab_;
  std::size_t contexts_;
  std::size_t initial_;
  std::vector<double> cumulative_;
  std::vector<double> log_prob_;
  std::vector<int> rank_;
  std::vector<double> log_rank_;
  std::vector<double> entropy_;
};

/// Autoregressive sampling for exactly max_tokens steps.
std::vector<int> sample(const SyntheticModel& model, std::uint64_t prompt_seed, std::uint64_t rng_seed);

// Per-token events of `tokens` under `reference` for the given prompt.
std::vector<TokenScoreEvent> score_tokens(const SyntheticModel& reference, std::uint64_t prompt_seed,
                                          std::span<const int> tokens);

/// Prompt-dependent substitution rate q(x): a constant, optionally
/// overridden per prompt seed.
struct RateFunction {
  double constant = 0.0;
  std::unordered_map<std::uint64_t, double> per_prompt;

  double operator()(std::uint64_t prompt_seed) const;
  void validate() const;
};

struct SubstitutionPolicy {
  RateFunction rate;
  SyntheticModel alt;
};

enum class ServedBy { Base, Alt };

struct RoutedSample {
  std::vector<int> tokens;
  ServedBy served_by = ServedBy::Base;
};

// Mixture (1 - q) base + q alt. The token draw uses the same seed as
// sample(), so q = 0 and q = 1 reproduce base and alt sampling exactly.
RoutedSample route(const SubstitutionPolicy& policy, const SyntheticModel& base,
                   std::uint64_t prompt_seed, std::uint64_t rng_seed);

// Uniform in [0,1) deciding the route of one request.
double route_coin(std::uint64_t prompt_seed, std::uint64_t rng_seed);

inline constexpr std::uint64_t kDefaultEnumerationBudget = 1'000'000;

/// Exact distribution of f(y, x) for y ~ model(. | x), scored under
/// `reference`. Throws BudgetError when vocab^max_tokens exceeds the budget.
DiscreteScoreCDF enumerate_score_cdf(const SyntheticModel& model, std::uint64_t prompt_seed,
                                     ScoreFunctionKind kind, const SyntheticModel& reference,
                                     std::uint64_t budget = kDefaultEnumerationBudget);

struct Replace {
  std::shared_ptr<const SyntheticModel> other;
};

using Perturbation = std::variant<Quantize, PromptBias, Replace>;

SyntheticModel perturb(const SyntheticModel& model, const Perturbation& kind);

// Total-variation distance between the two next-token distributions.
double next_token_total_variation(const SyntheticModel& a, const SyntheticModel& b,
                                  std::uint64_t prompt_seed, std::size_t context);

// Average over prompts and all contexts of next_token_total_variation.
double mean_next_token_total_variation(const SyntheticModel& a, const SyntheticModel& b,
                                       std::span<const std::uint64_t> prompt_seeds);

/// Maps synthetic token ids to single characters so responses travel as
/// text. Whitespace is formatting only and never tokenizes.
class SyntheticTokenizer {
 public:
  static constexpr std::string_view kAlphabet =
      "abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

  explicit SyntheticTokenizer(int vocab_size);

  std::string render(std::span<const int> tokens, bool leading_space = false) const;
  std::vector<int> tokenize(std::string_view text) const;

 private:
  int vocab_size_;
};

// Seed identifying a prompt's conditional distributions. A single user
// message hashes its text; longer conversations hash every turn.
std::uint64_t prompt_seed_for(const PromptRecord& prompt);

/// ScoringBackend over a synthetic reference model and tokenizer.
class SyntheticScoringBackend final : public ScoringBackend {
 public:
  explicit SyntheticScoringBackend(SyntheticModel reference)
      : reference_(std::move(reference)), tokenizer_(reference_.vocab_size()) {}

  bool reentrant() const override { return true; }

 protected:
  std::vector<TokenScoreEvent> do_score(const PromptRecord& prompt,
                                        std::string_view response) override;

 private:
  SyntheticModel reference_;
  SyntheticTokenizer tokenizer_;
};

// Declarative model description (see README for the schema).
SyntheticModel model_from_json(const nlohmann::json& spec);
nlohmann::json model_to_json(const SyntheticModel& model);

}  // namespace rankaudit
