#include "rankaudit/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"

namespace rankaudit {

void DecodingParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidInput("temperature must be positive");
  }
  if (max_tokens < 1) throw InvalidInput("max_tokens must be >= 1");
}

namespace {

std::size_t checked_context_count(int vocab_size, int context_order) {
  if (vocab_size < 1) throw InvalidInput("vocab_size must be >= 1");
  if (context_order < 0 || context_order > 2) throw InvalidInput("context_order must be 0, 1 or 2");
  std::size_t count = 1;
  for (int i = 0; i < context_order; ++i) count *= static_cast<std::size_t>(vocab_size + 1);
  return count;
}

double hashed_normal(std::uint64_t seed, std::uint64_t prompt_seed, std::size_t context, int token) {
  const std::uint64_t h = mix_seed(mix_seed(mix_seed(seed, prompt_seed), context),
                                   static_cast<std::uint64_t>(token));
  const double u1 = 1.0 - bits_to_unit(h);  // (0, 1]
  const double u2 = bits_to_unit(splitmix64(h));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

SyntheticModel::SyntheticModel(int vocab_size, int context_order, LogitSource source,
                               DecodingParams decoding, std::string name)
    : vocab_size_(vocab_size),
      context_order_(context_order),
      context_count_(checked_context_count(vocab_size, context_order)),
      source_(std::move(source)),
      decoding_(decoding),
      name_(std::move(name)) {
  decoding_.validate();
  if (const auto* table = std::get_if<TableLogits>(&source_)) {
    if (table->rows.size() != context_count_) {
      throw InvalidInput("logit table needs " + std::to_string(context_count_) + " rows, got " +
                         std::to_string(table->rows.size()));
    }
    for (const auto& row : table->rows) {
      if (row.size() != static_cast<std::size_t>(vocab_size_)) {
        throw InvalidInput("logit table row length must equal vocab_size");
      }
      for (double x : row) {
        if (!std::isfinite(x)) throw InvalidInput("logit table entries must be finite");
      }
    }
  } else {
    const auto& gen = std::get<GeneratedLogits>(source_);
    if (!(gen.prompt_scale_spread >= 0.0) || !std::isfinite(gen.prompt_scale_spread)) {
      throw InvalidInput("prompt_scale_spread must be finite and nonnegative");
    }
    if (!(gen.scale >= 0.0) || !std::isfinite(gen.scale)) {
      throw InvalidInput("logit scale must be finite and nonnegative");
    }
  }
}

double SyntheticModel::nominal_scale() const {
  if (const auto* gen = std::get_if<GeneratedLogits>(&source_)) return gen->scale;
  double scale = 0.0;
  for (const auto& row : std::get<TableLogits>(source_).rows) {
    for (double x : row) scale = std::max(scale, std::abs(x));
  }
  return scale;
}

std::size_t SyntheticModel::next_context(std::size_t context, int token) const {
  return (context * static_cast<std::size_t>(vocab_size_ + 1) + static_cast<std::size_t>(token)) %
         context_count_;
}

std::vector<double> SyntheticModel::logits(std::uint64_t prompt_seed, std::size_t context) const {
  if (context >= context_count_) throw InvalidInput("context index out of range");
  std::vector<double> out(static_cast<std::size_t>(vocab_size_));
  if (const auto* gen = std::get_if<GeneratedLogits>(&source_)) {
    double scale = gen->scale;
    if (gen->prompt_scale_spread > 0.0) {
      scale *= std::exp(gen->prompt_scale_spread * hashed_normal(gen->seed, prompt_seed, ~std::size_t{0}, 0));
    }
    for (int v = 0; v < vocab_size_; ++v) {
      out[static_cast<std::size_t>(v)] = scale * hashed_normal(gen->seed, prompt_seed, context, v);
    }
  } else {
    out = std::get<TableLogits>(source_).rows[context];
  }
  for (const auto& p : perturbations_) {
    if (const auto* q = std::get_if<Quantize>(&p)) {
      const double step = std::ldexp(q->scale, 1 - q->bits);
      if (step > 0.0) {
        for (double& x : out) x = std::round(x / step) * step;
      }
    } else {
      const auto& bias = std::get<PromptBias>(p).bias;
      for (std::size_t v = 0; v < out.size(); ++v) out[v] += bias[v];
    }
  }
  return out;
}

std::vector<double> SyntheticModel::log_probs(std::uint64_t prompt_seed, std::size_t context) const {
  std::vector<double> x = logits(prompt_seed, context);
  for (double& v : x) v /= decoding_.temperature;
  const double max = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (double v : x) total += std::exp(v - max);
  const double lse = max + std::log(total);
  for (double& v : x) v = std::min(v - lse, 0.0);
  return x;
}

SyntheticModel SyntheticModel::with_decoding(DecodingParams decoding) const {
  decoding.validate();
  SyntheticModel out = *this;
  out.decoding_ = decoding;
  return out;
}

SyntheticModel SyntheticModel::with_name(std::string name) const {
  SyntheticModel out = *this;
  out.name_ = std::move(name);
  return out;
}

SyntheticModel SyntheticModel::with_perturbation(LogitPerturbation p) const {
  if (auto* q = std::get_if<Quantize>(&p)) {
    if (q->bits < 1) throw InvalidInput("quantization bits must be >= 1");
    if (q->scale <= 0.0) q->scale = nominal_scale();
    // Rounding to the same grid twice is a no-op.
    if (!perturbations_.empty() && perturbations_.back() == p) return *this;
  } else {
    const auto& bias = std::get<PromptBias>(p).bias;
    if (bias.size() != static_cast<std::size_t>(vocab_size_)) {
      throw InvalidInput("bias vector length must equal vocab_size");
    }
    for (double b : bias) {
      if (!std::isfinite(b)) throw InvalidInput("bias entries must be finite");
    }
  }
  SyntheticModel out = *this;
  out.perturbations_.push_back(std::move(p));
  return out;
}

std::vector<double> cumulative_probs(std::span<const double> log_probs) {
  std::vector<double> cum(log_probs.size());
  double run = 0.0;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    run += std::exp(log_probs[i]);
    cum[i] = run;
  }
  return cum;
}

int draw_token(std::span<const double> cumulative, double u) {
  for (std::size_t i = 0; i < cumulative.size(); ++i) {
    if (u < cumulative[i]) return static_cast<int>(i);
  }
  // u landed in the rounding gap above the final cumulative value.
  for (std::size_t i = cumulative.size(); i-- > 0;) {
    if (cumulative[i] > (i == 0 ? 0.0 : cumulative[i - 1])) return static_cast<int>(i);
  }
  return 0;
}

ConditionalTable::ConditionalTable(const SyntheticModel& model, std::uint64_t prompt_seed)
    : vocab_(model.vocab_size()),
      contexts_(model.context_count()),
      initial_(model.initial_context()) {
  const auto v = static_cast<std::size_t>(vocab_);
  cumulative_.resize(contexts_ * v);
  log_prob_.resize(contexts_ * v);
  rank_.resize(contexts_ * v);
  log_rank_.resize(contexts_ * v);
  entropy_.resize(contexts_);
  for (std::size_t c = 0; c < contexts_; ++c) {
    const auto lp = model.log_probs(prompt_seed, c);
    const auto cum = cumulative_probs(lp);
    entropy_[c] = distribution_entropy(lp);
    for (std::size_t t = 0; t < v; ++t) {
      const int rank = token_rank(lp, static_cast<int>(t));
      cumulative_[c * v + t] = cum[t];
      log_prob_[c * v + t] = std::min(lp[t], 0.0);
      rank_[c * v + t] = rank;
      log_rank_[c * v + t] = std::log(static_cast<double>(rank));
    }
  }
}

TokenScoreEvent ConditionalTable::event(std::size_t context, int token) const {
  const std::size_t i = context * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(token);
  return {token, log_prob_[i], rank_[i], entropy_[context]};
}

std::vector<int> sample(const SyntheticModel& model, std::uint64_t prompt_seed, std::uint64_t rng_seed) {
  Rng rng(mix_seed(rng_seed, prompt_seed));
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(model.decoding().max_tokens));
  std::size_t ctx = model.initial_context();
  for (int t = 0; t < model.decoding().max_tokens; ++t) {
    const auto cum = cumulative_probs(model.log_probs(prompt_seed, ctx));
    const int tok = draw_token(cum, rng.uniform());
    tokens.push_back(tok);
    ctx = model.next_context(ctx, tok);
  }
  return tokens;
}

std::vector<TokenScoreEvent> score_tokens(const SyntheticModel& reference, std::uint64_t prompt_seed,
                                          std::span<const int> tokens) {
  std::vector<TokenScoreEvent> events;
  events.reserve(tokens.size());
  std::size_t ctx = reference.initial_context();
  for (int tok : tokens) {
    if (tok < 0 || tok >= reference.vocab_size()) throw InvalidInput("token id outside vocabulary");
    events.push_back(score_token(reference.log_probs(prompt_seed, ctx), tok));
    ctx = reference.next_context(ctx, tok);
  }
  return events;
}

double RateFunction::operator()(std::uint64_t prompt_seed) const {
  const auto it = per_prompt.find(prompt_seed);
  return it == per_prompt.end() ? constant : it->second;
}

void RateFunction::validate() const {
  const auto ok = [](double q) { return q >= 0.0 && q <= 1.0; };
  if (!ok(constant)) throw InvalidInput("substitution rate must lie in [0, 1]");
  for (const auto& [seed, q] : per_prompt) {
    if (!ok(q)) throw InvalidInput("substitution rate must lie in [0, 1]");
  }
}

double route_coin(std::uint64_t prompt_seed, std::uint64_t rng_seed) {
  return bits_to_unit(mix_seed(mix_seed(rng_seed, prompt_seed), 0x726f757465ULL));
}

RoutedSample route(const SubstitutionPolicy& policy, const SyntheticModel& base,
                   std::uint64_t prompt_seed, std::uint64_t rng_seed) {
  const double q = policy.rate(prompt_seed);
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidInput("substitution rate must lie in [0, 1]");
  if (route_coin(prompt_seed, rng_seed) < q) {
    return {sample(policy.alt, prompt_seed, rng_seed), ServedBy::Alt};
  }
  return {sample(base, prompt_seed, rng_seed), ServedBy::Base};
}

namespace {

struct Enumerator {
  const ConditionalTable& model;
  const ConditionalTable& reference;
  int length;
  ScoreFunctionKind kind;
  std::vector<std::pair<double, double>> points;

  void run(int depth, std::size_t model_ctx, std::size_t ref_ctx, double prob, ScoreAccumulator acc) {
    if (prob == 0.0) return;
    if (depth == length) {
      points.emplace_back(acc.value(kind), prob);
      return;
    }
    const auto lp = model.log_probs(model_ctx);
    for (int tok = 0; tok < model.vocab_size(); ++tok) {
      ScoreAccumulator next = acc;
      reference.accumulate(ref_ctx, tok, next);
      run(depth + 1, model.next_context(model_ctx, tok), reference.next_context(ref_ctx, tok),
          prob * std::exp(lp[static_cast<std::size_t>(tok)]), next);
    }
  }
};

}  // namespace

DiscreteScoreCDF enumerate_score_cdf(const SyntheticModel& model, std::uint64_t prompt_seed,
                                     ScoreFunctionKind kind, const SyntheticModel& reference,
                                     std::uint64_t budget) {
  if (model.vocab_size() != reference.vocab_size()) {
    throw InvalidInput("model and reference vocabularies differ");
  }
  const int length = model.decoding().max_tokens;
  std::uint64_t required = 1;
  bool over = false;
  for (int i = 0; i < length; ++i) {
    if (required > std::numeric_limits<std::uint64_t>::max() / static_cast<std::uint64_t>(model.vocab_size())) {
      over = true;
      break;
    }
    required *= static_cast<std::uint64_t>(model.vocab_size());
  }
  if (over || required > budget) {
    const std::string power = std::to_string(model.vocab_size()) + "^" + std::to_string(length);
    throw BudgetError("enumeration needs " + (over ? power : std::to_string(required) + " (" + power + ")") +
                      " sequences, budget is " + std::to_string(budget));
  }
  const ConditionalTable model_table(model, prompt_seed);
  const ConditionalTable ref_table(reference, prompt_seed);
  Enumerator e{model_table, ref_table, length, kind, {}};
  e.points.reserve(static_cast<std::size_t>(required));
  e.run(0, model_table.initial_context(), ref_table.initial_context(), 1.0, {});
  return DiscreteScoreCDF::from_points(std::move(e.points));
}

SyntheticModel perturb(const SyntheticModel& model, const Perturbation& kind) {
  if (const auto* r = std::get_if<Replace>(&kind)) {
    if (!r->other) throw InvalidInput("replacement model is missing");
    return *r->other;
  }
  if (const auto* q = std::get_if<Quantize>(&kind)) return model.with_perturbation(*q);
  return model.with_perturbation(std::get<PromptBias>(kind));
}

double next_token_total_variation(const SyntheticModel& a, const SyntheticModel& b,
                                  std::uint64_t prompt_seed, std::size_t context) {
  const auto pa = a.log_probs(prompt_seed, context);
  const auto pb = b.log_probs(prompt_seed, context);
  if (pa.size() != pb.size()) throw InvalidInput("vocabularies differ");
  double tv = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) tv += std::abs(std::exp(pa[i]) - std::exp(pb[i]));
  return 0.5 * tv;
}

double mean_next_token_total_variation(const SyntheticModel& a, const SyntheticModel& b,
                                       std::span<const std::uint64_t> prompt_seeds) {
  if (prompt_seeds.empty()) throw InvalidInput("no prompts given");
  const std::size_t contexts = std::min(a.context_count(), b.context_count());
  double total = 0.0;
  for (auto seed : prompt_seeds) {
    for (std::size_t c = 0; c < contexts; ++c) total += next_token_total_variation(a, b, seed, c);
  }
  return total / static_cast<double>(prompt_seeds.size() * contexts);
}

SyntheticTokenizer::SyntheticTokenizer(int vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size < 1 || static_cast<std::size_t>(vocab_size) > kAlphabet.size()) {
    throw InvalidInput("synthetic tokenizer supports 1.." + std::to_string(kAlphabet.size()) +
                       " tokens");
  }
}

std::string SyntheticTokenizer::render(std::span<const int> tokens, bool leading_space) const {
  std::string out;
  out.reserve(tokens.size() + 1);
  if (leading_space) out.push_back(' ');
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size_) throw InvalidInput("token id outside vocabulary");
    out.push_back(kAlphabet[static_cast<std::size_t>(t)]);
  }
  return out;
}

std::vector<int> SyntheticTokenizer::tokenize(std::string_view text) const {
  std::vector<int> tokens;
  tokens.reserve(text.size());
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
    const auto pos = kAlphabet.find(c);
    if (pos == std::string_view::npos || pos >= static_cast<std::size_t>(vocab_size_)) {
      throw InvalidInput(std::string("character '") + c + "' is not in the reference vocabulary");
    }
    tokens.push_back(static_cast<int>(pos));
  }
  return tokens;
}

std::uint64_t prompt_seed_for(const PromptRecord& prompt) {
  if (prompt.messages.size() == 1) return fnv1a64(prompt.messages.front().content);
  std::string joined;
  for (const auto& m : prompt.messages) {
    joined += m.role;
    joined += '\x1f';
    joined += m.content;
    joined += '\x1e';
  }
  return fnv1a64(joined);
}

std::vector<TokenScoreEvent> SyntheticScoringBackend::do_score(const PromptRecord& prompt,
                                                               std::string_view response) {
  const auto tokens = tokenizer_.tokenize(response);
  if (tokens.empty()) throw InvalidInput("response has no tokens");
  return score_tokens(reference_, prompt_seed_for(prompt), tokens);
}

// ---------------------------------------------------------------------------
// Model description files

namespace {

using nlohmann::json;

template <typename T>
T field(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) throw ConfigError(path + key, "is required");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + key, "has the wrong type");
  }
}

SyntheticModel model_from_json_at(const json& spec, const std::string& path) {
  if (!spec.is_object()) throw ConfigError(path.empty() ? "model" : path, "must be an object");
  const int vocab = field<int>(spec, path, "vocab_size");
  const int order = spec.contains("context_order") ? field<int>(spec, path, "context_order") : 2;

  DecodingParams decoding;
  if (spec.contains("decoding")) {
    const auto& d = spec["decoding"];
    if (!d.is_object()) throw ConfigError(path + "decoding", "must be an object");
    if (d.contains("temperature")) decoding.temperature = field<double>(d, path + "decoding.", "temperature");
    if (d.contains("max_tokens")) decoding.max_tokens = field<int>(d, path + "decoding.", "max_tokens");
    if (!(decoding.temperature > 0.0)) throw ConfigError(path + "decoding.temperature", "must be positive");
    if (decoding.max_tokens < 1) throw ConfigError(path + "decoding.max_tokens", "must be >= 1");
  }

  if (!spec.contains("logits")) throw ConfigError(path + "logits", "is required");
  const auto& lj = spec["logits"];
  LogitSource source;
  if (lj.is_object() && lj.contains("table")) {
    source = TableLogits{field<std::vector<std::vector<double>>>(lj, path + "logits.", "table")};
  } else if (lj.is_object()) {
    GeneratedLogits gen;
    gen.seed = field<std::uint64_t>(lj, path + "logits.", "generator_seed");
    if (lj.contains("scale")) gen.scale = field<double>(lj, path + "logits.", "scale");
    if (lj.contains("prompt_scale_spread")) {
      gen.prompt_scale_spread = field<double>(lj, path + "logits.", "prompt_scale_spread");
    }
    source = gen;
  } else {
    throw ConfigError(path + "logits", "must be an object");
  }

  std::optional<SyntheticModel> model;
  try {
    model.emplace(vocab, order, std::move(source), decoding,
                  spec.contains("name") ? field<std::string>(spec, path, "name") : std::string{});
  } catch (const InvalidInput& e) {
    throw ConfigError(path.empty() ? "model" : path.substr(0, path.size() - 1), e.what());
  }

  if (spec.contains("perturbations")) {
    const auto& stack = spec["perturbations"];
    if (!stack.is_array()) throw ConfigError(path + "perturbations", "must be an array");
    for (std::size_t i = 0; i < stack.size(); ++i) {
      const std::string at = path + "perturbations[" + std::to_string(i) + "]";
      const auto& p = stack[i];
      try {
        if (p.contains("quantize")) {
          Quantize q;
          q.bits = field<int>(p["quantize"], at + ".quantize.", "bits");
          if (p["quantize"].contains("scale")) q.scale = field<double>(p["quantize"], at + ".quantize.", "scale");
          *model = perturb(*model, q);
        } else if (p.contains("prompt_bias")) {
          *model = perturb(*model, PromptBias{field<std::vector<double>>(p, at + ".", "prompt_bias")});
        } else if (p.contains("replace")) {
          *model = model_from_json_at(p["replace"], at + ".replace.");
        } else {
          throw ConfigError(at, "must contain quantize, prompt_bias or replace");
        }
      } catch (const InvalidInput& e) {
        throw ConfigError(at, e.what());
      }
    }
  }
  return *model;
}

}  // namespace

SyntheticModel model_from_json(const nlohmann::json& spec) { return model_from_json_at(spec, ""); }

nlohmann::json model_to_json(const SyntheticModel& model) {
  json j;
  if (!model.name().empty()) j["name"] = model.name();
  j["vocab_size"] = model.vocab_size();
  j["context_order"] = model.context_order();
  if (const auto* gen = std::get_if<GeneratedLogits>(&model.source())) {
    j["logits"] = {{"generator_seed", gen->seed}, {"scale", gen->scale}};
    if (gen->prompt_scale_spread > 0.0) j["logits"]["prompt_scale_spread"] = gen->prompt_scale_spread;
  } else {
    j["logits"] = {{"table", std::get<TableLogits>(model.source()).rows}};
  }
  j["decoding"] = {{"temperature", model.decoding().temperature},
                   {"max_tokens", model.decoding().max_tokens}};
  json stack = json::array();
  for (const auto& p : model.perturbations()) {
    if (const auto* q = std::get_if<Quantize>(&p)) {
      stack.push_back({{"quantize", {{"bits", q->bits}, {"scale", q->scale}}}});
    } else {
      stack.push_back({{"prompt_bias", std::get<PromptBias>(p).bias}});
    }
  }
  if (!stack.empty()) j["perturbations"] = std::move(stack);
  return j;
}

}  // namespace rankaudit
