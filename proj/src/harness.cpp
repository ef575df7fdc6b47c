#include "rankaudit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "rankaudit/baselines.hpp"
#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"

namespace rankaudit {

std::string_view to_string(TestMethod method) {
  switch (method) {
    case TestMethod::Rut: return "rut";
    case TestMethod::Ks: return "ks";
    case TestMethod::Mmd: return "mmd";
  }
  return "unknown";
}

TestMethod test_method_from_string(std::string_view name) {
  if (name == "rut") return TestMethod::Rut;
  if (name == "ks") return TestMethod::Ks;
  if (name == "mmd") return TestMethod::Mmd;
  throw InvalidInput("unknown test '" + std::string(name) + "'");
}

TestBudget TestBudget::defaults_for(TestMethod method) {
  if (method == TestMethod::Mmd) return {10, 10, 10};
  return {100, 1, 100};
}

void TestBudget::validate_for(TestMethod method) const {
  if (prompts < 1) throw InvalidInput("budget needs at least one prompt");
  if (reference_per_prompt < 1) throw InvalidInput("budget needs reference samples");
  if (method == TestMethod::Mmd) {
    if (target_per_prompt < 1) throw InvalidInput("MMD budget needs target samples per prompt");
    if (prompts * target_per_prompt < 2 || prompts * reference_per_prompt < 2) {
      throw InvalidInput("MMD budget needs at least two samples on each side");
    }
  } else if (target_per_prompt != 1) {
    throw InvalidInput(std::string(to_string(method)) +
                       " budget takes exactly one target sample per prompt");
  }
}

std::pair<double, double> wilson_interval(int successes, int trials) {
  if (trials < 1 || successes < 0 || successes > trials) {
    throw InvalidInput("invalid binomial counts");
  }
  constexpr double z = 1.959963984540054;
  const double n = trials;
  const double p = successes / n;
  const double denom = 1.0 + z * z / n;
  const double center = (p + z * z / (2.0 * n)) / denom;
  const double half = z / denom * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n));
  return {std::clamp(std::min(center - half, p), 0.0, 1.0),
          std::clamp(std::max(center + half, p), 0.0, 1.0)};
}

double trapezoid_auc(std::span<const PowerPoint> points) {
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].q - points[i - 1].q) * (points[i].power + points[i - 1].power) / 2.0;
  }
  return area;
}

std::vector<double> default_q_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

double auroc(std::span<const double> negatives, std::span<const double> positives) {
  if (negatives.empty() || positives.empty()) throw InvalidInput("AUROC needs both classes");
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(negatives.size() + positives.size());
  for (double s : negatives) items.push_back({s, false});
  for (double s : positives) items.push_back({s, true});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    std::size_t pos = 0;
    while (j < items.size() && items[j].score == items[i].score) pos += items[j++].positive ? 1 : 0;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    positive_rank_sum += midrank * static_cast<double>(pos);
    i = j;
  }
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  const double u = positive_rank_sum - np * (np + 1.0) / 2.0;
  return std::clamp(u / (np * nn), 0.0, 1.0);
}

double pairwise_auroc(std::span<const double> negatives, std::span<const double> positives) {
  if (negatives.empty() || positives.empty()) throw InvalidInput("AUROC needs both classes");
  double wins = 0.0;
  for (double p : positives) {
    for (double n : negatives) {
      if (p > n) {
        wins += 1.0;
      } else if (p == n) {
        wins += 0.5;
      }
    }
  }
  return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n && !failed; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

std::shared_ptr<CvmNullTableCache> shared_null_tables() {
  static auto cache = std::make_shared<CvmNullTableCache>();
  return cache;
}

bool is_score_test(TestMethod m) { return m != TestMethod::Mmd; }

// Partial Fisher-Yates: k distinct indices from [0, n) in draw order.
std::vector<std::size_t> choose_prompts(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

void draw_tokens(const ConditionalTable& table, int length, Rng& rng, std::vector<int>& out) {
  out.clear();
  std::size_t ctx = table.initial_context();
  for (int t = 0; t < length; ++t) {
    const int tok = table.draw(ctx, rng.uniform());
    out.push_back(tok);
    ctx = table.next_context(ctx, tok);
  }
}

ScoreAccumulator score_under(const ConditionalTable& reference, std::span<const int> tokens) {
  ScoreAccumulator acc;
  std::size_t ctx = reference.initial_context();
  for (int tok : tokens) {
    reference.accumulate(ctx, tok, acc);
    ctx = reference.next_context(ctx, tok);
  }
  return acc;
}

// Draws and scores in one pass when the sampling model is the reference.
double sample_reference_score(const ConditionalTable& reference, int length, Rng& rng,
                              ScoreFunctionKind kind) {
  ScoreAccumulator acc;
  std::size_t ctx = reference.initial_context();
  for (int t = 0; t < length; ++t) {
    const int tok = reference.draw(ctx, rng.uniform());
    reference.accumulate(ctx, tok, acc);
    ctx = reference.next_context(ctx, tok);
  }
  return acc.value(kind);
}

void validate_grid(std::span<const double> q_grid) {
  if (q_grid.size() < 2) throw InvalidInput("q grid needs at least two points");
  if (q_grid.front() != 0.0 || q_grid.back() != 1.0) throw InvalidInput("q grid must include 0 and 1");
  for (std::size_t i = 1; i < q_grid.size(); ++i) {
    if (!(q_grid[i] > q_grid[i - 1])) throw InvalidInput("q grid must be strictly ascending");
  }
}

}  // namespace

Simulation::Simulation(Scenario scenario, HarnessOptions options)
    : scenario_(std::move(scenario)), options_(std::move(options)) {
  validate_alpha(options_.alpha);
  if (options_.permutations < 1) throw InvalidInput("permutations must be >= 1");
  if (scenario_.reference.vocab_size() != scenario_.alt.vocab_size()) {
    throw InvalidInput("reference and alternative vocabularies differ");
  }
  if (scenario_.prompt_pool < 1) throw InvalidInput("prompt pool must be nonempty");
  if (!options_.null_tables) options_.null_tables = shared_null_tables();
  if (static_cast<std::size_t>(scenario_.reference.vocab_size()) <= SyntheticTokenizer::kAlphabet.size()) {
    tokenizer_.emplace(scenario_.reference.vocab_size());
  }
  seeds_.reserve(scenario_.prompt_pool);
  for (std::size_t i = 0; i < scenario_.prompt_pool; ++i) seeds_.push_back(mix_seed(scenario_.pool_seed, i));
  reference_tables_.reserve(seeds_.size());
  alt_tables_.reserve(seeds_.size());
  for (auto s : seeds_) {
    reference_tables_.emplace_back(scenario_.reference, s);
    alt_tables_.emplace_back(scenario_.alt, s);
  }
}

std::vector<bool> Simulation::run_trial(std::span<const TestMethod> methods, const RateFunction& rate,
                                        const TestBudget& budget, std::uint64_t seed,
                                        const CvmNullTable* null_table) const {
  Rng rng(seed);
  const auto chosen = choose_prompts(rng, seeds_.size(), static_cast<std::size_t>(budget.prompts));
  const int ref_len = scenario_.reference.decoding().max_tokens;
  const int alt_len = scenario_.alt.decoding().max_tokens;
  std::vector<int> tokens;
  std::vector<bool> rejects;

  // Target completion: routed, rendered, normalized and retokenized, as a
  // live endpoint's text would be.
  auto target_text = [&](std::size_t idx) {
    const bool alt = rng.uniform() < rate(seeds_[idx]);
    draw_tokens(alt ? alt_tables_[idx] : reference_tables_[idx], alt ? alt_len : ref_len, rng, tokens);
    return normalize(tokenizer_->render(tokens, scenario_.target_leading_space),
                     scenario_.target_normalization);
  };

  if (is_score_test(methods.front())) {
    std::vector<std::string> ids;
    std::vector<double> target_scores;
    std::vector<std::vector<double>> reference_scores;
    std::vector<double> pooled;
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      const std::size_t idx = chosen[k];
      const auto& ref = reference_tables_[idx];
      ids.push_back("p" + std::to_string(idx));
      if (tokenizer_) {
        const auto retokenized = tokenizer_->tokenize(target_text(idx));
        if (retokenized.empty()) throw InvalidInput("target response has no tokens");
        target_scores.push_back(score_under(ref, retokenized).value(scenario_.score));
      } else {
        const bool alt = rng.uniform() < rate(seeds_[idx]);
        draw_tokens(alt ? alt_tables_[idx] : ref, alt ? alt_len : ref_len, rng, tokens);
        target_scores.push_back(score_under(ref, tokens).value(scenario_.score));
      }
      auto& row = reference_scores.emplace_back();
      row.reserve(static_cast<std::size_t>(budget.reference_per_prompt));
      for (int j = 0; j < budget.reference_per_prompt; ++j) {
        row.push_back(sample_reference_score(ref, ref_len, rng, scenario_.score));
      }
      pooled.insert(pooled.end(), row.begin(), row.end());
    }
    const std::uint64_t rut_seed = rng.next();
    for (auto m : methods) {
      if (m == TestMethod::Rut) {
        rejects.push_back(run_rut_on_scores(ids, target_scores, reference_scores, options_.alpha,
                                            rut_seed, *null_table)
                              .outcome.reject);
      } else {
        rejects.push_back(ks_two_sample(target_scores, pooled, options_.alpha).reject);
      }
    }
    return rejects;
  }

  if (!tokenizer_) throw InvalidInput("MMD needs a vocabulary with a text form");
  std::vector<StringSample> target;
  std::vector<StringSample> reference;
  for (std::size_t idx : chosen) {
    const std::string id = "p" + std::to_string(idx);
    for (int j = 0; j < budget.target_per_prompt; ++j) target.push_back({id, target_text(idx)});
    for (int j = 0; j < budget.reference_per_prompt; ++j) {
      draw_tokens(reference_tables_[idx], ref_len, rng, tokens);
      reference.push_back({id, normalize(tokenizer_->render(tokens, scenario_.reference_leading_space),
                                         scenario_.reference_normalization)});
    }
  }
  const auto outcome = mmd_test(target, reference, options_.permutations, options_.alpha, rng.next());
  rejects.assign(methods.size(), outcome.reject);
  return rejects;
}

std::vector<PowerPoint> Simulation::estimate_power(std::span<const TestMethod> methods,
                                                   const RateFunction& rate, int trials,
                                                   const TestBudget& budget,
                                                   std::uint64_t rng_seed) const {
  if (methods.empty()) throw InvalidInput("no tests requested");
  if (trials < 1) throw InvalidInput("trials must be >= 1");
  rate.validate();
  for (auto m : methods) {
    budget.validate_for(m);
    if (is_score_test(m) != is_score_test(methods.front())) {
      throw InvalidInput("MMD cannot share draws with RUT or KS");
    }
  }
  if (static_cast<std::size_t>(budget.prompts) > seeds_.size()) {
    throw InvalidInput("budget asks for more prompts than the pool holds");
  }
  std::shared_ptr<const CvmNullTable> null_table;
  if (std::find(methods.begin(), methods.end(), TestMethod::Rut) != methods.end()) {
    null_table = options_.null_tables->get(static_cast<std::size_t>(budget.prompts));
  }

  std::vector<std::vector<bool>> results(static_cast<std::size_t>(trials));
  parallel_for(results.size(), options_.threads, [&](std::size_t t) {
    results[t] = run_trial(methods, rate, budget, mix_seed(rng_seed, t), null_table.get());
  });

  std::vector<PowerPoint> points;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    PowerPoint p;
    p.q = rate.constant;
    p.trials = trials;
    for (const auto& r : results) p.rejections += r[m] ? 1 : 0;
    p.power = static_cast<double>(p.rejections) / trials;
    std::tie(p.ci_low, p.ci_high) = wilson_interval(p.rejections, trials);
    points.push_back(p);
  }
  return points;
}

PowerPoint Simulation::estimate_power(TestMethod method, const RateFunction& rate, int trials,
                                      const TestBudget& budget, std::uint64_t rng_seed) const {
  const TestMethod one[] = {method};
  return estimate_power(one, rate, trials, budget, rng_seed).front();
}

std::vector<PowerCurve> Simulation::power_curves(std::span<const TestMethod> methods,
                                                 std::span<const double> q_grid, int trials,
                                                 std::uint64_t rng_seed) const {
  validate_grid(q_grid);
  std::vector<TestMethod> score_tests;
  std::vector<TestMethod> mmd_tests;
  for (auto m : methods) (is_score_test(m) ? score_tests : mmd_tests).push_back(m);

  std::vector<PowerCurve> curves(methods.size());
  for (std::size_t i = 0; i < methods.size(); ++i) {
    curves[i].method = std::string(to_string(methods[i]));
    curves[i].scenario = scenario_.name;
  }
  // Every grid point reuses the same trial seeds, so curves at neighbouring
  // q differ only through routing.
  for (double q : q_grid) {
    RateFunction rate{q, {}};
    for (const auto* group : {&score_tests, &mmd_tests}) {
      if (group->empty()) continue;
      const auto& budget =
          is_score_test(group->front()) ? options_.score_test_budget : options_.mmd_budget;
      const auto points = estimate_power(*group, rate, trials, budget, rng_seed);
      for (std::size_t g = 0; g < group->size(); ++g) {
        for (std::size_t i = 0; i < methods.size(); ++i) {
          if (methods[i] == (*group)[g]) curves[i].points.push_back(points[g]);
        }
      }
    }
  }
  for (auto& c : curves) c.auc = trapezoid_auc(c.points);
  return curves;
}

PowerCurve Simulation::power_curve(TestMethod method, std::span<const double> q_grid, int trials,
                                   std::uint64_t rng_seed) const {
  const TestMethod one[] = {method};
  return power_curves(one, q_grid, trials, rng_seed).front();
}

std::vector<double> Simulation::average_auroc(int prompts, int completions_per_prompt,
                                              std::span<const ScoreFunctionKind> kinds,
                                              std::uint64_t rng_seed) const {
  if (completions_per_prompt < 2) throw InvalidInput("AUROC needs at least two completions per side");
  if (prompts < 1 || static_cast<std::size_t>(prompts) > seeds_.size()) {
    throw InvalidInput("prompt count must lie in [1, pool size]");
  }
  if (kinds.empty()) throw InvalidInput("no score functions requested");
  Rng rng(rng_seed);
  const auto chosen = choose_prompts(rng, seeds_.size(), static_cast<std::size_t>(prompts));
  const auto m = static_cast<std::size_t>(completions_per_prompt);
  std::vector<double> mean(kinds.size(), 0.0);
  std::vector<std::vector<double>> ref_scores(kinds.size(), std::vector<double>(m));
  std::vector<std::vector<double>> alt_scores(kinds.size(), std::vector<double>(m));
  std::vector<int> tokens;
  for (std::size_t idx : chosen) {
    const auto& ref = reference_tables_[idx];
    for (std::size_t j = 0; j < m; ++j) {
      draw_tokens(ref, scenario_.reference.decoding().max_tokens, rng, tokens);
      const auto acc = score_under(ref, tokens);
      for (std::size_t k = 0; k < kinds.size(); ++k) ref_scores[k][j] = acc.value(kinds[k]);
    }
    for (std::size_t j = 0; j < m; ++j) {
      draw_tokens(alt_tables_[idx], scenario_.alt.decoding().max_tokens, rng, tokens);
      const auto acc = score_under(ref, tokens);
      for (std::size_t k = 0; k < kinds.size(); ++k) alt_scores[k][j] = acc.value(kinds[k]);
    }
    for (std::size_t k = 0; k < kinds.size(); ++k) mean[k] += auroc(ref_scores[k], alt_scores[k]);
  }
  for (double& v : mean) v /= static_cast<double>(prompts);
  return mean;
}

AurocReport Simulation::auroc_report(int prompts, int completions_per_prompt,
                                     std::span<const ScoreFunctionKind> kinds, int trials,
                                     std::uint64_t rng_seed) const {
  if (trials < 1) throw InvalidInput("trials must be >= 1");
  std::vector<std::vector<double>> by_trial(static_cast<std::size_t>(trials));
  parallel_for(by_trial.size(), options_.threads, [&](std::size_t t) {
    by_trial[t] = average_auroc(prompts, completions_per_prompt, kinds, mix_seed(rng_seed, t));
  });
  AurocReport report;
  report.kinds.assign(kinds.begin(), kinds.end());
  report.per_trial.assign(kinds.size(), std::vector<double>(by_trial.size()));
  for (std::size_t t = 0; t < by_trial.size(); ++t) {
    for (std::size_t k = 0; k < kinds.size(); ++k) report.per_trial[k][t] = by_trial[t][k];
  }
  return report;
}

PowerPoint estimate_power(const Scenario& scenario, TestMethod method, const RateFunction& rate,
                          int trials, const TestBudget& budget, std::uint64_t rng_seed,
                          HarnessOptions options) {
  return Simulation(scenario, std::move(options)).estimate_power(method, rate, trials, budget, rng_seed);
}

PowerCurve power_curve(const Scenario& scenario, TestMethod method, std::span<const double> q_grid,
                       int trials, std::uint64_t rng_seed, HarnessOptions options) {
  return Simulation(scenario, std::move(options)).power_curve(method, q_grid, trials, rng_seed);
}

}  // namespace rankaudit
