#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rankaudit/normalize.hpp"
#include "rankaudit/rut.hpp"
#include "rankaudit/score.hpp"
#include "rankaudit/simlab.hpp"

namespace rankaudit {

enum class TestMethod { Rut, Ks, Mmd };

// Names: rut, ks, mmd.
std::string_view to_string(TestMethod method);
TestMethod test_method_from_string(std::string_view name);

/// Queries per trial. RUT and KS take one target completion and
/// reference_per_prompt reference completions per prompt; MMD takes
/// target_per_prompt and reference_per_prompt completions per prompt.
struct TestBudget {
  int prompts = 100;
  int target_per_prompt = 1;
  int reference_per_prompt = 100;

  static TestBudget defaults_for(TestMethod method);
  // Throws InvalidInput when the shape cannot feed the test.
  void validate_for(TestMethod method) const;

  bool operator==(const TestBudget&) const = default;
};

/// A reference model, the model an adversary may substitute for it, and how
/// responses are rendered into text on each side.
struct Scenario {
  std::string name = "scenario";
  SyntheticModel reference;
  SyntheticModel alt;
  ScoreFunctionKind score = ScoreFunctionKind::LogRank;
  // Prompts are drawn from a fixed pool of synthetic prompt seeds.
  std::size_t prompt_pool = 1000;
  std::uint64_t pool_seed = 0;
  bool reference_leading_space = false;
  bool target_leading_space = false;
  std::vector<NormalizationRule> reference_normalization;
  std::vector<NormalizationRule> target_normalization;
};

struct HarnessOptions {
  double alpha = kDefaultAlpha;
  int permutations = 500;
  unsigned threads = 0;  // 0: one per hardware thread
  std::shared_ptr<CvmNullTableCache> null_tables;  // defaults to a shared in-memory cache
  // Budgets used by power_curves.
  TestBudget score_test_budget = TestBudget::defaults_for(TestMethod::Rut);
  TestBudget mmd_budget = TestBudget::defaults_for(TestMethod::Mmd);
};

struct PowerPoint {
  double q = 0.0;
  double power = 0.0;
  int trials = 0;
  int rejections = 0;
  double ci_low = 0.0;
  double ci_high = 1.0;

  bool operator==(const PowerPoint&) const = default;
};

struct PowerCurve {
  std::string method;
  std::string scenario;
  std::vector<PowerPoint> points;
  double auc = 0.0;

  bool operator==(const PowerCurve&) const = default;
};

/// Per score function, the per-trial mean AUROC values.
struct AurocReport {
  std::vector<ScoreFunctionKind> kinds;
  std::vector<std::vector<double>> per_trial;  // per_trial[k][t]
};

// 95% Wilson score interval for k successes in n trials.
std::pair<double, double> wilson_interval(int successes, int trials);

// Trapezoidal integral of power over q. Points must be sorted by q.
double trapezoid_auc(std::span<const PowerPoint> points);

// {0.0, 0.1, ..., 1.0}
std::vector<double> default_q_grid();

/// AUROC of positives against negatives with midranks for ties, i.e.
/// P(pos > neg) + P(pos = neg) / 2. Both sides must be nonempty.
double auroc(std::span<const double> negatives, std::span<const double> positives);

// The same quantity by direct comparison of all pairs.
double pairwise_auroc(std::span<const double> negatives, std::span<const double> positives);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first
/// exception thrown by any call is rethrown after all workers stop.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

/// Simulation state for one scenario: the prompt pool and the next-token
/// tables of both models on every pooled prompt, built once.
class Simulation {
 public:
  explicit Simulation(Scenario scenario, HarnessOptions options = {});

  const Scenario& scenario() const { return scenario_; }
  const HarnessOptions& options() const { return options_; }
  std::span<const std::uint64_t> prompt_seeds() const { return seeds_; }

  /// Fraction of `trials` trials in which the test rejects at alpha, with
  /// target completions routed to the alternative model with probability
  /// rate(prompt).
  PowerPoint estimate_power(TestMethod method, const RateFunction& rate, int trials,
                            const TestBudget& budget, std::uint64_t rng_seed) const;

  /// estimate_power for several methods on shared draws: each trial samples
  /// one set of prompts and completions and runs every test on it. Methods
  /// must share a budget shape.
  std::vector<PowerPoint> estimate_power(std::span<const TestMethod> methods, const RateFunction& rate,
                                         int trials, const TestBudget& budget,
                                         std::uint64_t rng_seed) const;

  PowerCurve power_curve(TestMethod method, std::span<const double> q_grid, int trials,
                         std::uint64_t rng_seed) const;

  // One curve per method, on shared draws at each grid point. RUT and KS
  // share samples; MMD has its own budget.
  std::vector<PowerCurve> power_curves(std::span<const TestMethod> methods,
                                       std::span<const double> q_grid, int trials,
                                       std::uint64_t rng_seed) const;

  /// One trial: mean over `prompts` pooled prompts of the AUROC separating
  /// m alt completions (positive) from m reference completions.
  std::vector<double> average_auroc(int prompts, int completions_per_prompt,
                                    std::span<const ScoreFunctionKind> kinds,
                                    std::uint64_t rng_seed) const;

  AurocReport auroc_report(int prompts, int completions_per_prompt,
                           std::span<const ScoreFunctionKind> kinds, int trials,
                           std::uint64_t rng_seed) const;

 private:
  std::vector<bool> run_trial(std::span<const TestMethod> methods, const RateFunction& rate,
                              const TestBudget& budget, std::uint64_t seed,
                              const CvmNullTable* null_table) const;

  Scenario scenario_;
  HarnessOptions options_;
  std::optional<SyntheticTokenizer> tokenizer_;  // absent when the vocabulary has no text form
  std::vector<std::uint64_t> seeds_;
  std::vector<ConditionalTable> reference_tables_;
  std::vector<ConditionalTable> alt_tables_;
};

// Convenience wrappers building a Simulation for a single call.
PowerPoint estimate_power(const Scenario& scenario, TestMethod method, const RateFunction& rate,
                          int trials, const TestBudget& budget, std::uint64_t rng_seed,
                          HarnessOptions options = {});

PowerCurve power_curve(const Scenario& scenario, TestMethod method, std::span<const double> q_grid,
                       int trials, std::uint64_t rng_seed, HarnessOptions options = {});

}  // namespace rankaudit
