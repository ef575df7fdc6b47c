#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rankaudit/score.hpp"
#include "rankaudit/score_cdf.hpp"

namespace rankaudit {

struct RankCounts {
  int below = 0;  // reference scores strictly below the target score
  int ties = 0;   // reference scores exactly equal to it
  int m = 0;
};

/// One randomized rank: r = (below + u * ties) / m.
struct RankSample {
  std::string prompt_id;
  double r = 0.0;
  double u_draw = 0.0;
  RankCounts counts;
};

struct TestOutcome {
  std::string method;
  double statistic = 0.0;
  double p_value = 1.0;
  double alpha = 0.05;
  bool reject = false;
  std::size_t n = 0;

  bool operator==(const TestOutcome&) const = default;
};

nlohmann::json to_json(const TestOutcome& outcome);

inline constexpr double kDefaultAlpha = 0.05;

// Builds a TestOutcome with reject = (p < alpha).
TestOutcome make_outcome(std::string method, double statistic, double p_value, double alpha,
                         std::size_t n);

void validate_alpha(double alpha);

/// Empirical randomized rank of a target score among m reference scores,
/// with exact floating-point comparisons.
RankSample empirical_rank(double target_score, std::span<const double> reference_scores, double u);

/// Randomized quantile residual against an exact score distribution:
/// F(s-) + u * P(score = s).
double exact_rank(double target_score, const DiscreteScoreCDF& cdf, double u);

/// Cramer-von Mises statistic of ranks against Uniform[0,1]:
/// 1/(12n) + sum_i ((2i-1)/(2n) - r_(i))^2 over ascending ranks.
double cvm_statistic(std::span<const double> ranks);

// Limiting (n -> infinity) upper tail P(W^2 >= x), from the Anderson-Darling
// series in modified Bessel functions.
double cvm_asymptotic_sf(double statistic);

/// Null distribution of the CvM statistic for a fixed n: either a sorted
/// table of Monte Carlo draws of n uniforms, or the limiting distribution.
class CvmNullTable {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr std::size_t kDefaultDraws = 100'000;

  static CvmNullTable simulate(std::size_t n, std::size_t draws, std::uint64_t seed);
  static CvmNullTable asymptotic();

  static CvmNullTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool is_asymptotic() const { return asymptotic_; }
  std::size_t n() const { return n_; }
  std::size_t draws() const { return stats_.size(); }
  std::uint64_t seed() const { return seed_; }
  std::span<const double> sorted_statistics() const { return stats_; }

  // Number of table draws >= statistic.
  std::size_t count_at_least(double statistic) const;

 private:
  bool asymptotic_ = false;
  std::size_t n_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> stats_;
};

/// P_H0[W^2 >= statistic]. Finite tables use (#{draws >= stat} + 1) / (draws + 1)
/// and must have been built for this n.
double cvm_p_value(double statistic, std::size_t n, const CvmNullTable& table);

/// Thread-safe lazy store of simulated null tables keyed by n, optionally
/// persisted under a cache directory.
class CvmNullTableCache {
 public:
  explicit CvmNullTableCache(std::size_t draws = CvmNullTable::kDefaultDraws,
                             std::uint64_t seed = 0x5eedc0de,
                             std::optional<std::filesystem::path> directory = std::nullopt);

  std::shared_ptr<const CvmNullTable> get(std::size_t n);

  std::filesystem::path file_for(std::size_t n) const;

 private:
  std::size_t draws_;
  std::uint64_t seed_;
  std::optional<std::filesystem::path> directory_;
  std::mutex mutex_;
  std::map<std::size_t, std::shared_ptr<const CvmNullTable>> tables_;
};

struct RutResult {
  TestOutcome outcome;
  std::vector<RankSample> ranks;
};

// Core of the test on raw scores: one target score and its reference scores
// per prompt, in prompt order. The u draws come from one generator seeded by
// rng_seed and are consumed in prompt order.
RutResult run_rut_on_scores(std::span<const std::string> prompt_ids,
                            std::span<const double> target_scores,
                            std::span<const std::vector<double>> reference_scores, double alpha,
                            std::uint64_t rng_seed, const CvmNullTable& null_table);

/// Rank-based uniformity test over scored responses.
RutResult run_rut(std::span<const ScoredResponse> scored_target,
                  const std::map<std::string, std::vector<ScoredResponse>>& scored_reference,
                  ScoreFunctionKind kind, double alpha, std::uint64_t rng_seed,
                  const CvmNullTable& null_table);

}  // namespace rankaudit
