#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace rankaudit {

// Scores closer than this are one support point.
inline constexpr double kScoreMergeTolerance = 1e-12;

/// Exact distribution of a discrete score: ascending distinct support points,
/// their masses, and the CDF left limit at each point.
class DiscreteScoreCDF {
 public:
  // Sorts and merges (score, mass) pairs. Masses must be positive and sum to
  // 1 within 1e-12.
  static DiscreteScoreCDF from_points(std::vector<std::pair<double, double>> points);

  std::span<const double> support() const { return support_; }
  std::span<const double> masses() const { return masses_; }
  std::span<const double> left_limits() const { return left_limits_; }
  std::size_t size() const { return support_.size(); }
  double total_mass() const { return total_; }

  // Index of the support point matching score, within the merge tolerance.
  std::optional<std::size_t> find(double score) const;

  // Inverse-CDF draw: the support point whose cumulative interval holds u.
  double quantile(double u) const;

 private:
  std::vector<double> support_;
  std::vector<double> masses_;
  std::vector<double> left_limits_;
  double total_ = 0.0;
};

}  // namespace rankaudit
