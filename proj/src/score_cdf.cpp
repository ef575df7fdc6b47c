#include "rankaudit/score_cdf.hpp"

#include <algorithm>
#include <iterator>
#include <cmath>
#include <string>

#include "rankaudit/errors.hpp"

namespace rankaudit {

namespace {

// Neumaier compensated running sum.
struct CompensatedSum {
  double sum = 0.0;
  double carry = 0.0;

  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      carry += (sum - t) + x;
    } else {
      carry += (x - t) + sum;
    }
    sum = t;
  }
  double value() const { return sum + carry; }
};

}  // namespace

DiscreteScoreCDF DiscreteScoreCDF::from_points(std::vector<std::pair<double, double>> points) {
  if (points.empty()) throw InvalidInput("score distribution has no support points");
  for (const auto& [score, mass] : points) {
    if (!std::isfinite(score)) throw InvalidInput("score support point is not finite");
    if (!(mass > 0.0)) throw InvalidInput("score mass must be positive");
  }
  std::sort(points.begin(), points.end());

  DiscreteScoreCDF cdf;
  CompensatedSum group;
  double group_start = points.front().first;
  for (const auto& [score, mass] : points) {
    if (score - group_start > kScoreMergeTolerance) {
      cdf.support_.push_back(group_start);
      cdf.masses_.push_back(group.value());
      group = {};
      group_start = score;
    }
    group.add(mass);
  }
  cdf.support_.push_back(group_start);
  cdf.masses_.push_back(group.value());

  CompensatedSum running;
  cdf.left_limits_.reserve(cdf.masses_.size());
  for (double m : cdf.masses_) {
    cdf.left_limits_.push_back(running.value());
    running.add(m);
  }
  cdf.total_ = running.value();
  if (std::abs(cdf.total_ - 1.0) > 1e-12) {
    throw InvalidInput("score masses sum to " + std::to_string(cdf.total_) + ", not 1");
  }
  return cdf;
}

std::optional<std::size_t> DiscreteScoreCDF::find(double score) const {
  const auto it = std::lower_bound(support_.begin(), support_.end(), score);
  std::optional<std::size_t> best;
  double best_gap = 0.0;
  const double tol = kScoreMergeTolerance * std::max(1.0, std::abs(score));
  for (auto cand : {it, it == support_.begin() ? it : std::prev(it)}) {
    if (cand == support_.end()) continue;
    const double gap = std::abs(*cand - score);
    if (gap <= tol && (!best || gap < best_gap)) {
      best = static_cast<std::size_t>(cand - support_.begin());
      best_gap = gap;
    }
  }
  return best;
}

double DiscreteScoreCDF::quantile(double u) const {
  // left_limits is ascending; the answer is the last point whose left limit
  // is <= u.
  const auto it = std::upper_bound(left_limits_.begin(), left_limits_.end(), u);
  const auto idx = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - left_limits_.begin()) - 1));
  return support_[idx];
}

}  // namespace rankaudit
