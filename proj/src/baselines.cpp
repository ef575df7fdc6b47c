#include "rankaudit/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"
#include "rankaudit/text.hpp"

namespace rankaudit {

double kolmogorov_sf(double lambda) {
  if (!(lambda > 0.0)) return 1.0;
  if (lambda < 1.18) {
    // Small-lambda form of the same distribution; the alternating series
    // converges too slowly here.
    const double pi2 = std::numbers::pi * std::numbers::pi;
    double cdf = 0.0;
    for (int k = 1; k <= 50; ++k) {
      const double j = 2.0 * k - 1.0;
      cdf += std::exp(-j * j * pi2 / (8.0 * lambda * lambda));
    }
    cdf *= std::sqrt(2.0 * std::numbers::pi) / lambda;
    return std::clamp(1.0 - cdf, 0.0, 1.0);
  }
  double sum = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += sign * term;
    if (term < 1e-18) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

TestOutcome ks_two_sample(std::span<const double> scores_a, std::span<const double> scores_b,
                          double alpha) {
  validate_alpha(alpha);
  if (scores_a.empty() || scores_b.empty()) throw InvalidInput("KS test needs two nonempty samples");
  std::vector<double> a(scores_a.begin(), scores_a.end());
  std::vector<double> b(scores_b.begin(), scores_b.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0;
  std::size_t j = 0;
  double d = 0.0;
  // Both empirical CDFs are evaluated after consuming every copy of the
  // current value, so ties never open a spurious gap.
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = na * nb / (na + nb);
  const double root = std::sqrt(ne);
  const double p = kolmogorov_sf((root + 0.12 + 0.11 / root) * d);
  return make_outcome("ks", d, p, alpha, a.size());
}

double hamming_distance(std::u32string_view a, std::u32string_view b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 0.0;
  const std::size_t shared = std::min(a.size(), b.size());
  std::size_t mismatches = longest - shared;
  for (std::size_t i = 0; i < shared; ++i) {
    if (a[i] != b[i]) ++mismatches;
  }
  return static_cast<double>(mismatches) / static_cast<double>(longest);
}

double hamming_distance(const StringSample& a, const StringSample& b) {
  return hamming_distance(utf8_to_scalars(a.text), utf8_to_scalars(b.text));
}

namespace {

struct KernelPair {
  std::uint32_t i;
  std::uint32_t j;
  double k;
};

double mmd_unbiased(std::span<const KernelPair> pairs, const std::vector<char>& is_target,
                    double n_target, double n_reference) {
  double tt = 0.0;
  double rr = 0.0;
  double tr = 0.0;
  for (const auto& p : pairs) {
    const bool ti = is_target[p.i] != 0;
    const bool tj = is_target[p.j] != 0;
    if (ti && tj) {
      tt += p.k;
    } else if (!ti && !tj) {
      rr += p.k;
    } else {
      tr += p.k;
    }
  }
  // Pairs are unordered (i < j), hence the factor 2 on the within sums.
  return 2.0 * tt / (n_target * (n_target - 1.0)) + 2.0 * rr / (n_reference * (n_reference - 1.0)) -
         2.0 * tr / (n_target * n_reference);
}

}  // namespace

TestOutcome mmd_test(std::span<const StringSample> target, std::span<const StringSample> reference,
                     int permutations, double alpha, std::uint64_t rng_seed) {
  validate_alpha(alpha);
  if (target.size() < 2 || reference.size() < 2) {
    throw InvalidInput("MMD needs at least two samples on each side");
  }
  if (permutations < 1) throw InvalidInput("MMD needs at least one permutation");

  std::vector<const StringSample*> pooled;
  pooled.reserve(target.size() + reference.size());
  for (const auto& s : target) pooled.push_back(&s);
  for (const auto& s : reference) pooled.push_back(&s);
  std::vector<char> is_target(pooled.size(), 0);
  std::fill(is_target.begin(), is_target.begin() + static_cast<std::ptrdiff_t>(target.size()), 1);

  std::vector<std::u32string> text;
  text.reserve(pooled.size());
  for (const auto* s : pooled) text.push_back(utf8_to_scalars(s->text));

  // Strata by prompt, in first-appearance order.
  std::unordered_map<std::string, std::size_t> stratum_of;
  std::vector<std::vector<std::uint32_t>> strata;
  for (std::uint32_t i = 0; i < pooled.size(); ++i) {
    auto [it, fresh] = stratum_of.try_emplace(pooled[i]->prompt_id, strata.size());
    if (fresh) strata.emplace_back();
    strata[it->second].push_back(i);
  }

  std::vector<KernelPair> pairs;
  for (const auto& members : strata) {
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const auto i = members[a];
        const auto j = members[b];
        pairs.push_back({i, j, 1.0 - hamming_distance(text[i], text[j])});
      }
    }
  }

  const double nt = static_cast<double>(target.size());
  const double nr = static_cast<double>(reference.size());
  const double observed = mmd_unbiased(pairs, is_target, nt, nr);
  const double tolerance = 1e-12 * std::max(1.0, std::abs(observed));

  Rng rng(rng_seed);
  std::vector<char> labels;
  std::size_t at_least = 0;
  for (int b = 0; b < permutations; ++b) {
    labels = is_target;
    for (const auto& members : strata) {
      for (std::size_t k = members.size(); k > 1; --k) {
        const auto swap_with = static_cast<std::size_t>(rng.below(k));
        std::swap(labels[members[k - 1]], labels[members[swap_with]]);
      }
    }
    if (mmd_unbiased(pairs, labels, nt, nr) >= observed - tolerance) ++at_least;
  }
  const double p = static_cast<double>(at_least + 1) / static_cast<double>(permutations + 1);
  return make_outcome("mmd", observed, p, alpha, target.size());
}

}  // namespace rankaudit
