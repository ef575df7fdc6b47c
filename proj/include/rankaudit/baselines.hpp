#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "rankaudit/rut.hpp"

namespace rankaudit {

struct StringSample {
  std::string prompt_id;
  std::string text;  // UTF-8; compared by unicode scalar values
};

// Kolmogorov distribution upper tail Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2).
double kolmogorov_sf(double lambda);

/// Two-sample Kolmogorov-Smirnov test. The p-value uses the limiting
/// distribution at the effective size n_a n_b / (n_a + n_b).
TestOutcome ks_two_sample(std::span<const double> scores_a, std::span<const double> scores_b,
                          double alpha = kDefaultAlpha);

/// Character-level Hamming distance aligned at offset 0. Overhang positions
/// count as mismatches; the count is divided by the longer length.
double hamming_distance(std::u32string_view a, std::u32string_view b);
double hamming_distance(const StringSample& a, const StringSample& b);

inline constexpr int kDefaultPermutations = 500;

/// Kernel two-sample permutation test with
/// k((x, y), (x', y')) = [x == x'] * (1 - hamming(y, y')) and the unbiased
/// MMD^2 estimate. Labels are permuted within each prompt.
TestOutcome mmd_test(std::span<const StringSample> target, std::span<const StringSample> reference,
                     int permutations, double alpha, std::uint64_t rng_seed);

}  // namespace rankaudit
