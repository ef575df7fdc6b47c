#include "rankaudit/rut.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"

namespace rankaudit {

static_assert(std::endian::native == std::endian::little, "null table files are little-endian");

nlohmann::json to_json(const TestOutcome& o) {
  return {{"method", o.method}, {"statistic", o.statistic}, {"p_value", o.p_value},
          {"alpha", o.alpha},   {"reject", o.reject},       {"n", o.n}};
}

void validate_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidInput("alpha must lie in (0, 1)");
}

TestOutcome make_outcome(std::string method, double statistic, double p_value, double alpha,
                         std::size_t n) {
  p_value = std::clamp(p_value, 0.0, 1.0);
  return {std::move(method), statistic, p_value, alpha, p_value < alpha, n};
}

RankSample empirical_rank(double target_score, std::span<const double> reference_scores, double u) {
  if (reference_scores.empty()) throw InvalidInput("empirical rank needs at least one reference score");
  if (!(u >= 0.0 && u <= 1.0)) throw InvalidInput("randomization draw must lie in [0, 1]");
  RankCounts c;
  c.m = static_cast<int>(reference_scores.size());
  for (double s : reference_scores) {
    if (target_score > s) {
      ++c.below;
    } else if (target_score == s) {
      ++c.ties;
    }
  }
  const double r = (static_cast<double>(c.below) + u * static_cast<double>(c.ties)) / c.m;
  return {{}, std::min(r, 1.0), u, c};
}

double exact_rank(double target_score, const DiscreteScoreCDF& cdf, double u) {
  if (!(u >= 0.0 && u <= 1.0)) throw InvalidInput("randomization draw must lie in [0, 1]");
  const auto idx = cdf.find(target_score);
  if (!idx) throw InvalidInput("target score is outside the distribution's support");
  const double r = cdf.left_limits()[*idx] + u * cdf.masses()[*idx];
  return std::clamp(r, 0.0, 1.0);
}

double cvm_statistic(std::span<const double> ranks) {
  if (ranks.empty()) throw InvalidInput("CvM statistic needs at least one rank");
  std::vector<double> sorted(ranks.begin(), ranks.end());
  for (double r : sorted) {
    if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("ranks must lie in [0, 1]");
  }
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double sum = 1.0 / (12.0 * n);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double d = (2.0 * static_cast<double>(i) + 1.0) / (2.0 * n) - sorted[i];
    sum += d * d;
  }
  return sum;
}

double cvm_asymptotic_sf(double statistic) {
  if (!(statistic > 0.0)) return 1.0;
  if (!std::isfinite(statistic)) return 0.0;
  // CDF = sum_k c_k sqrt(4k+1) exp(-q_k) K_{1/4}(q_k) / (pi sqrt(x)),
  // q_k = (4k+1)^2 / (16x), c_k = binom(2k, k) / 4^k.
  double cdf = 0.0;
  double coeff = 1.0;
  for (int k = 0; k < 64; ++k) {
    if (k > 0) coeff *= (2.0 * k - 1.0) / (2.0 * k);
    const double y = 4.0 * k + 1.0;
    const double q = y * y / (16.0 * statistic);
    if (q > 700.0) break;
    const double term = coeff * std::sqrt(y) * std::exp(-q) * std::cyl_bessel_k(0.25, q) /
                        (std::numbers::pi * std::sqrt(statistic));
    cdf += term;
    if (term < 1e-17 * cdf) break;
  }
  return std::clamp(1.0 - cdf, 0.0, 1.0);
}

CvmNullTable CvmNullTable::simulate(std::size_t n, std::size_t draws, std::uint64_t seed) {
  if (n < 1) throw InvalidInput("null table needs n >= 1");
  if (draws < 1) throw InvalidInput("null table needs at least one draw");
  CvmNullTable t;
  t.n_ = n;
  t.seed_ = seed;
  t.stats_.resize(draws);
  Rng rng(seed);
  std::vector<double> u(n);
  for (std::size_t d = 0; d < draws; ++d) {
    for (double& x : u) x = rng.uniform();
    t.stats_[d] = cvm_statistic(u);
  }
  std::sort(t.stats_.begin(), t.stats_.end());
  return t;
}

CvmNullTable CvmNullTable::asymptotic() {
  CvmNullTable t;
  t.asymptotic_ = true;
  return t;
}

namespace {

constexpr char kMagic[8] = {'R', 'K', 'C', 'V', 'M', 'N', 'U', 'L'};

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw InvalidInput("null table file is truncated");
  return value;
}

}  // namespace

void CvmNullTable::save(const std::filesystem::path& path) const {
  if (asymptotic_) throw InvalidInput("the asymptotic null has no table to save");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write null table " + tmp);
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint32_t>(out, 0);
    put<std::uint64_t>(out, n_);
    put<std::uint64_t>(out, stats_.size());
    put<std::uint64_t>(out, seed_);
    out.write(reinterpret_cast<const char*>(stats_.data()),
              static_cast<std::streamsize>(stats_.size() * sizeof(double)));
    if (!out) throw Error("failed writing null table " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CvmNullTable CvmNullTable::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open null table " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw InvalidInput(path.string() + " is not a CvM null table");
  }
  if (take<std::uint32_t>(in) != kFormatVersion) throw InvalidInput("unsupported null table version");
  take<std::uint32_t>(in);
  CvmNullTable t;
  t.n_ = take<std::uint64_t>(in);
  const auto draws = take<std::uint64_t>(in);
  t.seed_ = take<std::uint64_t>(in);
  t.stats_.resize(draws);
  in.read(reinterpret_cast<char*>(t.stats_.data()), static_cast<std::streamsize>(draws * sizeof(double)));
  if (!in) throw InvalidInput("null table file is truncated");
  if (!std::is_sorted(t.stats_.begin(), t.stats_.end())) throw InvalidInput("null table is not sorted");
  return t;
}

std::size_t CvmNullTable::count_at_least(double statistic) const {
  return static_cast<std::size_t>(stats_.end() - std::lower_bound(stats_.begin(), stats_.end(), statistic));
}

double cvm_p_value(double statistic, std::size_t n, const CvmNullTable& table) {
  if (n < 1) throw InvalidInput("CvM p-value needs n >= 1");
  if (table.is_asymptotic()) return cvm_asymptotic_sf(statistic);
  if (table.n() != n) {
    throw InvalidInput("null table was built for n = " + std::to_string(table.n()) + ", not " +
                       std::to_string(n));
  }
  return static_cast<double>(table.count_at_least(statistic) + 1) /
         static_cast<double>(table.draws() + 1);
}

CvmNullTableCache::CvmNullTableCache(std::size_t draws, std::uint64_t seed,
                                     std::optional<std::filesystem::path> directory)
    : draws_(draws), seed_(seed), directory_(std::move(directory)) {}

std::filesystem::path CvmNullTableCache::file_for(std::size_t n) const {
  const auto name = "cvm_null_n" + std::to_string(n) + "_d" + std::to_string(draws_) + "_s" +
                    std::to_string(seed_) + ".bin";
  return directory_ ? *directory_ / name : std::filesystem::path(name);
}

std::shared_ptr<const CvmNullTable> CvmNullTableCache::get(std::size_t n) {
  std::lock_guard lock(mutex_);
  if (auto it = tables_.find(n); it != tables_.end()) return it->second;
  std::shared_ptr<const CvmNullTable> table;
  if (directory_ && std::filesystem::exists(file_for(n))) {
    auto loaded = CvmNullTable::load(file_for(n));
    if (loaded.n() == n && loaded.draws() == draws_ && loaded.seed() == seed_) {
      table = std::make_shared<const CvmNullTable>(std::move(loaded));
    }
  }
  if (!table) {
    auto built = CvmNullTable::simulate(n, draws_, seed_);
    if (directory_) built.save(file_for(n));
    table = std::make_shared<const CvmNullTable>(std::move(built));
  }
  tables_.emplace(n, table);
  return table;
}

RutResult run_rut_on_scores(std::span<const std::string> prompt_ids,
                            std::span<const double> target_scores,
                            std::span<const std::vector<double>> reference_scores, double alpha,
                            std::uint64_t rng_seed, const CvmNullTable& null_table) {
  validate_alpha(alpha);
  if (target_scores.empty()) throw InvalidInput("RUT needs at least one target response");
  if (prompt_ids.size() != target_scores.size() || reference_scores.size() != target_scores.size()) {
    throw InvalidInput("prompt ids, target scores and reference scores must align");
  }
  for (std::size_t i = 0; i < reference_scores.size(); ++i) {
    if (reference_scores[i].empty()) {
      throw InvalidInput("no reference samples for prompt '" + prompt_ids[i] + "'");
    }
  }
  Rng rng(rng_seed);
  std::vector<double> u(target_scores.size());
  for (double& x : u) x = rng.uniform();

  RutResult result;
  result.ranks.reserve(target_scores.size());
  std::vector<double> r(target_scores.size());
  for (std::size_t i = 0; i < target_scores.size(); ++i) {
    auto sample = empirical_rank(target_scores[i], reference_scores[i], u[i]);
    sample.prompt_id = prompt_ids[i];
    r[i] = sample.r;
    result.ranks.push_back(std::move(sample));
  }
  const double stat = cvm_statistic(r);
  result.outcome = make_outcome("rut", stat, cvm_p_value(stat, r.size(), null_table), alpha, r.size());
  return result;
}

RutResult run_rut(std::span<const ScoredResponse> scored_target,
                  const std::map<std::string, std::vector<ScoredResponse>>& scored_reference,
                  ScoreFunctionKind kind, double alpha, std::uint64_t rng_seed,
                  const CvmNullTable& null_table) {
  std::vector<std::string> ids;
  std::vector<double> targets;
  std::vector<std::vector<double>> refs;
  for (const auto& t : scored_target) {
    if (t.events.empty()) throw InvalidInput("target response for prompt '" + t.prompt_id + "' has no tokens");
    const auto it = scored_reference.find(t.prompt_id);
    if (it == scored_reference.end() || it->second.empty()) {
      throw InvalidInput("no reference samples for prompt '" + t.prompt_id + "'");
    }
    ids.push_back(t.prompt_id);
    targets.push_back(t.aggregates[kind]);
    auto& row = refs.emplace_back();
    row.reserve(it->second.size());
    for (const auto& r : it->second) row.push_back(r.aggregates[kind]);
  }
  return run_rut_on_scores(ids, targets, refs, alpha, rng_seed, null_table);
}

}  // namespace rankaudit
