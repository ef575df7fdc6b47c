// Acceptance suite: one PASS/FAIL line per criterion, with the measured values.
// Usage: rankaudit_acceptance <path to the rankaudit executable>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <nlohmann/json.hpp>
#include <unistd.h>

#include "oracle.hpp"
#include "rankaudit/harness.hpp"
#include "rankaudit/mock_endpoint.hpp"
#include "rankaudit/random.hpp"
#include "rankaudit/rut.hpp"
#include "rankaudit/simlab.hpp"

using namespace rankaudit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kBandLow = 0.03;
constexpr double kBandHigh = 0.07;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

bool in_band(double x) { return x >= kBandLow && x <= kBandHigh; }

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

// -- fixtures ---------------------------------------------------------------

SyntheticModel h0_model() {
  return SyntheticModel(16, 2, GeneratedLogits{7, 1.0, 0.0}, DecodingParams{}, "reference");
}

Scenario h0_scenario(const std::string& name) {
  return Scenario{.name = name, .reference = h0_model(), .alt = h0_model()};
}

std::vector<double> alternating(int n, double v) {
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = i % 2 == 0 ? v : -v;
  return out;
}

// Small models whose outputs enumerate exhaustively.
std::vector<SyntheticModel> small_models() {
  std::vector<SyntheticModel> out;
  out.emplace_back(3, 2, GeneratedLogits{1, 1.0, 0.0}, DecodingParams{1.0, 3}, "v3-l3");
  out.emplace_back(4, 1, GeneratedLogits{2, 2.0, 0.0}, DecodingParams{0.5, 4}, "v4-l4");
  out.emplace_back(2, 2, GeneratedLogits{3, 3.0, 0.0}, DecodingParams{0.7, 6}, "v2-l6");
  // Tied logits exercise rank ties.
  out.emplace_back(3, 1, TableLogits{{{0, 0, 1}, {1, 1, 1}, {2, 0, 0}, {0, 0, 0}}}, DecodingParams{1.0, 3}, "table");
  return out;
}

std::vector<std::vector<int>> all_sequences(int vocab, int length) {
  std::vector<std::vector<int>> out{{}};
  for (int step = 0; step < length; ++step) {
    std::vector<std::vector<int>> next;
    for (const auto& s : out) {
      for (int t = 0; t < vocab; ++t) {
        auto c = s;
        c.push_back(t);
        next.push_back(std::move(c));
      }
    }
    out = std::move(next);
  }
  return out;
}

// -- criteria ---------------------------------------------------------------

void exact_rank_uniformity(Verdict& v) {
  const int draws = 100000;
  const int bins = 20;
  const boost::math::chi_squared chi(bins - 1);
  double worst = 1.0;
  int checks = 0;
  for (const auto& model : small_models()) {
    const std::uint64_t prompt = mix_seed(41, fnv1a64(model.name()));
    for (auto kind : kAllScoreFunctions) {
      // Scores are drawn from the brute-force distribution and ranked
      // against the library's enumerated CDF.
      const auto dist = oracle::score_distribution(model, model, prompt, kind);
      std::vector<double> cum;
      double acc = 0.0;
      for (const auto& [s, p] : dist) cum.push_back(acc += p);
      const auto cdf = enumerate_score_cdf(model, prompt, kind, model);
      Rng rng(mix_seed(prompt, static_cast<std::uint64_t>(kind)));
      std::vector<int> counts(bins, 0);
      for (int i = 0; i < draws; ++i) {
        const double w = rng.uniform() * acc;
        const auto at = std::min<std::size_t>(
            static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), w) - cum.begin()), dist.size() - 1);
        const double r = exact_rank(dist[at].first, cdf, rng.uniform());
        ++counts[std::min(bins - 1, static_cast<int>(r * bins))];
      }
      const double expected = static_cast<double>(draws) / bins;
      double stat = 0.0;
      for (int c : counts) stat += (c - expected) * (c - expected) / expected;
      const double p = boost::math::cdf(boost::math::complement(chi, stat));
      worst = std::min(worst, p);
      ++checks;
      v.require(p > 0.001, model.name() + "/" + std::string(to_string(kind)) + " p=" + fmt(p));
    }
  }
  v.detail << checks << " model/score pairs, min chi-square p = " << fmt(worst);
}

void type_one_calibration(Verdict& v) {
  HarnessOptions options;
  const Simulation sim(h0_scenario("h0"), options);
  const std::vector<TestMethod> score_tests = {TestMethod::Rut, TestMethod::Ks};
  const auto points = sim.estimate_power(score_tests, RateFunction{0.0, {}}, 500, options.score_test_budget, 1);
  const auto mmd = sim.estimate_power(TestMethod::Mmd, RateFunction{0.0, {}}, 500, options.mmd_budget, 1);
  const double rut = points[0].power, ks = points[1].power;
  v.detail << "rut " << fmt(rut) << ", ks " << fmt(ks) << ", mmd " << fmt(mmd.power) << " over 500 trials";
  v.require(in_band(rut), "rut");
  v.require(in_band(ks), "ks");
  v.require(in_band(mmd.power), "mmd");
}

void cvm_worked_values(Verdict& v) {
  const double a = cvm_statistic(std::vector<double>{0.5});
  const double b = cvm_statistic(std::vector<double>{1.0 / 8, 3.0 / 8, 5.0 / 8, 7.0 / 8});
  const double c = cvm_statistic(std::vector<double>{0.0, 1.0});
  const double err = std::max({std::abs(a - 1.0 / 12), std::abs(b - 1.0 / 48), std::abs(c - 1.0 / 6)});
  v.detail << "max error " << err;
  v.require(err <= 1e-12, "tolerance 1e-12");
}

void oracle_equivalence(Verdict& v) {
  double worst = 0.0;
  std::size_t sequences = 0, distributions = 0;
  std::vector<SyntheticModel> models;
  for (int vocab = 1; vocab <= 3; ++vocab) {
    for (int length = 1; length <= 3; ++length) {
      for (int order = 1; order <= 2; ++order) {
        models.emplace_back(vocab, order, GeneratedLogits{static_cast<std::uint64_t>(vocab * 10 + length), 1.5, 0.0},
                            DecodingParams{0.8, length});
      }
    }
  }
  models.push_back(small_models()[0]);
  models.push_back(small_models()[3]);
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const auto& model = models[mi];
    // Scored both under itself and under a different reference.
    const SyntheticModel other(model.vocab_size(), model.context_order(), GeneratedLogits{999 + mi, 1.0, 0.0},
                               model.decoding());
    for (std::uint64_t prompt : {std::uint64_t{3}, std::uint64_t{0xabcdef}}) {
      for (const auto* reference : {&model, &other}) {
        for (const auto& seq : all_sequences(model.vocab_size(), model.decoding().max_tokens)) {
          const auto events = score_tokens(*reference, prompt, seq);
          const auto expected = oracle::events(*reference, prompt, seq);
          for (auto kind : kAllScoreFunctions) {
            worst = std::max(worst, std::abs(aggregate_score(events, kind) - oracle::aggregate(expected, kind)));
          }
          ++sequences;
        }
        for (auto kind : kAllScoreFunctions) {
          const auto cdf = enumerate_score_cdf(model, prompt, kind, *reference);
          const auto expected = oracle::score_distribution(model, *reference, prompt, kind);
          ++distributions;
          if (cdf.size() != expected.size()) {
            v.require(false, "support size " + std::to_string(cdf.size()) + " vs " + std::to_string(expected.size()));
            continue;
          }
          for (std::size_t i = 0; i < cdf.size(); ++i) {
            worst = std::max(worst, std::abs(cdf.support()[i] - expected[i].first));
            worst = std::max(worst, std::abs(cdf.masses()[i] - expected[i].second));
          }
        }
      }
    }
  }
  v.detail << sequences << " scored sequences, " << distributions << " distributions, max error " << worst;
  v.require(worst <= 1e-12, "tolerance 1e-12");
}

void mixture_endpoints(Verdict& v) {
  HarnessOptions options;
  const auto budget = options.score_test_budget;
  Scenario bias = h0_scenario("bias");
  bias.alt = perturb(bias.reference, PromptBias{alternating(16, 2.0)});
  const Simulation biased(bias, options);
  const Simulation same(h0_scenario("h0"), options);

  const double q0 = biased.estimate_power(TestMethod::Rut, RateFunction{0.0, {}}, 500, budget, 2).power;
  const double q1_same = same.estimate_power(TestMethod::Rut, RateFunction{1.0, {}}, 500, budget, 3).power;
  const double q1 = biased.estimate_power(TestMethod::Rut, RateFunction{1.0, {}}, 500, budget, 4).power;
  const double tv = mean_next_token_total_variation(bias.reference, bias.alt,
                                                    std::span(biased.prompt_seeds()).first(100));
  v.detail << "rut q=0 " << fmt(q0) << ", alt=reference q=1 " << fmt(q1_same) << ", high-effect q=1 " << fmt(q1)
           << " (mean next-token TV " << fmt(tv) << ")";
  v.require(in_band(q0), "q=0 in band");
  v.require(in_band(q1_same), "alt=reference in band");
  v.require(tv > 0.3, "TV > 0.3");
  v.require(q1 >= 0.95, "power >= 0.95");
}

void quantization_ordering(Verdict& v) {
  const SyntheticModel reference(16, 2, GeneratedLogits{7, 1.0, 0.5}, DecodingParams{}, "reference");
  const Scenario sc{.name = "quantization", .reference = reference, .alt = perturb(reference, Quantize{1, 0.0})};
  const Simulation sim(sc, HarnessOptions{});
  const std::vector<TestMethod> methods = {TestMethod::Rut, TestMethod::Ks};
  const auto grid = default_q_grid();
  for (std::uint64_t seed : {11, 12, 13}) {
    const auto curves = sim.power_curves(methods, grid, 200, seed);
    v.detail << "seed " << seed << ": rut " << fmt(curves[0].auc) << " ks " << fmt(curves[1].auc) << "; ";
    v.require(curves[0].auc > curves[1].auc, "seed " + std::to_string(seed));
  }
}

void whitespace(Verdict& v) {
  HarnessOptions options;
  Scenario shifted = h0_scenario("whitespace");
  shifted.reference_leading_space = true;
  shifted.target_leading_space = false;
  Scenario restored = shifted;
  restored.target_normalization = {NormalizationRule::RestoreLeadingSpace};
  const RateFunction none{0.0, {}};

  const Simulation a(shifted, options), b(restored, options);
  const double mmd_shifted = a.estimate_power(TestMethod::Mmd, none, 500, options.mmd_budget, 5).power;
  const double mmd_restored = b.estimate_power(TestMethod::Mmd, none, 500, options.mmd_budget, 6).power;
  const double rut_shifted = a.estimate_power(TestMethod::Rut, none, 500, options.score_test_budget, 7).power;
  const double rut_restored = b.estimate_power(TestMethod::Rut, none, 500, options.score_test_budget, 8).power;
  v.detail << "mmd " << fmt(mmd_shifted) << " -> " << fmt(mmd_restored) << ", rut " << fmt(rut_shifted) << " -> "
           << fmt(rut_restored);
  v.require(mmd_shifted >= 0.99, "mmd power ~ 1 before normalization");
  v.require(in_band(mmd_restored), "mmd in band after normalization");
  v.require(in_band(rut_shifted) && in_band(rut_restored), "rut in band");
}

void auroc_centering(Verdict& v) {
  const Simulation sim(h0_scenario("h0"), HarnessOptions{});
  const std::vector<ScoreFunctionKind> kinds(kAllScoreFunctions.begin(), kAllScoreFunctions.end());
  const auto report = sim.auroc_report(10, 50, kinds, 500, 9);
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    double mean = 0.0;
    for (double x : report.per_trial[k]) mean += x;
    mean /= static_cast<double>(report.per_trial[k].size());
    v.detail << to_string(kinds[k]) << " " << fmt(mean) << "; ";
    v.require(std::abs(mean - 0.5) <= 0.02, std::string(to_string(kinds[k])));
  }
}

// -- CLI helpers ------------------------------------------------------------

int run(const std::string& binary, const std::string& args, const fs::path& log) {
  const std::string cmd = "'" + binary + "' " + args + " >>'" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> data_lines(const fs::path& p, bool jsonl) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const bool header = jsonl ? first : (!line.empty() && line[0] == '#');
    first = false;
    if (!header) out.push_back(line);
  }
  return out;
}

json cli_fixture(const fs::path& out) {
  return {{"output_dir", out.string()},
          {"seed", 21},
          {"tests", {"rut", "ks", "mmd"}},
          {"trials", 20},
          {"q_grid", {0.0, 0.5, 1.0}},
          {"null_table", {{"draws", 5000}}},
          {"null_table_sizes", {20, 50}},
          {"budget", {{"rut", {{"prompts", 20}, {"reference_per_prompt", 30}}}, {"mmd", {{"prompts", 5}}}}},
          {"auroc", {{"prompts", 4}, {"completions_per_prompt", 10}}},
          {"scenario",
           {{"name", "determinism"},
            {"reference", {{"vocab_size", 8}, {"logits", {{"generator_seed", 4}}}, {"decoding", {{"max_tokens", 12}}}}},
            {"alt_perturbations", {{{"quantize", {{"bits", 2}}}}}},
            {"prompt_pool", 100}}},
          {"audit", {{"substitution_rate", 0.5}}}};
}

void cli_determinism(Verdict& v, const std::string& binary, const fs::path& work) {
  std::size_t compared = 0;
  for (const std::string cmd : {"audit", "power", "score-select", "simulate", "null-table"}) {
    const fs::path a = work / ("det_" + cmd + "_a"), b = work / ("det_" + cmd + "_b");
    auto ca = cli_fixture(a), cb = cli_fixture(b);
    ca["threads"] = 1;
    cb["threads"] = 2;
    std::ofstream(work / "det_a.json") << ca.dump();
    std::ofstream(work / "det_b.json") << cb.dump();
    const int sa = run(binary, cmd + " -c '" + (work / "det_a.json").string() + "'", work / "cli.log");
    const int sb = run(binary, cmd + " -c '" + (work / "det_b.json").string() + "'", work / "cli.log");
    if (sa != 0 || sb != 0) {
      v.require(false, cmd + " exit " + std::to_string(sa) + "/" + std::to_string(sb));
      continue;
    }
    for (const auto& entry : fs::directory_iterator(a)) {
      const auto ext = entry.path().extension();
      if (ext != ".csv" && ext != ".jsonl" && ext != ".txt") continue;
      ++compared;
      v.require(slurp(entry.path()) == slurp(b / entry.path().filename()),
                cmd + " " + entry.path().filename().string());
    }
  }
  v.detail << compared << " output files compared across 5 commands";
  v.require(compared >= 10, "expected outputs present");
}

void mock_endpoint_audit(Verdict& v, const std::string& binary, const fs::path& work) {
  const SyntheticModel model(8, 2, GeneratedLogits{17, 1.0, 0.0}, DecodingParams{0.5, 16}, "reference");
  auto options = [&] {
    MockEndpointOptions o{.model = model};
    o.alt = perturb(model, Quantize{2, 0.0});
    o.substitution_rate = 0.3;
    o.rate_limit_failures = 1;
    o.seed = 77;
    return o;
  };
  auto config = [&](const fs::path& out, const std::string& base_url) {
    return json{{"output_dir", out.string()},
                {"seed", 3},
                {"tests", {"rut", "ks", "mmd"}},
                {"null_table", {{"draws", 20000}}},
                {"budget", {{"rut", {{"prompts", 30}, {"reference_per_prompt", 40}}}, {"mmd", {{"prompts", 4}, {"target_per_prompt", 5}}}}},
                {"scenario", {{"reference", model_to_json(model)}, {"prompt_pool", 100}}},
                {"audit",
                 {{"target", "endpoint"},
                  {"endpoint", {{"base_url", base_url}, {"model", "mock-model"}, {"timeout_seconds", 10.0}}},
                  {"collection",
                   {{"budget", 200},
                    {"retry", {{"max_attempts", 3}, {"initial_backoff_seconds", 0.01}, {"backoff_multiplier", 2.0}}},
                    {"normalization", {"strip_leading_whitespace"}}}}}}};
  };
  const std::size_t n = 30 + 4 * 5;
  const std::size_t budget = 200;

  // Interrupted, then resumed against the same server.
  const fs::path resumed_dir = work / "audit_resumed";
  auto opts = options();
  opts.fail_after_successes = 17;
  MockChatServer server(opts);
  server.start();
  std::ofstream(work / "audit_resumed.json") << config(resumed_dir, server.base_url()).dump();
  const int first = run(binary, "audit -c '" + (work / "audit_resumed.json").string() + "'", work / "cli.log");
  const std::size_t stored_after_failure = data_lines(resumed_dir / "responses" / "responses.jsonl", false).size();
  server.set_fail_after_successes(std::nullopt);
  const int second = run(binary, "audit -c '" + (work / "audit_resumed.json").string() + "'", work / "cli.log");
  server.stop();

  // Uninterrupted run against a fresh server with the same seed.
  const fs::path clean_dir = work / "audit_clean";
  MockChatServer fresh(options());
  fresh.start();
  std::ofstream(work / "audit_clean.json") << config(clean_dir, fresh.base_url()).dump();
  const int clean = run(binary, "audit -c '" + (work / "audit_clean.json").string() + "'", work / "cli.log");
  fresh.stop();

  const auto stored = data_lines(resumed_dir / "responses" / "responses.jsonl", false);
  json collection = json::object();
  if (fs::exists(resumed_dir / "collection.json")) collection = json::parse(std::ifstream(resumed_dir / "collection.json"));
  const std::size_t billable = collection.value("billable_requests", std::size_t{0});
  const bool same_outcomes =
      data_lines(resumed_dir / "outcomes.jsonl", true) == data_lines(clean_dir / "outcomes.jsonl", true) &&
      data_lines(resumed_dir / "ranks.csv", false) == data_lines(clean_dir / "ranks.csv", false);
  const bool nonempty = !data_lines(clean_dir / "outcomes.jsonl", true).empty();

  v.detail << "exit codes " << first << "/" << second << "/" << clean << ", " << stored_after_failure
           << " stored before resume, " << stored.size() << " of " << n << " after, billable " << billable << " <= "
           << budget << ", outcomes " << (same_outcomes ? "match" : "differ") << " the uninterrupted run";
  v.require(first == 3, "interrupted run exits 3");
  v.require(stored_after_failure > 0 && stored_after_failure < n, "partial progress persisted");
  v.require(second == 0 && clean == 0, "completed runs exit 0");
  v.require(stored.size() == n, "exactly N responses");
  v.require(billable > 0 && billable <= budget, "within budget");
  v.require(same_outcomes && nonempty, "resumed outcomes equal uninterrupted outcomes");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: rankaudit_acceptance <rankaudit executable>\n";
    return 2;
  }
  const std::string binary = fs::absolute(argv[1]).string();
  const fs::path work = fs::temp_directory_path() / ("rankaudit_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria = {
      {"exact-rank uniformity", exact_rank_uniformity},
      {"type-I calibration", type_one_calibration},
      {"CvM worked values", cvm_worked_values},
      {"oracle equivalence", oracle_equivalence},
      {"mixture endpoints", mixture_endpoints},
      {"quantization ordering", quantization_ordering},
      {"whitespace normalization", whitespace},
      {"AUROC H0 centering", auroc_centering},
      {"CLI determinism", [&](Verdict& v) { cli_determinism(v, binary, work); }},
      {"mock-endpoint audit", [&](Verdict& v) { mock_endpoint_audit(v, binary, work); }},
  };

  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      check(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail.str() << " (" << fmt(secs) << " s)"
              << std::endl;
    failures += !v.pass;
  }
  if (failures == 0) fs::remove_all(work);
  return failures == 0 ? 0 : 1;
}
