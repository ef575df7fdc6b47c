#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rankaudit/apiclient.hpp"
#include "rankaudit/harness.hpp"

namespace rankaudit::cli {

std::string_view version();

// Built-in defaults; a config file is merged over these.
nlohmann::json default_config();

struct AuditConfig {
  bool endpoint_target = false;  // false: in-process synthetic target
  double substitution_rate = 0.0;
  EndpointConfig endpoint;
  std::optional<std::filesystem::path> corpus;
  std::optional<std::size_t> sample_n;
  TurnMode turn_mode = TurnMode::FirstUserTurn;
  std::optional<std::size_t> request_budget;  // default: exactly the queries needed
  CollectOptions collection;
  std::vector<std::string> scorer_command;  // empty: synthetic scorer over the reference
  bool mmd_on_normalized = true;
};

/// Fully validated run configuration. `effective` is the merged JSON the
/// values were read from; `hash` covers every field that can change results.
struct RunConfig {
  nlohmann::json effective;
  std::string hash;

  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  double alpha = kDefaultAlpha;
  std::vector<TestMethod> tests;
  int trials = 500;
  std::vector<double> q_grid;
  int permutations = 500;
  unsigned threads = 0;

  std::size_t null_draws = CvmNullTable::kDefaultDraws;
  std::uint64_t null_seed = 0;
  std::optional<std::filesystem::path> null_cache_dir;
  std::vector<std::size_t> null_table_sizes;

  TestBudget score_budget;
  TestBudget mmd_budget;

  std::optional<Scenario> scenario;  // absent when the config names no models

  int auroc_prompts = 10;
  int auroc_completions = 50;
  std::vector<ScoreFunctionKind> auroc_kinds;

  int simulate_prompts = 10;
  int simulate_samples = 1;
  double simulate_rate = 0.0;

  AuditConfig audit;

  const Scenario& require_scenario() const;
  HarnessOptions harness_options() const;
};

/// Validates `raw` merged over the defaults. Throws ConfigError naming the
/// offending field.
RunConfig load_config(const nlohmann::json& raw);

// SHA-256 of the result-relevant part of an effective config, as 16 hex digits.
std::string config_hash(const nlohmann::json& effective);

// Subcommands. Each writes its files under config.output_dir and returns
// normally iff the pipeline completed.
void cmd_audit(const RunConfig& config, std::ostream& log);
void cmd_power(const RunConfig& config, std::ostream& log);
void cmd_score_select(const RunConfig& config, std::ostream& log);
void cmd_simulate(const RunConfig& config, std::ostream& log);
void cmd_null_table(const RunConfig& config, std::ostream& log);

// Command-line entry point. Returns the process exit status.
int main(int argc, char** argv);

}  // namespace rankaudit::cli
