#include "rankaudit/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "rankaudit/baselines.hpp"
#include "rankaudit/errors.hpp"
#include "rankaudit/mock_endpoint.hpp"
#include "rankaudit/protocol.hpp"
#include "rankaudit/random.hpp"
#include "rankaudit/rut.hpp"

#ifndef RANKAUDIT_VERSION
#define RANKAUDIT_VERSION "0.0.0"
#endif

namespace rankaudit::cli {

using nlohmann::json;

std::string_view version() { return RANKAUDIT_VERSION; }

json default_config() {
  json kinds = json::array();
  for (auto k : kAllScoreFunctions) kinds.push_back(std::string(to_string(k)));
  json grid = json::array();
  for (double q : default_q_grid()) grid.push_back(q);
  return {
      {"output_dir", "rankaudit-out"},
      {"seed", 0},
      {"alpha", kDefaultAlpha},
      {"tests", json::array({"rut"})},
      {"trials", 500},
      {"q_grid", grid},
      {"permutations", kDefaultPermutations},
      {"threads", 0},
      {"null_table", {{"draws", CvmNullTable::kDefaultDraws}, {"seed", 0x5eedc0de}, {"cache_dir", nullptr}}},
      {"null_table_sizes", json::array({100})},
      {"budget",
       {{"rut", {{"prompts", 100}, {"target_per_prompt", 1}, {"reference_per_prompt", 100}}},
        {"mmd", {{"prompts", 10}, {"target_per_prompt", 10}, {"reference_per_prompt", 10}}}}},
      {"scenario", nullptr},
      {"auroc", {{"prompts", 10}, {"completions_per_prompt", 50}, {"kinds", kinds}}},
      {"simulate", {{"prompts", 10}, {"samples_per_prompt", 1}, {"substitution_rate", 0.0}}},
      {"audit",
       {{"target", "synthetic"},
        {"substitution_rate", 0.0},
        {"endpoint",
         {{"base_url", ""},
          {"path", "/v1/chat/completions"},
          {"model", ""},
          {"api_key_env", ""},
          {"timeout_seconds", 60.0}}},
        {"corpus", {{"path", nullptr}, {"sample_n", nullptr}, {"turn_mode", "first_user_turn"}}},
        {"collection",
         {{"budget", nullptr},
          {"concurrency", 4},
          {"max_requests_per_second", 0.0},
          {"pacing_jitter_seconds", 0.0},
          {"retry", {{"max_attempts", 3}, {"initial_backoff_seconds", 1.0}, {"backoff_multiplier", 2.0}}},
          {"normalization", json::array()}}},
        {"scorer", {{"type", "synthetic"}, {"command", json::array()}}},
        {"mmd_text", "normalized"}}},
  };
}

namespace {

// ---------------------------------------------------------------------------
// Validation helpers. `path` is the dotted name of the enclosing object.

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(path.empty() ? "config" : path, "must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(join(path, key), "is not a recognized field");
    }
  }
}

template <typename T>
T read(const json& obj, const std::string& path, const char* key) {
  const std::string name = join(path, key);
  if (!obj.contains(key) || obj.at(key).is_null()) throw ConfigError(name, "is required");
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name, "must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(name, "must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          throw ConfigError(name, "must be nonnegative");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name, "must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name, "must be a string");
    }
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(name, "has the wrong type");
  }
}

template <typename T>
std::optional<T> read_optional(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return read<T>(obj, path, key);
}

int read_positive(const json& obj, const std::string& path, const char* key) {
  const int v = read<int>(obj, path, key);
  if (v < 1) throw ConfigError(join(path, key), "must be >= 1");
  return v;
}

double read_probability(const json& obj, const std::string& path, const char* key) {
  const double v = read<double>(obj, path, key);
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(join(path, key), "must lie in [0, 1]");
  return v;
}

std::vector<std::string> read_strings(const json& obj, const std::string& path, const char* key) {
  const std::string name = join(path, key);
  if (!obj.contains(key) || !obj.at(key).is_array()) throw ConfigError(name, "must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : obj.at(key)) {
    if (!v.is_string()) throw ConfigError(name, "must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

std::vector<NormalizationRule> read_rules(const json& obj, const std::string& path, const char* key) {
  try {
    return normalization_rules_from_strings(read_strings(obj, path, key));
  } catch (const InvalidInput& e) {
    throw ConfigError(join(path, key), e.what());
  }
}

TestBudget read_budget(const json& obj, const std::string& path, TestMethod method) {
  check_keys(obj, path, {"prompts", "target_per_prompt", "reference_per_prompt"});
  TestBudget b{read_positive(obj, path, "prompts"), read_positive(obj, path, "target_per_prompt"),
               read_positive(obj, path, "reference_per_prompt")};
  try {
    b.validate_for(method);
  } catch (const InvalidInput& e) {
    throw ConfigError(path, e.what());
  }
  return b;
}

SyntheticModel read_model(const json& spec, const std::string& path) {
  try {
    return model_from_json(spec);
  } catch (const ConfigError& e) {
    throw ConfigError(e.field() == "model" ? path : join(path, e.field()), e.detail());
  } catch (const InvalidInput& e) {
    throw ConfigError(path, e.what());
  }
}

Scenario read_scenario(const json& s) {
  const std::string path = "scenario";
  check_keys(s, path, {"name", "reference", "alt", "alt_perturbations", "score", "prompt_pool", "pool_seed", "render"});
  if (!s.contains("reference")) throw ConfigError("scenario.reference", "is required");
  SyntheticModel reference = read_model(s["reference"], "scenario.reference");
  std::optional<SyntheticModel> alt;
  if (s.contains("alt") && s.contains("alt_perturbations")) {
    throw ConfigError("scenario.alt_perturbations", "cannot be combined with scenario.alt");
  }
  if (s.contains("alt")) {
    alt = read_model(s["alt"], "scenario.alt");
  } else if (s.contains("alt_perturbations")) {
    if (!s["alt_perturbations"].is_array()) throw ConfigError("scenario.alt_perturbations", "must be an array");
    json spec = s["reference"];
    json stack = spec.contains("perturbations") ? spec["perturbations"] : json::array();
    for (const auto& p : s["alt_perturbations"]) stack.push_back(p);
    spec["perturbations"] = stack;
    try {
      alt = model_from_json(spec);
    } catch (const ConfigError& e) {
      throw ConfigError("scenario.alt_perturbations", e.what());
    }
  } else {
    alt = reference;
  }

  Scenario sc{.name = s.contains("name") ? read<std::string>(s, path, "name") : "scenario",
              .reference = std::move(reference),
              .alt = std::move(*alt)};
  if (s.contains("score")) {
    try {
      sc.score = score_function_from_string(read<std::string>(s, path, "score"));
    } catch (const InvalidInput& e) {
      throw ConfigError("scenario.score", e.what());
    }
  }
  if (s.contains("prompt_pool")) sc.prompt_pool = static_cast<std::size_t>(read_positive(s, path, "prompt_pool"));
  if (s.contains("pool_seed")) sc.pool_seed = read<std::uint64_t>(s, path, "pool_seed");
  if (s.contains("render")) {
    const auto& r = s["render"];
    const std::string rp = "scenario.render";
    check_keys(r, rp, {"reference_leading_space", "target_leading_space", "reference_normalization",
                       "target_normalization"});
    if (r.contains("reference_leading_space")) sc.reference_leading_space = read<bool>(r, rp, "reference_leading_space");
    if (r.contains("target_leading_space")) sc.target_leading_space = read<bool>(r, rp, "target_leading_space");
    if (r.contains("reference_normalization")) sc.reference_normalization = read_rules(r, rp, "reference_normalization");
    if (r.contains("target_normalization")) sc.target_normalization = read_rules(r, rp, "target_normalization");
  }
  if (sc.reference.vocab_size() != sc.alt.vocab_size()) {
    throw ConfigError("scenario.alt", "vocab_size must match the reference");
  }
  return sc;
}

AuditConfig read_audit(const json& a) {
  const std::string path = "audit";
  check_keys(a, path, {"target", "substitution_rate", "endpoint", "corpus", "collection", "scorer", "mmd_text"});
  AuditConfig out;
  const auto target = read<std::string>(a, path, "target");
  if (target != "synthetic" && target != "endpoint") {
    throw ConfigError("audit.target", "must be \"synthetic\" or \"endpoint\"");
  }
  out.endpoint_target = target == "endpoint";
  out.substitution_rate = read_probability(a, path, "substitution_rate");

  const auto& e = a.at("endpoint");
  const std::string ep = "audit.endpoint";
  check_keys(e, ep, {"base_url", "path", "model", "api_key_env", "timeout_seconds"});
  out.endpoint.base_url = read<std::string>(e, ep, "base_url");
  out.endpoint.path = read<std::string>(e, ep, "path");
  out.endpoint.model = read<std::string>(e, ep, "model");
  out.endpoint.api_key_env = read<std::string>(e, ep, "api_key_env");
  out.endpoint.timeout_seconds = read<double>(e, ep, "timeout_seconds");
  if (!(out.endpoint.timeout_seconds > 0.0)) throw ConfigError("audit.endpoint.timeout_seconds", "must be positive");
  if (out.endpoint_target) {
    if (out.endpoint.base_url.rfind("http://", 0) != 0 && out.endpoint.base_url.rfind("https://", 0) != 0) {
      throw ConfigError("audit.endpoint.base_url", "must start with http:// or https://");
    }
    if (out.endpoint.model.empty()) throw ConfigError("audit.endpoint.model", "is required for an endpoint target");
  }

  const auto& c = a.at("corpus");
  const std::string cp = "audit.corpus";
  check_keys(c, cp, {"path", "sample_n", "turn_mode"});
  if (auto p = read_optional<std::string>(c, cp, "path")) out.corpus = *p;
  if (auto n = read_optional<std::size_t>(c, cp, "sample_n")) out.sample_n = *n;
  try {
    out.turn_mode = turn_mode_from_string(read<std::string>(c, cp, "turn_mode"));
  } catch (const InvalidInput& ex) {
    throw ConfigError("audit.corpus.turn_mode", ex.what());
  }

  const auto& col = a.at("collection");
  const std::string colp = "audit.collection";
  check_keys(col, colp, {"budget", "concurrency", "max_requests_per_second", "pacing_jitter_seconds", "retry", "normalization"});
  if (auto b = read_optional<std::size_t>(col, colp, "budget")) out.request_budget = *b;
  out.collection.concurrency = read_positive(col, colp, "concurrency");
  out.collection.max_requests_per_second = read<double>(col, colp, "max_requests_per_second");
  out.collection.pacing_jitter_seconds = read<double>(col, colp, "pacing_jitter_seconds");
  if (out.collection.max_requests_per_second < 0.0) throw ConfigError(join(colp, "max_requests_per_second"), "must be >= 0");
  if (out.collection.pacing_jitter_seconds < 0.0) throw ConfigError(join(colp, "pacing_jitter_seconds"), "must be >= 0");
  const auto& r = col.at("retry");
  const std::string rp = "audit.collection.retry";
  check_keys(r, rp, {"max_attempts", "initial_backoff_seconds", "backoff_multiplier"});
  out.collection.retry.max_attempts = read_positive(r, rp, "max_attempts");
  out.collection.retry.initial_backoff_seconds = read<double>(r, rp, "initial_backoff_seconds");
  out.collection.retry.backoff_multiplier = read<double>(r, rp, "backoff_multiplier");
  if (out.collection.retry.initial_backoff_seconds < 0.0) throw ConfigError(join(rp, "initial_backoff_seconds"), "must be >= 0");
  if (out.collection.retry.backoff_multiplier < 1.0) throw ConfigError(join(rp, "backoff_multiplier"), "must be >= 1");
  out.collection.normalization = read_rules(col, colp, "normalization");

  const auto& s = a.at("scorer");
  const std::string sp = "audit.scorer";
  check_keys(s, sp, {"type", "command"});
  const auto type = read<std::string>(s, sp, "type");
  if (type == "process") {
    out.scorer_command = read_strings(s, sp, "command");
    if (out.scorer_command.empty()) throw ConfigError("audit.scorer.command", "is required for a process scorer");
  } else if (type != "synthetic") {
    throw ConfigError("audit.scorer.type", "must be \"synthetic\" or \"process\"");
  }

  const auto text = read<std::string>(a, path, "mmd_text");
  if (text != "normalized" && text != "raw") throw ConfigError("audit.mmd_text", "must be \"normalized\" or \"raw\"");
  out.mmd_on_normalized = text == "normalized";
  return out;
}

}  // namespace

const Scenario& RunConfig::require_scenario() const {
  if (!scenario) throw ConfigError("scenario", "is required for this command");
  return *scenario;
}

HarnessOptions RunConfig::harness_options() const {
  HarnessOptions o;
  o.alpha = alpha;
  o.permutations = permutations;
  o.threads = threads;
  o.null_tables = std::make_shared<CvmNullTableCache>(null_draws, null_seed, null_cache_dir);
  o.score_test_budget = score_budget;
  o.mmd_budget = mmd_budget;
  return o;
}

std::string config_hash(const json& effective) {
  json relevant = effective;
  relevant.erase("output_dir");
  relevant.erase("threads");
  if (relevant.contains("null_table") && relevant["null_table"].is_object()) relevant["null_table"].erase("cache_dir");
  const std::string text = relevant.dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < 8 && i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

RunConfig load_config(const json& raw) {
  if (!raw.is_object() && !raw.is_null()) throw ConfigError("config", "must be an object");
  json merged = default_config();
  if (raw.is_object()) merged.merge_patch(raw);
  if (!merged.contains("scenario")) merged["scenario"] = nullptr;

  check_keys(merged, "", {"output_dir", "seed", "alpha", "tests", "trials", "q_grid", "permutations", "threads",
                          "null_table", "null_table_sizes", "budget", "scenario", "auroc", "simulate", "audit"});
  const json defaults = default_config();
  for (const char* section : {"null_table", "budget", "auroc", "simulate", "audit"}) {
    if (!merged.contains(section)) merged[section] = defaults[section];
    if (!merged[section].is_object()) throw ConfigError(section, "must be an object");
  }
  for (const char* section : {"rut", "mmd"}) {
    if (!merged["budget"].contains(section)) merged["budget"][section] = defaults["budget"][section];
  }
  for (const char* section : {"endpoint", "corpus", "collection", "scorer"}) {
    if (!merged["audit"].contains(section)) merged["audit"][section] = defaults["audit"][section];
  }
  if (merged["audit"]["collection"].is_object() && !merged["audit"]["collection"].contains("retry")) {
    merged["audit"]["collection"]["retry"] = defaults["audit"]["collection"]["retry"];
  }

  RunConfig c;
  c.output_dir = read<std::string>(merged, "", "output_dir");
  c.seed = read<std::uint64_t>(merged, "", "seed");
  c.alpha = read<double>(merged, "", "alpha");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ConfigError("alpha", "must lie in (0, 1)");
  for (const auto& t : read_strings(merged, "", "tests")) {
    try {
      const auto m = test_method_from_string(t);
      if (std::find(c.tests.begin(), c.tests.end(), m) == c.tests.end()) c.tests.push_back(m);
    } catch (const InvalidInput& e) {
      throw ConfigError("tests", e.what());
    }
  }
  if (c.tests.empty()) throw ConfigError("tests", "must name at least one test");
  c.trials = read_positive(merged, "", "trials");
  if (!merged["q_grid"].is_array()) throw ConfigError("q_grid", "must be an array of numbers");
  for (const auto& q : merged["q_grid"]) {
    if (!q.is_number()) throw ConfigError("q_grid", "must be an array of numbers");
    c.q_grid.push_back(q.get<double>());
  }
  if (c.q_grid.size() < 2 || c.q_grid.front() != 0.0 || c.q_grid.back() != 1.0 ||
      !std::is_sorted(c.q_grid.begin(), c.q_grid.end()) ||
      std::adjacent_find(c.q_grid.begin(), c.q_grid.end()) != c.q_grid.end()) {
    throw ConfigError("q_grid", "must be strictly ascending from 0 to 1");
  }
  c.permutations = read_positive(merged, "", "permutations");
  c.threads = read<unsigned>(merged, "", "threads");

  const auto& nt = merged["null_table"];
  check_keys(nt, "null_table", {"draws", "seed", "cache_dir"});
  c.null_draws = static_cast<std::size_t>(read_positive(nt, "null_table", "draws"));
  c.null_seed = read<std::uint64_t>(nt, "null_table", "seed");
  if (auto dir = read_optional<std::string>(nt, "null_table", "cache_dir")) c.null_cache_dir = *dir;
  if (!merged["null_table_sizes"].is_array() || merged["null_table_sizes"].empty()) {
    throw ConfigError("null_table_sizes", "must be a nonempty array of positive integers");
  }
  for (const auto& n : merged["null_table_sizes"]) {
    if (!n.is_number_integer() || n.get<long long>() < 1) {
      throw ConfigError("null_table_sizes", "must be a nonempty array of positive integers");
    }
    c.null_table_sizes.push_back(n.get<std::size_t>());
  }

  const auto& budget = merged["budget"];
  check_keys(budget, "budget", {"rut", "mmd"});
  c.score_budget = read_budget(budget.at("rut"), "budget.rut", TestMethod::Rut);
  c.mmd_budget = read_budget(budget.at("mmd"), "budget.mmd", TestMethod::Mmd);

  if (!merged["scenario"].is_null()) c.scenario = read_scenario(merged["scenario"]);

  const auto& au = merged["auroc"];
  check_keys(au, "auroc", {"prompts", "completions_per_prompt", "kinds"});
  c.auroc_prompts = read_positive(au, "auroc", "prompts");
  c.auroc_completions = read_positive(au, "auroc", "completions_per_prompt");
  if (c.auroc_completions < 2) throw ConfigError("auroc.completions_per_prompt", "must be >= 2");
  for (const auto& k : read_strings(au, "auroc", "kinds")) {
    try {
      c.auroc_kinds.push_back(score_function_from_string(k));
    } catch (const InvalidInput& e) {
      throw ConfigError("auroc.kinds", e.what());
    }
  }
  if (c.auroc_kinds.empty()) throw ConfigError("auroc.kinds", "must name at least one score function");

  const auto& sim = merged["simulate"];
  check_keys(sim, "simulate", {"prompts", "samples_per_prompt", "substitution_rate"});
  c.simulate_prompts = read_positive(sim, "simulate", "prompts");
  c.simulate_samples = read_positive(sim, "simulate", "samples_per_prompt");
  c.simulate_rate = read_probability(sim, "simulate", "substitution_rate");

  c.audit = read_audit(merged["audit"]);
  if (c.scenario && c.auroc_prompts > static_cast<int>(c.scenario->prompt_pool)) {
    throw ConfigError("auroc.prompts", "exceeds scenario.prompt_pool");
  }
  if (c.scenario) {
    const auto pool = c.scenario->prompt_pool;
    if (static_cast<std::size_t>(c.score_budget.prompts) > pool) throw ConfigError("budget.rut.prompts", "exceeds scenario.prompt_pool");
    if (static_cast<std::size_t>(c.mmd_budget.prompts) > pool) throw ConfigError("budget.mmd.prompts", "exceeds scenario.prompt_pool");
  }

  c.effective = std::move(merged);
  c.hash = config_hash(c.effective);
  return c;
}

// ---------------------------------------------------------------------------
// Output helpers

namespace {

std::string fmt(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

class Output {
 public:
  Output(const RunConfig& config, std::string command) : config_(config), command_(std::move(command)) {
    std::filesystem::create_directories(config_.output_dir);
  }

  std::ofstream open(const std::string& name) const {
    std::ofstream out(config_.output_dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + (config_.output_dir / name).string());
    return out;
  }

  std::ofstream csv(const std::string& name, const std::string& columns) const {
    auto out = open(name);
    out << "# rankaudit " << version() << "\n"
        << "# command: " << command_ << "\n"
        << "# config_hash: " << config_.hash << "\n"
        << "# seed: " << config_.seed << "\n"
        << columns << "\n";
    return out;
  }

  json header() const {
    return {{"record", "header"},     {"tool", "rankaudit"},        {"version", version()},
            {"command", command_},    {"config_hash", config_.hash}, {"seed", config_.seed}};
  }

  std::ofstream jsonl(const std::string& name) const {
    auto out = open(name);
    out << header().dump() << "\n";
    return out;
  }

  std::ofstream text(const std::string& name) const {
    auto out = open(name);
    out << "rankaudit " << version() << "  " << command_ << "  config " << config_.hash << "  seed "
        << config_.seed << "\n\n";
    return out;
  }

 private:
  const RunConfig& config_;
  std::string command_;
};

// Named child seed streams.
std::uint64_t stream(const RunConfig& c, std::string_view name) { return mix_seed(c.seed, fnv1a64(name)); }

bool has_test(const RunConfig& c, TestMethod m) {
  return std::find(c.tests.begin(), c.tests.end(), m) != c.tests.end();
}

}  // namespace

// ---------------------------------------------------------------------------
// audit

void cmd_audit(const RunConfig& config, std::ostream& log) {
  const Scenario& sc = config.require_scenario();
  const AuditConfig& a = config.audit;
  const bool score_tests = has_test(config, TestMethod::Rut) || has_test(config, TestMethod::Ks);
  const bool mmd = has_test(config, TestMethod::Mmd);
  const std::size_t n_score = score_tests ? static_cast<std::size_t>(config.score_budget.prompts) : 0;
  const std::size_t n_mmd = mmd ? static_cast<std::size_t>(config.mmd_budget.prompts) : 0;
  const std::size_t n_prompts = std::max(n_score, n_mmd);

  std::vector<PromptRecord> prompts;
  if (a.corpus) {
    const std::size_t n = a.sample_n.value_or(n_prompts);
    prompts = load_corpus(*a.corpus, n, stream(config, "corpus"), a.turn_mode);
    if (prompts.size() < n_prompts) {
      throw ConfigError("audit.corpus.sample_n", "must be at least " + std::to_string(n_prompts));
    }
  } else {
    for (std::size_t i = 0; i < n_prompts; ++i) {
      prompts.push_back({"s" + std::to_string(i), {{"user", "synthetic prompt " + std::to_string(i)}}, "synthetic"});
    }
  }

  std::vector<PromptRecord> queries(prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n_score));
  for (std::size_t i = 0; i < n_mmd; ++i) {
    for (int k = 0; k < config.mmd_budget.target_per_prompt; ++k) {
      PromptRecord q = prompts[i];
      q.id += "#" + std::to_string(k);
      queries.push_back(std::move(q));
    }
  }

  std::unique_ptr<MockChatServer> mock;
  std::unique_ptr<ChatTransport> transport;
  if (a.endpoint_target) {
    transport = std::make_unique<HttpChatTransport>(a.endpoint);
  } else {
    MockEndpointOptions mo{.model = sc.reference,
                           .alt = sc.alt,
                           .substitution_rate = a.substitution_rate,
                           .leading_space = sc.target_leading_space,
                           .seed = stream(config, "target")};
    mock = std::make_unique<MockChatServer>(std::move(mo));
    transport = std::make_unique<MockChatTransport>(*mock);
  }

  CollectOptions options = a.collection;
  options.budget = a.request_budget.value_or(queries.size());
  options.order_seed = stream(config, "order");
  ResponseStore store(config.output_dir / "responses");
  log << "collecting " << queries.size() << " completions\n";
  const AuditRun run = collect(a.endpoint, sc.reference.decoding(), queries, *transport, store, options);
  {
    std::ofstream out(config.output_dir / "collection.json", std::ios::trunc);
    out << json{{"budget", run.budget},
                {"billable_requests", run.billable_requests},
                {"successes", run.successes},
                {"retries", run.retries},
                {"resumed", run.resumed},
                {"collected", run.collected.size()}}
               .dump(2)
        << "\n";
  }
  std::map<std::string, const CollectedResponse*> by_id;
  for (const auto& r : run.collected) by_id[r.prompt_id] = &r;

  std::unique_ptr<ScoringBackend> scorer;
  if (a.scorer_command.empty()) {
    scorer = std::make_unique<SyntheticScoringBackend>(sc.reference);
  } else {
    scorer = std::make_unique<protocol::ProcessScoringBackend>(a.scorer_command);
  }
  const SyntheticTokenizer tokenizer(sc.reference.vocab_size());
  auto reference_text = [&](const PromptRecord& p, std::uint64_t base, int j, bool normalized) {
    const auto tokens = sample(sc.reference, prompt_seed_for(p), mix_seed(mix_seed(base, fnv1a64(p.id)), j));
    const auto text = tokenizer.render(tokens, sc.reference_leading_space);
    return normalized ? normalize(text, sc.reference_normalization) : text;
  };

  Output out(config, "audit");
  std::vector<TestOutcome> outcomes;
  std::optional<RutResult> rut;
  if (score_tests) {
    log << "scoring " << n_score << " target and " << n_score * config.score_budget.reference_per_prompt
        << " reference completions\n";
    std::vector<ScoredResponse> target;
    std::map<std::string, std::vector<ScoredResponse>> reference;
    std::vector<double> target_scores;
    std::vector<double> pooled;
    const auto ref_seed = stream(config, "reference");
    for (std::size_t i = 0; i < n_score; ++i) {
      const auto& p = prompts[i];
      target.push_back(score_response(p, by_id.at(p.id)->normalized, *scorer));
      target_scores.push_back(target.back().aggregates[sc.score]);
      auto& refs = reference[p.id];
      for (int j = 0; j < config.score_budget.reference_per_prompt; ++j) {
        refs.push_back(score_response(p, reference_text(p, ref_seed, j, true), *scorer));
        pooled.push_back(refs.back().aggregates[sc.score]);
      }
    }
    if (has_test(config, TestMethod::Rut)) {
      CvmNullTableCache tables(config.null_draws, config.null_seed, config.null_cache_dir);
      rut = run_rut(target, reference, sc.score, config.alpha, stream(config, "rut"), *tables.get(n_score));
      outcomes.push_back(rut->outcome);
    }
    if (has_test(config, TestMethod::Ks)) outcomes.push_back(ks_two_sample(target_scores, pooled, config.alpha));
  }
  if (mmd) {
    std::vector<StringSample> target;
    std::vector<StringSample> reference;
    const auto ref_seed = stream(config, "mmd_reference");
    for (std::size_t i = 0; i < n_mmd; ++i) {
      const auto& p = prompts[i];
      for (int k = 0; k < config.mmd_budget.target_per_prompt; ++k) {
        const auto* r = by_id.at(p.id + "#" + std::to_string(k));
        target.push_back({p.id, a.mmd_on_normalized ? r->normalized : r->raw});
      }
      for (int j = 0; j < config.mmd_budget.reference_per_prompt; ++j) {
        reference.push_back({p.id, reference_text(p, ref_seed, j, a.mmd_on_normalized)});
      }
    }
    outcomes.push_back(mmd_test(target, reference, config.permutations, config.alpha, stream(config, "mmd")));
  }

  {
    auto f = out.jsonl("outcomes.jsonl");
    for (const auto& o : outcomes) {
      json j = to_json(o);
      j["record"] = "outcome";
      j["score"] = std::string(to_string(sc.score));
      f << j.dump() << "\n";
    }
  }
  if (rut) {
    auto f = out.csv("ranks.csv", "prompt_id,r,u,below,ties,m");
    for (const auto& r : rut->ranks) {
      f << csv_field(r.prompt_id) << "," << fmt(r.r) << "," << fmt(r.u_draw) << "," << r.counts.below << ","
        << r.counts.ties << "," << r.counts.m << "\n";
    }
  }
  auto s = out.text("summary.txt");
  s << "target     " << (a.endpoint_target ? a.endpoint.base_url + " (" + a.endpoint.model + ")" : "synthetic")
    << "\nscore      " << to_string(sc.score) << "\nalpha      " << fmt(config.alpha) << "\n\n";
  s << std::left << std::setw(6) << "test" << std::setw(24) << "statistic" << std::setw(24) << "p-value"
    << "decision\n";
  for (const auto& o : outcomes) {
    s << std::left << std::setw(6) << o.method << std::setw(24) << fmt(o.statistic) << std::setw(24)
      << fmt(o.p_value) << (o.reject ? "significant difference" : "no significant difference") << "\n";
    log << o.method << ": p = " << fmt(o.p_value) << " -> "
        << (o.reject ? "significant difference" : "no significant difference") << "\n";
  }
}

// ---------------------------------------------------------------------------
// power

void cmd_power(const RunConfig& config, std::ostream& log) {
  const Scenario& sc = config.require_scenario();
  log << "building simulation for scenario '" << sc.name << "'\n";
  const Simulation sim(sc, config.harness_options());
  log << "running " << config.trials << " trials at " << config.q_grid.size() << " substitution rates\n";
  const auto curves = sim.power_curves(config.tests, config.q_grid, config.trials, config.seed);

  Output out(config, "power");
  for (const auto& c : curves) {
    auto f = out.csv("power_" + c.method + ".csv", "scenario,method,q,power,rejections,trials,ci_low,ci_high");
    for (const auto& p : c.points) {
      f << csv_field(c.scenario) << "," << c.method << "," << fmt(p.q) << "," << fmt(p.power) << ","
        << p.rejections << "," << p.trials << "," << fmt(p.ci_low) << "," << fmt(p.ci_high) << "\n";
    }
  }
  {
    auto f = out.jsonl("power_curves.jsonl");
    for (const auto& c : curves) {
      json points = json::array();
      for (const auto& p : c.points) {
        points.push_back({{"q", p.q}, {"power", p.power}, {"rejections", p.rejections}, {"trials", p.trials},
                          {"ci_low", p.ci_low}, {"ci_high", p.ci_high}});
      }
      f << json{{"record", "curve"}, {"scenario", c.scenario}, {"method", c.method}, {"auc", c.auc},
                {"points", points}}
               .dump()
        << "\n";
    }
  }
  auto s = out.text("summary.txt");
  s << "scenario   " << sc.name << "\nscore      " << to_string(sc.score) << "\ntrials     " << config.trials
    << "\n\n"
    << std::left << std::setw(6) << "test" << "auc\n";
  for (const auto& c : curves) {
    s << std::left << std::setw(6) << c.method << fmt(c.auc) << "\n";
    log << c.method << ": auc = " << fmt(c.auc) << "\n";
  }
}

// ---------------------------------------------------------------------------
// score-select

void cmd_score_select(const RunConfig& config, std::ostream& log) {
  const Scenario& sc = config.require_scenario();
  const Simulation sim(sc, config.harness_options());
  log << "running " << config.trials << " AUROC trials\n";
  const auto report = sim.auroc_report(config.auroc_prompts, config.auroc_completions, config.auroc_kinds,
                                       config.trials, config.seed);
  Output out(config, "score-select");
  {
    auto f = out.csv("auroc_trials.csv", "trial,kind,mean_auroc");
    for (std::size_t t = 0; t < static_cast<std::size_t>(config.trials); ++t) {
      for (std::size_t k = 0; k < report.kinds.size(); ++k) {
        f << t << "," << to_string(report.kinds[k]) << "," << fmt(report.per_trial[k][t]) << "\n";
      }
    }
  }
  struct Summary {
    ScoreFunctionKind kind;
    double mean;
    double sd;
    double separation;
  };
  std::vector<Summary> rows;
  for (std::size_t k = 0; k < report.kinds.size(); ++k) {
    const auto& v = report.per_trial[k];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    const double gap = std::abs(mean - 0.5);
    rows.push_back({report.kinds[k], mean, sd, sd > 0.0 ? gap / sd : (gap > 0.0 ? 1e300 : 0.0)});
  }
  const auto best = std::max_element(rows.begin(), rows.end(), [](const Summary& x, const Summary& y) {
    return x.separation < y.separation;
  });
  {
    auto f = out.jsonl("auroc_summary.jsonl");
    for (const auto& r : rows) {
      f << json{{"record", "auroc"}, {"kind", to_string(r.kind)}, {"mean", r.mean}, {"sd", r.sd},
                {"separation", r.separation}}
               .dump()
        << "\n";
    }
    f << json{{"record", "selection"}, {"kind", to_string(best->kind)}}.dump() << "\n";
  }
  auto s = out.text("summary.txt");
  s << std::left << std::setw(16) << "score" << std::setw(24) << "mean AUROC" << std::setw(24) << "sd"
    << "separation (sd)\n";
  for (const auto& r : rows) {
    s << std::left << std::setw(16) << to_string(r.kind) << std::setw(24) << fmt(r.mean) << std::setw(24)
      << fmt(r.sd) << fmt(r.separation) << "\n";
  }
  s << "\nselected   " << to_string(best->kind) << "\n";
  log << "selected score function: " << to_string(best->kind) << "\n";
}

// ---------------------------------------------------------------------------
// simulate

void cmd_simulate(const RunConfig& config, std::ostream& log) {
  const Scenario& sc = config.require_scenario();
  const SubstitutionPolicy policy{RateFunction{config.simulate_rate, {}}, sc.alt};
  std::optional<SyntheticTokenizer> tokenizer;
  if (static_cast<std::size_t>(sc.reference.vocab_size()) <= SyntheticTokenizer::kAlphabet.size()) {
    tokenizer.emplace(sc.reference.vocab_size());
  }
  Output out(config, "simulate");
  auto f = out.jsonl("samples.jsonl");
  const auto base = stream(config, "simulate");
  for (int i = 0; i < config.simulate_prompts; ++i) {
    const std::uint64_t ps = mix_seed(sc.pool_seed, static_cast<std::uint64_t>(i));
    for (int j = 0; j < config.simulate_samples; ++j) {
      const auto routed = route(policy, sc.reference, ps, mix_seed(base, static_cast<std::uint64_t>(i * config.simulate_samples + j)));
      const auto events = score_tokens(sc.reference, ps, routed.tokens);
      const auto agg = aggregate_all(events);
      json scores;
      for (auto k : kAllScoreFunctions) scores[std::string(to_string(k))] = agg[k];
      json rec = {{"record", "sample"},
                  {"prompt_index", i},
                  {"prompt_seed", ps},
                  {"sample", j},
                  {"served_by", routed.served_by == ServedBy::Alt ? "alt" : "reference"},
                  {"tokens", routed.tokens},
                  {"scores", scores}};
      if (tokenizer) rec["text"] = tokenizer->render(routed.tokens);
      f << rec.dump() << "\n";
    }
  }
  log << "wrote " << config.simulate_prompts * config.simulate_samples << " samples\n";
}

// ---------------------------------------------------------------------------
// null-table

void cmd_null_table(const RunConfig& config, std::ostream& log) {
  const auto dir = config.null_cache_dir.value_or(config.output_dir / "null_tables");
  CvmNullTableCache cache(config.null_draws, config.null_seed, dir);
  Output out(config, "null-table");
  auto f = out.csv("null_tables.csv", "n,draws,seed,q90,q95,q99,file");
  for (auto n : config.null_table_sizes) {
    const auto table = cache.get(n);
    const auto stats = table->sorted_statistics();
    auto quantile = [&](double p) {
      return stats[static_cast<std::size_t>(std::floor(p * static_cast<double>(stats.size() - 1)))];
    };
    f << n << "," << table->draws() << "," << table->seed() << "," << fmt(quantile(0.90)) << ","
      << fmt(quantile(0.95)) << "," << fmt(quantile(0.99)) << "," << cache.file_for(n).filename().string() << "\n";
    log << "n = " << n << ": " << cache.file_for(n).string() << "\n";
  }
}

// ---------------------------------------------------------------------------
// entry point

namespace {

void set_path(json& root, const std::string& dotted, const json& value) {
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError(dotted, "is not a valid field path");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Black-box model equality testing with the rank-based uniformity test, "
               "its baselines and a synthetic-model power harness."};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  std::optional<double> alpha;
  std::optional<unsigned> threads;
  std::vector<std::string> tests;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("-o,--output-dir", output_dir, "Directory for output files");
  app.add_option("--seed", seed, "Master seed");
  app.add_option("--trials", trials, "Monte Carlo trials");
  app.add_option("--alpha", alpha, "Significance level");
  app.add_option("--threads", threads, "Worker threads (0: all cores)");
  app.add_option("--tests", tests, "Tests to run: rut, ks, mmd")->delimiter(',');
  app.add_option("--set", sets, "Override a config field: dotted.path=value (JSON, or a bare string)");

  app.add_subcommand("audit", "Run the tests once against a target model or endpoint");
  app.add_subcommand("power", "Estimate power-vs-substitution-rate curves");
  app.add_subcommand("score-select", "Compare score functions by average AUROC");
  app.add_subcommand("simulate", "Sample from the scenario's models through the substitution router");
  app.add_subcommand("null-table", "Build and cache Cramer-von Mises null tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    json raw = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      try {
        raw = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("is not valid JSON: ") + e.what());
      }
      if (!raw.is_object()) throw ConfigError("config", "must be an object");
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(s, "override must have the form path=value");
      const std::string value = s.substr(eq + 1);
      json v;
      try {
        v = json::parse(value);
      } catch (const json::parse_error&) {
        v = value;
      }
      set_path(raw, s.substr(0, eq), v);
    }
    if (!output_dir.empty()) raw["output_dir"] = output_dir;
    if (seed) raw["seed"] = *seed;
    if (trials) raw["trials"] = *trials;
    if (alpha) raw["alpha"] = *alpha;
    if (threads) raw["threads"] = *threads;
    if (!tests.empty()) raw["tests"] = tests;

    const RunConfig config = load_config(raw);
    if (command == "audit") {
      cmd_audit(config, std::cerr);
    } else if (command == "power") {
      cmd_power(config, std::cerr);
    } else if (command == "score-select") {
      cmd_score_select(config, std::cerr);
    } else if (command == "simulate") {
      cmd_simulate(config, std::cerr);
    } else {
      cmd_null_table(config, std::cerr);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "rankaudit: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const PartialRunError& e) {
    std::cerr << "rankaudit: run interrupted after " << e.collected()
              << " completions (rerun to resume): " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "rankaudit: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace rankaudit::cli
