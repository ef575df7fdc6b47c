#include "rankaudit/apiclient.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "rankaudit/errors.hpp"
#include "rankaudit/random.hpp"

namespace rankaudit {

using nlohmann::json;

TurnMode turn_mode_from_string(std::string_view name) {
  if (name == "first_user_turn") return TurnMode::FirstUserTurn;
  if (name == "full_history") return TurnMode::FullHistory;
  throw InvalidInput("unknown turn mode '" + std::string(name) + "'");
}

std::string_view to_string(TurnMode mode) {
  return mode == TurnMode::FirstUserTurn ? "first_user_turn" : "full_history";
}

namespace {

PromptRecord parse_record(const std::string& line, std::size_t line_no, TurnMode mode,
                          const std::string& default_source) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_no, "record must be an object");
  PromptRecord r;
  if (!j.contains("id")) throw ParseError(line_no, "record has no id");
  if (j["id"].is_string()) {
    r.id = j["id"].get<std::string>();
  } else if (j["id"].is_number_integer()) {
    r.id = std::to_string(j["id"].get<long long>());
  } else {
    throw ParseError(line_no, "id must be a string or integer");
  }
  if (r.id.empty()) throw ParseError(line_no, "id is empty");
  r.source = default_source;
  if (j.contains("source")) {
    if (!j["source"].is_string()) throw ParseError(line_no, "source must be a string");
    r.source = j["source"].get<std::string>();
  }

  if (j.contains("messages")) {
    const auto& ms = j["messages"];
    if (!ms.is_array() || ms.empty()) throw ParseError(line_no, "messages must be a nonempty array");
    for (const auto& m : ms) {
      if (!m.is_object() || !m.contains("role") || !m.contains("content") || !m["role"].is_string() ||
          !m["content"].is_string()) {
        throw ParseError(line_no, "each message needs string role and content");
      }
      r.messages.push_back({m["role"].get<std::string>(), m["content"].get<std::string>()});
    }
  } else if (j.contains("text")) {
    if (!j["text"].is_string()) throw ParseError(line_no, "text must be a string");
    r.messages.push_back({"user", j["text"].get<std::string>()});
  } else {
    throw ParseError(line_no, "record needs messages or text");
  }

  if (mode == TurnMode::FirstUserTurn) {
    const auto it = std::find_if(r.messages.begin(), r.messages.end(),
                                 [](const ChatMessage& m) { return m.role == "user"; });
    if (it == r.messages.end()) throw ParseError(line_no, "record has no user turn");
    r.messages = {*it};
  }
  for (const auto& m : r.messages) {
    if (m.content.empty()) throw ParseError(line_no, "message content is empty");
  }
  return r;
}

}  // namespace

std::vector<PromptRecord> parse_corpus(std::istream& in, TurnMode mode, const std::string& default_source) {
  std::vector<PromptRecord> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto r = parse_record(line, line_no, mode, default_source);
    if (!seen.insert(r.id).second) {
      throw CorpusIntegrityError("duplicate prompt id '" + r.id + "' on line " + std::to_string(line_no));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PromptRecord> sample_prompts(std::span<const PromptRecord> records, std::size_t n,
                                         std::uint64_t seed) {
  if (n > records.size()) {
    throw InvalidInput("cannot sample " + std::to_string(n) + " prompts from a corpus of " +
                       std::to_string(records.size()));
  }
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(records.size() - i))]);
  }
  std::vector<PromptRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(records[idx[i]]);
  return out;
}

std::vector<PromptRecord> load_corpus(const std::filesystem::path& path,
                                      std::optional<std::size_t> sample_n, std::uint64_t seed,
                                      TurnMode mode) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open corpus " + path.string());
  auto records = parse_corpus(in, mode, path.stem().string());
  if (!sample_n) return records;
  return sample_prompts(records, *sample_n, seed);
}

json chat_request_body(const EndpointConfig& endpoint, const DecodingParams& decoding,
                       const PromptRecord& prompt) {
  json messages = json::array();
  for (const auto& m : prompt.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  return {{"model", endpoint.model},
          {"messages", std::move(messages)},
          {"temperature", decoding.temperature},
          {"max_tokens", decoding.max_tokens}};
}

std::string parse_chat_completion(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error&) {
    throw TransportError("response body is not JSON");
  }
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw TransportError("response has no choices[0].message.content");
  }
}

json to_json(const CollectedResponse& r) {
  return {{"prompt_id", r.prompt_id}, {"raw", r.raw}, {"normalized", r.normalized}, {"meta", r.meta}};
}

CollectedResponse collected_response_from_json(const json& j) {
  CollectedResponse r;
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.raw = j.at("raw").get<std::string>();
  r.normalized = j.at("normalized").get<std::string>();
  if (j.contains("meta")) r.meta = j["meta"];
  return r;
}

ResponseStore::ResponseStore(std::filesystem::path directory) : directory_(std::move(directory)) {
  std::filesystem::create_directories(directory_);
}

std::vector<CollectedResponse> ResponseStore::load_responses() const {
  std::vector<CollectedResponse> out;
  std::ifstream in(responses_path());
  if (!in) return out;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  for (const auto& l : lines) {
    ++line_no;
    if (l.empty()) continue;
    try {
      out.push_back(collected_response_from_json(json::parse(l)));
    } catch (const json::exception& e) {
      if (line_no == lines.size()) break;  // torn tail
      throw ParseError(line_no, std::string("corrupt response store: ") + e.what());
    }
  }
  return out;
}

std::size_t ResponseStore::count_raw_requests() const {
  std::ifstream in(raw_log_path());
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ++n;
  }
  return n;
}

namespace {

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << line << '\n';
  out.flush();
  if (!out) throw Error("write to " + path.string() + " failed");
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void ResponseStore::append_raw(const json& record) {
  std::lock_guard lock(mutex_);
  append_line(raw_log_path(), record.dump());
}

void ResponseStore::append_response(const CollectedResponse& response) {
  std::lock_guard lock(mutex_);
  append_line(responses_path(), to_json(response).dump());
}

namespace {

enum class Failure { None, Budget, Transport };

class Pacer {
 public:
  Pacer(double per_second, double jitter, std::uint64_t seed)
      : interval_(per_second > 0.0 ? 1.0 / per_second : 0.0), jitter_(jitter), rng_(seed) {}

  void wait() {
    if (interval_ <= 0.0 && jitter_ <= 0.0) return;
    using clock = std::chrono::steady_clock;
    clock::time_point at;
    {
      std::lock_guard lock(mutex_);
      const auto now = clock::now();
      at = std::max(now, next_);
      next_ = at + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(interval_));
      at += std::chrono::duration_cast<clock::duration>(
          std::chrono::duration<double>(jitter_ * rng_.uniform()));
    }
    std::this_thread::sleep_until(at);
  }

 private:
  double interval_;
  double jitter_;
  Rng rng_;
  std::mutex mutex_;
  std::chrono::steady_clock::time_point next_{};
};

}  // namespace

AuditRun collect(const EndpointConfig& endpoint, const DecodingParams& decoding,
                 std::span<const PromptRecord> prompts, ChatTransport& transport,
                 ResponseStore& store, const CollectOptions& options) {
  decoding.validate();
  if (options.concurrency < 1) throw InvalidInput("concurrency must be >= 1");
  if (options.retry.max_attempts < 1) throw InvalidInput("retry policy needs at least one attempt");

  AuditRun run;
  run.endpoint = endpoint;
  run.decoding = decoding;
  run.budget = options.budget;

  std::unordered_set<std::string> requested;
  for (const auto& p : prompts) {
    if (!requested.insert(p.id).second) throw CorpusIntegrityError("duplicate prompt id '" + p.id + "'");
  }

  std::map<std::string, CollectedResponse> done;
  for (auto& r : store.load_responses()) {
    if (requested.count(r.prompt_id)) done.emplace(r.prompt_id, std::move(r));
  }
  const std::size_t prior_billable = store.count_raw_requests();

  // Repeated queries of one conversation stay in request order on one
  // worker; distinct conversations go out in a seeded shuffle.
  std::vector<std::vector<const PromptRecord*>> groups;
  std::unordered_map<std::string, std::size_t> group_of;
  for (const auto& p : prompts) {
    if (done.count(p.id)) {
      ++run.resumed;
      continue;
    }
    const std::string key = chat_request_body(endpoint, decoding, p).at("messages").dump();
    auto [it, fresh] = group_of.try_emplace(key, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(&p);
  }
  std::size_t pending = 0;
  for (const auto& g : groups) pending += g.size();
  if (prior_billable + pending > options.budget) {
    throw BudgetError("budget of " + std::to_string(options.budget) + " requests cannot cover " +
                      std::to_string(pending) + " prompts after " + std::to_string(prior_billable) +
                      " earlier requests");
  }
  Rng order(options.order_seed);
  for (std::size_t i = groups.size(); i > 1; --i) {
    std::swap(groups[i - 1], groups[static_cast<std::size_t>(order.below(i))]);
  }

  std::atomic<std::size_t> next_group{0};
  std::atomic<std::size_t> billable{prior_billable};
  std::atomic<std::size_t> successes{0};
  std::atomic<std::size_t> failed_attempts{0};
  std::atomic<bool> stop{false};
  std::mutex state_mutex;
  Failure failure = Failure::None;
  std::string failure_message;
  std::map<std::string, CollectedResponse> fresh;
  Pacer pacer(options.max_requests_per_second, options.pacing_jitter_seconds,
              mix_seed(options.order_seed, 0x70616365ULL));

  auto fail = [&](Failure kind, std::string message) {
    std::lock_guard lock(state_mutex);
    if (failure == Failure::None) {
      failure = kind;
      failure_message = std::move(message);
    }
    stop = true;
  };

  auto query = [&](const PromptRecord& prompt) {
    const std::string body = chat_request_body(endpoint, decoding, prompt).dump();
    for (int attempt = 1; attempt <= options.retry.max_attempts; ++attempt) {
      if (stop) return;
      if (billable.fetch_add(1) >= options.budget) {
        billable.fetch_sub(1);
        fail(Failure::Budget, "request budget of " + std::to_string(options.budget) + " exhausted");
        return;
      }
      pacer.wait();
      const auto t0 = std::chrono::steady_clock::now();
      const HttpResult result = transport.post(body);
      const double latency_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      json raw = {{"prompt_id", prompt.id}, {"attempt", attempt},   {"status", result.status},
                  {"request", body},        {"body", result.body}, {"latency_ms", latency_ms},
                  {"timestamp", utc_timestamp()}};
      if (!result.error.empty()) raw["error"] = result.error;
      store.append_raw(raw);

      std::string problem;
      if (result.status == 200) {
        try {
          CollectedResponse r;
          r.prompt_id = prompt.id;
          r.raw = parse_chat_completion(result.body);
          r.normalized = normalize(r.raw, options.normalization);
          json rules = json::array();
          for (auto rule : options.normalization) rules.push_back(std::string(to_string(rule)));
          r.meta = {{"attempts", attempt},
                    {"latency_ms", latency_ms},
                    {"timestamp", raw["timestamp"]},
                    {"model", endpoint.model},
                    {"temperature", decoding.temperature},
                    {"max_tokens", decoding.max_tokens},
                    {"normalization", std::move(rules)}};
          store.append_response(r);
          ++successes;
          std::lock_guard lock(state_mutex);
          fresh.emplace(prompt.id, std::move(r));
          return;
        } catch (const TransportError& e) {
          ++failed_attempts;
          fail(Failure::Transport, "prompt '" + prompt.id + "': " + e.what());
          return;
        }
      }
      ++failed_attempts;
      const bool retryable = result.status == 0 || result.status == 429 || result.status >= 500;
      problem = result.status == 0 ? result.error : "HTTP " + std::to_string(result.status);
      if (!retryable || attempt == options.retry.max_attempts) {
        fail(Failure::Transport, "prompt '" + prompt.id + "' failed after " + std::to_string(attempt) +
                                     " attempt(s): " + problem);
        return;
      }
      const double backoff = options.retry.initial_backoff_seconds *
                             std::pow(options.retry.backoff_multiplier, attempt - 1);
      if (backoff > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
    }
  };

  auto worker = [&] {
    for (std::size_t g = next_group++; g < groups.size() && !stop; g = next_group++) {
      for (const auto* p : groups[g]) {
        if (stop) return;
        query(*p);
      }
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(options.concurrency), groups.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (const auto& p : prompts) {
    if (auto it = done.find(p.id); it != done.end()) {
      run.collected.push_back(it->second);
    } else if (auto jt = fresh.find(p.id); jt != fresh.end()) {
      run.collected.push_back(jt->second);
    }
  }
  run.billable_requests = billable;
  run.successes = successes;
  run.retries = failed_attempts;

  if (failure == Failure::Budget) throw BudgetError(failure_message);
  if (failure == Failure::Transport) throw PartialRunError(failure_message, run.collected.size());
  return run;
}

}  // namespace rankaudit
