#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rankaudit {

// Base of every error the toolkit raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Enumeration or API-call budget would be exceeded.
class BudgetError : public Error {
 public:
  using Error::Error;
};

class ScoringBackendError : public Error {
 public:
  ScoringBackendError(std::string prompt_id, const std::string& what)
      : Error("scoring backend error for prompt '" + prompt_id + "': " + what),
        prompt_id_(std::move(prompt_id)) {}

  const std::string& prompt_id() const { return prompt_id_; }

 private:
  std::string prompt_id_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class CorpusIntegrityError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

// A collection run stopped early. Everything collected so far is already
// persisted in the response store, so rerunning with the same store resumes.
class PartialRunError : public Error {
 public:
  PartialRunError(const std::string& what, std::size_t collected)
      : Error(what), collected_(collected) {}

  std::size_t collected() const { return collected_; }

 private:
  std::size_t collected_;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config field '" + field + "': " + what), field_(std::move(field)), detail_(what) {}

  const std::string& field() const { return field_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string field_;
  std::string detail_;
};

}  // namespace rankaudit
