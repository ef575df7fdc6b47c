#include "rankaudit/normalize.hpp"

#include <unicode/errorcode.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "rankaudit/errors.hpp"

namespace rankaudit {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    std::size_t len = b < 0x80 ? 1 : (b & 0xE0) == 0xC0 ? 2 : (b & 0xF0) == 0xE0 ? 3 : (b & 0xF8) == 0xF0 ? 4 : 0;
    if (len == 0 || i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    }
    i += len;
  }
  return true;
}

std::string nfc(std::string_view text) {
  if (!valid_utf8(text)) return std::string(text);
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* normalizer = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) return std::string(text);
  const auto source = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  const icu::UnicodeString result = normalizer->normalize(source, status);
  if (U_FAILURE(status)) return std::string(text);
  std::string out;
  result.toUTF8String(out);
  return out;
}

}  // namespace

std::string_view to_string(NormalizationRule rule) {
  switch (rule) {
    case NormalizationRule::None: return "none";
    case NormalizationRule::StripLeadingWhitespace: return "strip_leading_whitespace";
    case NormalizationRule::RestoreLeadingSpace: return "restore_leading_space";
    case NormalizationRule::UnicodeNfc: return "unicode_nfc";
  }
  return "none";
}

NormalizationRule normalization_rule_from_string(std::string_view name) {
  if (name == "none") return NormalizationRule::None;
  if (name == "strip_leading_whitespace" || name == "leading_whitespace") {
    return NormalizationRule::StripLeadingWhitespace;
  }
  if (name == "restore_leading_space") return NormalizationRule::RestoreLeadingSpace;
  if (name == "unicode_nfc") return NormalizationRule::UnicodeNfc;
  throw InvalidInput("unknown normalization rule '" + std::string(name) + "'");
}

std::string normalize(std::string_view text, NormalizationRule rule) {
  switch (rule) {
    case NormalizationRule::None:
      return std::string(text);
    case NormalizationRule::StripLeadingWhitespace: {
      std::size_t i = 0;
      while (i < text.size() && is_space(text[i])) ++i;
      return std::string(text.substr(i));
    }
    case NormalizationRule::RestoreLeadingSpace:
      if (!text.empty() && is_space(text.front())) return std::string(text);
      return " " + std::string(text);
    case NormalizationRule::UnicodeNfc:
      return nfc(text);
  }
  return std::string(text);
}

std::string normalize(std::string_view text, std::span<const NormalizationRule> rules) {
  std::string out(text);
  for (auto rule : rules) out = normalize(out, rule);
  return out;
}

std::vector<NormalizationRule> normalization_rules_from_strings(std::span<const std::string> names) {
  std::vector<NormalizationRule> rules;
  rules.reserve(names.size());
  for (const auto& n : names) rules.push_back(normalization_rule_from_string(n));
  return rules;
}

}  // namespace rankaudit
