#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rankaudit {

enum class NormalizationRule {
  None,
  StripLeadingWhitespace,
  RestoreLeadingSpace,  // prepend one space unless the text already starts with whitespace
  UnicodeNfc,
};

// Names: none, strip_leading_whitespace (alias leading_whitespace),
// restore_leading_space, unicode_nfc.
std::string_view to_string(NormalizationRule rule);
NormalizationRule normalization_rule_from_string(std::string_view name);

std::string normalize(std::string_view text, NormalizationRule rule);

/// Applies the rules in order. Never fails; invalid UTF-8 passes through
/// the NFC rule unchanged.
std::string normalize(std::string_view text, std::span<const NormalizationRule> rules);

std::vector<NormalizationRule> normalization_rules_from_strings(std::span<const std::string> names);

}  // namespace rankaudit
