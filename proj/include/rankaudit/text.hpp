#pragma once

#include <string>
#include <string_view>

namespace rankaudit {

// Decodes UTF-8 into unicode scalar values. Malformed sequences decode to
// U+FFFD, one per offending byte.
std::u32string utf8_to_scalars(std::string_view text);

}  // namespace rankaudit
