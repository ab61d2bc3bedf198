#pragma once

#include <array>
#include <regex>
#include <string>
#include <string_view>

namespace icft::runner {

inline std::string trim(std::string_view s) {
  constexpr std::string_view ws = " \t\n\r\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

/// Extracts the answer from a raw model response. The patterns are tried in
/// order and the first one that matches anywhere in the text wins; its capture
/// is returned with surrounding whitespace removed. `.` does not cross line
/// breaks, so only the matching line contributes.
inline std::string parse_response(std::string_view raw) {
  static const std::array<std::regex, 4> patterns = {
      std::regex(R"(Answer: (.+))"),
      std::regex(R"(The answer is (.+))"),
      std::regex(R"(\*\*(.+)\*\*)"),
      std::regex(R"((.+))"),
  };
  const std::string text(raw);
  std::smatch m;
  for (const auto& re : patterns) {
    if (std::regex_search(text, m, re)) return trim(m[1].str());
  }
  return {};
}

}  // namespace icft::runner
