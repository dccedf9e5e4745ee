#include "maet/patterns.hpp"

#include <fnmatch.h>

#include "maet/error.hpp"

namespace maet {

namespace {

void validate_pattern(const std::string& pattern) {
  if (pattern.empty()) throw InvalidArgument("malformed pattern: empty");
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == '\\') {
      ++i;
      continue;
    }
    if (pattern[i] != '[') continue;
    std::size_t j = i + 1;
    if (j < pattern.size() && (pattern[j] == '!' || pattern[j] == '^')) ++j;
    if (j < pattern.size() && pattern[j] == ']') ++j;  // leading ']' is literal
    while (j < pattern.size() && pattern[j] != ']') ++j;
    if (j >= pattern.size()) {
      throw InvalidArgument("malformed pattern '" + pattern + "': unterminated '['");
    }
    i = j;
  }
}

}  // namespace

bool glob_match(std::string_view pattern, std::string_view name) {
  const std::string p(pattern);
  const std::string n(name);
  return ::fnmatch(p.c_str(), n.c_str(), 0) == 0;
}

bool NamePatterns::matches(std::string_view name) const {
  bool included = include.empty();
  for (const std::string& p : include) {
    if (glob_match(p, name)) {
      included = true;
      break;
    }
  }
  if (!included) return false;
  for (const std::string& p : exclude) {
    if (glob_match(p, name)) return false;
  }
  return true;
}

void NamePatterns::validate() const {
  for (const std::string& p : include) validate_pattern(p);
  for (const std::string& p : exclude) validate_pattern(p);
}

}  // namespace maet
