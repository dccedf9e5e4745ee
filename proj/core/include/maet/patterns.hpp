#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace maet {

/// Shell-style glob over a whole tensor name ('*', '?', '[...]'); '*' also
/// crosses '.' separators.
bool glob_match(std::string_view pattern, std::string_view name);

/// Include/exclude filter. An empty include list admits every name.
struct NamePatterns {
  std::vector<std::string> include;
  std::vector<std::string> exclude;

  bool empty() const { return include.empty() && exclude.empty(); }
  bool matches(std::string_view name) const;
  /// Throws InvalidArgument for an empty pattern or an unterminated '[' class.
  void validate() const;
};

}  // namespace maet
