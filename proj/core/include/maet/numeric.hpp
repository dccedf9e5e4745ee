#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "maet/error.hpp"

namespace maet {

/// Shortest decimal text that parses back to exactly `value`.
inline std::string format_real(double value) {
  char buffer[64];
  const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, result.ptr);
}

inline double parse_real(std::string_view text, std::string_view what) {
  double value = 0.0;
  const auto result = std::from_chars(text.data(), text.data() + text.size(), value);
  if (result.ec != std::errc() || result.ptr != text.data() + text.size() || !std::isfinite(value)) {
    throw InvalidArgument(std::string(what) + ": '" + std::string(text) + "' is not a finite number");
  }
  return value;
}

/// Throws InvalidArgument unless percent lies in (0, 100].
inline void check_percent(double percent, std::string_view what) {
  if (!(percent > 0.0 && percent <= 100.0)) {
    throw InvalidArgument(std::string(what) + " must lie in (0, 100], got " + format_real(percent));
  }
}

/// ceil(percent / 100 * n), clamped to [1, n] for n > 0. A relative slack of
/// 1e-12 absorbs binary rounding of exact products (200/3 % of 3 is 2, not 3).
inline std::uint64_t selection_count(double percent, std::uint64_t n) {
  if (n == 0) return 0;
  const double exact = percent / 100.0 * static_cast<double>(n);
  auto count = static_cast<std::uint64_t>(std::ceil(exact * (1.0 - 1e-12)));
  if (count < 1) count = 1;
  if (count > n) count = n;
  return count;
}

}  // namespace maet
