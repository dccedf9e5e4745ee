#include "maet/dtype.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "maet/error.hpp"

namespace maet {

std::string_view to_string(DType dtype) {
  switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::U64: return "U64";
  }
  return "?";
}

DType parse_dtype(std::string_view tag) {
  if (tag == "F32") return DType::F32;
  if (tag == "F16") return DType::F16;
  if (tag == "BF16") return DType::BF16;
  if (tag == "U64") return DType::U64;
  throw Error("unknown dtype tag '" + std::string(tag) + "'");
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exponent = (bits >> 10) & 0x1Fu;
  const std::uint32_t mantissa = bits & 0x3FFu;
  if (exponent == 0) {
    // Zero or subnormal: mantissa * 2^-24, exact in binary32.
    const float magnitude = std::ldexp(static_cast<float>(mantissa), -24);
    return sign ? -magnitude : magnitude;
  }
  if (exponent == 0x1F) {
    return std::bit_cast<float>(sign | 0x7F800000u | (mantissa << 13));
  }
  return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

float bf16_to_float(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::optional<std::uint16_t> float_to_half(float value) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t magnitude = x & 0x7FFFFFFFu;

  if (magnitude >= 0x7F800000u) return std::nullopt;  // inf / nan
  // 65520 is the midpoint between the largest half (65504) and 2^16; it and
  // everything above round to infinity.
  if (magnitude >= 0x477FF000u) return std::nullopt;

  const std::uint32_t exponent = magnitude >> 23;
  if (exponent < 113) {
    // Result is a half subnormal (or zero): round mantissa24 * 2^(e-126).
    const std::uint32_t shift = 126 - exponent;
    if (shift > 24) return sign;
    const std::uint32_t mantissa = (magnitude & 0x7FFFFFu) | 0x800000u;
    std::uint32_t result = mantissa >> shift;
    const std::uint32_t remainder = mantissa & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (remainder > halfway || (remainder == halfway && (result & 1u))) ++result;
    return static_cast<std::uint16_t>(sign | result);
  }

  std::uint32_t result = ((exponent - 112u) << 10) | ((magnitude & 0x7FFFFFu) >> 13);
  const std::uint32_t remainder = magnitude & 0x1FFFu;
  if (remainder > 0x1000u || (remainder == 0x1000u && (result & 1u))) ++result;
  return static_cast<std::uint16_t>(sign | result);
}

std::optional<std::uint16_t> float_to_bf16(float value) {
  if (!std::isfinite(value)) return std::nullopt;
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t rounded = x + 0x7FFFu + ((x >> 16) & 1u);
  const auto bits = static_cast<std::uint16_t>(rounded >> 16);
  if ((bits & 0x7F80u) == 0x7F80u) return std::nullopt;  // rounded up to inf
  return bits;
}

}  // namespace maet
