#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace maet {

enum class DType : std::uint8_t { F32, F16, BF16, U64 };

constexpr std::size_t byte_width(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::U64: return 8;
  }
  return 0;
}

constexpr bool is_floating(DType dtype) { return dtype != DType::U64; }

std::string_view to_string(DType dtype);

/// Parses the header tag ("F32", "F16", "BF16", "U64"). Throws maet::Error on anything else.
DType parse_dtype(std::string_view tag);

// IEEE binary16 / bfloat16 codecs. Widening is exact. Narrowing rounds to
// nearest, ties to even, and yields nullopt when the input is non-finite or
// rounds outside the finite range of the target format.
float half_to_float(std::uint16_t bits);
float bf16_to_float(std::uint16_t bits);
std::optional<std::uint16_t> float_to_half(float value);
std::optional<std::uint16_t> float_to_bf16(float value);

}  // namespace maet
