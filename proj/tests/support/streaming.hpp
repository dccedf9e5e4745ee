#pragma once

// Fixture for the streaming bound: three aligned on-disk stores (base,
// ability, multi-lingual) of `tensors` tensors each.

#include <cstddef>
#include <filesystem>

namespace maet::testing {

struct StreamingFixture {
  std::size_t largest_bytes = 0;  // largest tensor at 4 bytes per element
  std::size_t total_bytes = 0;    // one store's payload
};

StreamingFixture write_streaming_stores(const std::filesystem::path& dir, std::size_t tensors,
                                        std::size_t largest_elements, unsigned seed);

/// Peak heap growth while merging the stores of `dir` into a file there.
std::size_t merge_peak_bytes(const std::filesystem::path& dir);

}  // namespace maet::testing
