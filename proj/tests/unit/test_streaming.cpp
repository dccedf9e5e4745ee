#include <gtest/gtest.h>

#include <cstdlib>

#include "alloc_tracker.hpp"
#include "streaming.hpp"
#include "support.hpp"

using namespace maet::testing;

TEST(Streaming, MergePeakTracksLargestTensorNotStoreSize) {
  setenv("MAET_THREADS", "1", 1);
  TempDir small_dir, large_dir;
  const StreamingFixture small = write_streaming_stores(small_dir.path(), 50, 1 << 14, 1);
  const StreamingFixture large = write_streaming_stores(large_dir.path(), 200, 1 << 14, 2);
  const std::size_t small_peak = merge_peak_bytes(small_dir.path());
  const std::size_t large_peak = merge_peak_bytes(large_dir.path());
  EXPECT_EQ(small.largest_bytes, large.largest_bytes);
  EXPECT_GT(large.total_bytes, 3 * small.total_bytes);
  // Four times the tensors, essentially the same peak.
  EXPECT_LT(static_cast<double>(large_peak), 1.25 * static_cast<double>(small_peak) + 65536.0);
  EXPECT_LT(large_peak, 16 * large.largest_bytes);
  unsetenv("MAET_THREADS");
}
