#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

namespace maet {

/// Worker count taken from MAET_THREADS (default 1). The width only changes
/// scheduling; every operation gathers results in a fixed order.
std::size_t thread_count();

/// Runs task(i) for every i in [0, n) on up to `threads` workers. If tasks
/// throw, the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task,
                  std::size_t threads = thread_count());

/// Computes produce(i) in parallel batches and passes the results to
/// consume(i, result) strictly in ascending index order. At most `threads`
/// results are alive at once, so memory stays bounded by the batch width.
template <typename Result>
void ordered_map(std::size_t n, const std::function<Result(std::size_t)>& produce,
                 const std::function<void(std::size_t, Result&)>& consume,
                 std::size_t threads = thread_count()) {
  if (threads == 0) threads = 1;
  for (std::size_t first = 0; first < n; first += threads) {
    const std::size_t batch = std::min(threads, n - first);
    std::vector<std::optional<Result>> results(batch);
    parallel_for(
        batch, [&](std::size_t k) { results[k].emplace(produce(first + k)); }, threads);
    for (std::size_t k = 0; k < batch; ++k) {
      consume(first + k, *results[k]);
      results[k].reset();
    }
  }
}

}  // namespace maet
