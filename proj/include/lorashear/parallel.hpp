#pragma once

#include <cstddef>
#include <functional>

namespace lorashear {

// Worker cap: LORASHEAR_THREADS if set to a positive integer, otherwise the
// hardware concurrency.
std::size_t thread_count();

// Runs fn(i) for i in [0, n) on up to thread_count() threads. Each index runs
// exactly once; the first exception thrown is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lorashear
