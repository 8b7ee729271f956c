#pragma once

#include <cstdint>
#include <functional>

namespace nsl {

// Global worker-thread count used by the kernels. Defaults to the machine
// parallelism. Thread count never changes results: every parallel loop
// partitions output elements disjointly and each element is computed by a
// single sequential evaluation, so 1-thread and k-thread runs are bitwise
// identical.
void set_num_threads(int n);
int num_threads();

// Runs fn(begin, end) over a disjoint contiguous partition of [0, n).
// Falls back to a single inline call when n or the configured thread count
// is small. Exceptions from workers are rethrown on the calling thread.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace nsl
