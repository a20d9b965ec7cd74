#pragma once

#include <cstddef>
#include <functional>

namespace dnet {

/// Worker count used by kernels that split work over output rows. Kernel
/// results never depend on this value; 1 means fully single-threaded.
void set_num_threads(unsigned n);
unsigned num_threads();

/// Runs body(begin, end) over a partition of [0, n). Chunks are contiguous
/// and each index is visited exactly once. Falls back to a direct call when
/// only one thread is configured or the range is small.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace dnet
