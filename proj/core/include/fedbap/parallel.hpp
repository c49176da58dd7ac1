#pragma once

#include <cstddef>
#include <functional>

namespace fedbap {

/// Runs fn(i) for i in [0, count) on up to `threads` workers (0 = hardware
/// concurrency). Callers write results into per-index slots, so the output
/// does not depend on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t count, unsigned threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace fedbap
