#pragma once

#include <cstddef>
#include <functional>

namespace dfssm {

// Number of worker threads used by parallel_for. Defaults to the hardware
// concurrency, capped at 16; override with the DFSSM_THREADS env var.
int thread_count();

// Runs fn(begin, end) over a fixed partition of [0, count). Work for a given
// index never depends on which thread runs it, so results are bitwise
// reproducible for any thread count as long as fn writes disjoint outputs
// per index. Nested calls run inline on the calling thread.
//
// `total_work` is a rough op-count estimate; jobs below the dispatch
// threshold run inline to avoid paying pool latency on tiny tensors.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn,
                  double total_work = 1e18);

}  // namespace dfssm
