#pragma once

#include <cstdint>
#include <functional>

namespace ctm {

// Number of worker threads (CTM_THREADS env override, else hardware count).
int worker_count();

// Partition layout for [0,n) with the given grain. Depends only on n and
// grain, never on the thread count, so reductions that sum per-partition
// buffers in index order are bit-deterministic on any machine.
std::int64_t partition_count(std::int64_t n, std::int64_t grain);

// Runs fn(part_index, begin, end) over the partitions of [0,n). Calls from
// inside a worker run serially to avoid pool re-entrancy.
void parallel_for_parts(std::int64_t n, std::int64_t grain,
                        const std::function<void(std::int64_t, std::int64_t, std::int64_t)>& fn);

// Convenience wrapper without the partition index.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace ctm
