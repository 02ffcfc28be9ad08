#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace driftalign {

/// Worker count used by every parallel loop in the library (default: hardware
/// concurrency). Results never depend on this value: work is split into
/// fixed-size chunks and callers reduce chunk results in chunk order.
void set_thread_count(int n);
int thread_count();

inline size_t chunk_count(size_t n, size_t grain) { return grain == 0 ? 0 : (n + grain - 1) / grain; }

/// Calls fn(chunk, begin, end) for every chunk of `grain` consecutive indices.
template <typename Fn>
void parallel_chunks(size_t n, size_t grain, Fn&& fn) {
  const size_t chunks = chunk_count(n, grain);
  const size_t workers = std::min<size_t>(static_cast<size_t>(std::max(1, thread_count())), chunks);
  if (workers <= 1) {
    for (size_t c = 0; c < chunks; ++c) fn(c, c * grain, std::min(n, (c + 1) * grain));
    return;
  }
  std::atomic<size_t> next{0};
  auto work = [&] {
    for (size_t c = next++; c < chunks; c = next++) fn(c, c * grain, std::min(n, (c + 1) * grain));
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
}

/// Element-wise loop without a reduction.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn, size_t grain = 256) {
  parallel_chunks(n, grain, [&](size_t, size_t b, size_t e) {
    for (size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace driftalign
