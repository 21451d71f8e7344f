#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace vitforge {

// Worker cap: VITFORGE_THREADS if set and positive, otherwise hardware
// concurrency.
inline std::size_t max_threads() {
  static const std::size_t cached = [] {
    if (const char* env = std::getenv("VITFORGE_THREADS")) {
      try {
        long v = std::stol(env);
        if (v > 0) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }();
  return cached;
}

// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread, so
// results are independent of the worker count as long as fn(i) only writes
// state owned by i. Small jobs (n * cost_per_item below the threshold) run
// inline.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t cost_per_item, Fn&& fn) {
  constexpr std::size_t kMinWorkPerThread = 1u << 18;
  std::size_t workers = std::min(max_threads(), n);
  if (n * cost_per_item < 2 * kMinWorkPerThread) workers = 1;
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(n, chunk); ++i) fn(i);
}

}  // namespace vitforge
