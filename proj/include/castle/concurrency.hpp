#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <thread>
#include <vector>

namespace castle {

// Worker count for the tiled kernels, read from CASTLE_THREADS and clamped
// to >= 1. The default of 1 means fully sequential execution. The env var is
// consulted on every call so tests can flip modes at runtime.
inline std::size_t thread_count() {
  const char* env = std::getenv("CASTLE_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

// Runs f(i) for i in [0, n), split into contiguous chunks across `threads`
// std::threads (plain loop when threads <= 1). The caller guarantees that
// distinct iterations write disjoint data.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (n == 0) return;
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  const std::size_t chunk = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([begin, end, &f] {
      for (std::size_t i = begin; i < end; ++i) f(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace castle
